//! Synthetic workload generators. Every generator is a pure function of its
//! parameters and seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Agent, Granularity, KernelId, Region, Trace, TraceEvent, TraceHeader, VirtAddr};

const PAGE: u64 = 4096;
const LINE: u64 = 64;
const IN_ELEM: u32 = 4;
const OUT_ELEM: u32 = 1;

/// Block edge used by the pack generator when none is given.
pub const DEFAULT_PACK_BLOCK: usize = 32;
/// Matrix size used by the GEMM pipeline when none is given (256 x 256).
pub const DEFAULT_GEMM_ELEMS: usize = 65_536;
/// Distance between consecutive pointer-chase nodes (one node per page).
pub const NODE_STRIDE: u64 = PAGE;

/// Elements processed between two compute events in the scan kernels.
const SCAN_CHUNK: u64 = 16;

fn align_up(x: u64, to: u64) -> u64 {
    x.div_ceil(to) * to
}

fn space_for(end: u64) -> u64 {
    end.max(PAGE).next_power_of_two()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn kernel(events: &mut Vec<TraceEvent>, id: KernelId, body: impl FnOnce(&mut Vec<TraceEvent>)) {
    events.push(TraceEvent::KernelBegin {
        kernel_id: id,
        granularity: Granularity::Function,
    });
    body(events);
    events.push(TraceEvent::KernelEnd { kernel_id: id });
}

fn compute(events: &mut Vec<TraceEvent>, site: Agent, cycles: u64) {
    if cycles > 0 {
        events.push(TraceEvent::Compute { site, cycles });
    }
}

/// Two read scans over `n` 32-bit inputs (min/max search, then conversion)
/// with one 8-bit store per element during the second scan.
fn push_quantize(events: &mut Vec<TraceEvent>, input: VirtAddr, output: VirtAddr, n: u64) {
    for i in 0..n {
        events.push(TraceEvent::Load {
            vaddr: input + i * IN_ELEM as u64,
            bytes: IN_ELEM,
        });
        if (i + 1) % SCAN_CHUNK == 0 || i + 1 == n {
            compute(events, Agent::Cpu, (i % SCAN_CHUNK) + 1);
        }
    }
    for i in 0..n {
        events.push(TraceEvent::Load {
            vaddr: input + i * IN_ELEM as u64,
            bytes: IN_ELEM,
        });
        events.push(TraceEvent::Store {
            vaddr: output + i * OUT_ELEM as u64,
            bytes: OUT_ELEM,
        });
        if (i + 1) % SCAN_CHUNK == 0 || i + 1 == n {
            compute(events, Agent::Cpu, (i % SCAN_CHUNK) + 1);
        }
    }
}

/// Position of element `(r, c)` in the packed output. Tiles of
/// `block x block` (smaller at the edges) are laid out row-major; inside a
/// tile elements are column-major.
pub fn pack_output_index(r: usize, c: usize, rows: usize, cols: usize, block: usize) -> usize {
    let (tr, tc) = (r / block, c / block);
    let tile_h = block.min(rows - tr * block);
    // full tile-rows above, then full-width tiles to the left in this tile-row
    let above = tr * block * cols;
    let left = tile_h * tc * block;
    above + left + (c - tc * block) * tile_h + (r - tr * block)
}

/// Column-major read of a row-major `rows x cols` matrix, each element
/// stored to its blocked position.
fn push_pack(
    events: &mut Vec<TraceEvent>,
    input: VirtAddr,
    output: VirtAddr,
    rows: usize,
    cols: usize,
    block: usize,
) {
    for c in 0..cols {
        for r in 0..rows {
            events.push(TraceEvent::Load {
                vaddr: input + ((r * cols + c) as u64) * IN_ELEM as u64,
                bytes: IN_ELEM,
            });
            let o = pack_output_index(r, c, rows, cols, block);
            events.push(TraceEvent::Store {
                vaddr: output + o as u64 * IN_ELEM as u64,
                bytes: IN_ELEM,
            });
        }
        compute(events, Agent::Cpu, rows as u64);
    }
}

fn names(pairs: &[(KernelId, &str)]) -> BTreeMap<KernelId, String> {
    pairs.iter().map(|(k, n)| (*k, n.to_string())).collect()
}

/// Quantization of an `n_elements` matrix as kernel 1. The seed is unused:
/// the access pattern is fully determined by `n_elements`.
pub fn gen_quantize_trace(n_elements: usize, _seed: u64) -> Trace {
    let n = n_elements as u64;
    let input = 0;
    let output = align_up(n * IN_ELEM as u64, PAGE);
    let end = align_up(output + n * OUT_ELEM as u64, PAGE);
    let mut cpu = Vec::new();
    kernel(&mut cpu, 1, |ev| push_quantize(ev, input, output, n));
    let pim_regions = if end > 0 {
        vec![Region { base: 0, bound: end }]
    } else {
        vec![]
    };
    Trace {
        header: TraceHeader {
            vaddr_space_size: space_for(end),
            pim_regions,
            kernel_names: names(&[(1, "quantize")]),
        },
        cpu,
        pim: vec![],
    }
}

/// Packing of a `rows x cols` matrix into `block`-sized tiles as kernel 1.
pub fn gen_pack_trace(rows: usize, cols: usize, block: usize, _seed: u64) -> Trace {
    assert!(rows >= 1 && cols >= 1 && block >= 1, "pack dimensions must be >= 1");
    let bytes = (rows * cols) as u64 * IN_ELEM as u64;
    let input = 0;
    let output = align_up(bytes, PAGE);
    let end = align_up(output + bytes, PAGE);
    let mut cpu = Vec::new();
    kernel(&mut cpu, 1, |ev| push_pack(ev, input, output, rows, cols, block));
    Trace {
        header: TraceHeader {
            vaddr_space_size: space_for(end),
            pim_regions: vec![Region { base: 0, bound: end }],
            kernel_names: names(&[(1, "pack")]),
        },
        cpu,
        pim: vec![],
    }
}

/// Buffer placement for the GEMM pipeline generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmLayout {
    /// Matrix edge; each chunk holds `side * side` elements.
    pub side: usize,
    /// Bytes of PIM-region buffers per iteration.
    pub pim_stride: u64,
    /// Bytes of CPU-only (unpack) buffer per iteration.
    pub cpu_stride: u64,
}

impl GemmLayout {
    pub fn new(matrix_elems: usize) -> Self {
        let side = ((matrix_elems as f64).sqrt().floor() as usize).max(1);
        let chunk = align_up((side * side) as u64 * IN_ELEM as u64, PAGE);
        let quant_out = align_up((side * side) as u64 * OUT_ELEM as u64, PAGE);
        Self {
            side,
            // pack in, pack out, quantize in, quantize out
            pim_stride: 3 * chunk + quant_out,
            cpu_stride: chunk,
        }
    }

    pub fn elems(&self) -> usize {
        self.side * self.side
    }

    /// Compute cycles of one innermost GEMM block.
    pub fn gemm_cycles(&self) -> u64 {
        12 * self.elems() as u64
    }

    pub fn kernel_ids(iteration: usize) -> [KernelId; 4] {
        let base = 4 * iteration as KernelId;
        [base + 1, base + 2, base + 3, base + 4]
    }
}

/// `n_gemm_ops` iterations of {pack, quantize, gemm, unpack}, each a
/// Function-granularity kernel. Pack and quantize buffers live in one PIM
/// region; unpack writes a CPU-only buffer. The innermost GEMM is a pure
/// compute block. `matrix_elems` is rounded down to a square.
///
/// The stream is software pipelined: pack and quantize of iteration `i + 1`
/// are issued before gemm `i`, and a fence closes every iteration, so the
/// inputs of gemm `i` are ready when it starts even if pack and quantize run
/// elsewhere.
pub fn gen_gemm_pipeline_trace(n_gemm_ops: usize, matrix_elems: usize, _seed: u64) -> Trace {
    assert!(n_gemm_ops >= 1, "need at least one GEMM op");
    let lay = GemmLayout::new(matrix_elems);
    let side = lay.side;
    let n = lay.elems() as u64;
    let chunk = align_up(n * IN_ELEM as u64, PAGE);
    let region_end = lay.pim_stride * n_gemm_ops as u64;
    let cpu_base = region_end;
    let end = cpu_base + lay.cpu_stride * n_gemm_ops as u64;

    let mut kernel_names = BTreeMap::new();
    for i in 0..n_gemm_ops {
        let ids = GemmLayout::kernel_ids(i);
        for (id, name) in ids.into_iter().zip(["pack", "quantize", "gemm", "unpack"]) {
            kernel_names.insert(id, name.to_string());
        }
    }
    let prepare = |cpu: &mut Vec<TraceEvent>, i: usize| {
        let [pack, quant, _, _] = GemmLayout::kernel_ids(i);
        let base = lay.pim_stride * i as u64;
        kernel(cpu, pack, |ev| {
            push_pack(ev, base, base + chunk, side, side, DEFAULT_PACK_BLOCK)
        });
        kernel(cpu, quant, |ev| {
            push_quantize(ev, base + 2 * chunk, base + 3 * chunk, n)
        });
    };

    let mut cpu = Vec::new();
    prepare(&mut cpu, 0);
    cpu.push(TraceEvent::Fence);
    for i in 0..n_gemm_ops {
        let [_, _, gemm, unpack] = GemmLayout::kernel_ids(i);
        if i + 1 < n_gemm_ops {
            prepare(&mut cpu, i + 1);
        }
        kernel(&mut cpu, gemm, |ev| compute(ev, Agent::Cpu, lay.gemm_cycles()));
        let out = cpu_base + lay.cpu_stride * i as u64;
        kernel(&mut cpu, unpack, |ev| {
            for e in 0..n {
                ev.push(TraceEvent::Store {
                    vaddr: out + e * IN_ELEM as u64,
                    bytes: IN_ELEM,
                });
            }
            compute(ev, Agent::Cpu, n);
        });
        cpu.push(TraceEvent::Fence);
    }
    Trace {
        header: TraceHeader {
            vaddr_space_size: space_for(end),
            pim_regions: vec![Region {
                base: 0,
                bound: region_end,
            }],
            kernel_names,
        },
        cpu,
        pim: vec![],
    }
}

/// Single random cycle (Sattolo) over `n` nodes, starting at node 0.
/// Returns the visit order.
pub(crate) fn chase_order(n_nodes: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng(seed);
    let mut next: Vec<usize> = (0..n_nodes).collect();
    for i in (1..n_nodes).rev() {
        let j = rng.gen_range(0..i as u64) as usize;
        next.swap(i, j);
    }
    let mut order = Vec::with_capacity(n_nodes);
    let mut cur = 0;
    for _ in 0..n_nodes {
        order.push(cur);
        cur = next[cur];
    }
    order
}

/// Pointer chase over a random single-cycle linked list, one node per page,
/// as kernel 1 in the cpu stream. Every node lies in the one PIM region.
pub fn gen_pointer_chase_trace(n_nodes: usize, seed: u64) -> Trace {
    assert!(n_nodes >= 1, "need at least one node");
    let end = n_nodes as u64 * NODE_STRIDE;
    let mut cpu = Vec::new();
    kernel(&mut cpu, 1, |ev| {
        for node in chase_order(n_nodes, seed) {
            ev.push(TraceEvent::Load {
                vaddr: node as u64 * NODE_STRIDE,
                bytes: 8,
            });
            compute(ev, Agent::Cpu, 2);
        }
    });
    Trace {
        header: TraceHeader {
            vaddr_space_size: space_for(end),
            pim_regions: vec![Region { base: 0, bound: end }],
            kernel_names: names(&[(1, "chase")]),
        },
        cpu,
        pim: vec![],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedLayout {
    pub pim_lines: u64,
    pub private_base: VirtAddr,
    pub private_lines: u64,
}

impl SharedLayout {
    pub fn for_ops(n_ops: usize) -> Self {
        let pim_lines = (n_ops as u64 / 32).max(1);
        Self {
            pim_lines,
            private_base: align_up(pim_lines * LINE, PAGE),
            private_lines: 64,
        }
    }

    pub fn region(&self) -> Region {
        Region {
            base: 0,
            bound: self.private_base,
        }
    }

    /// Number of region lines the CPU writes for a sharing fraction.
    pub fn shared_count(&self, sharing_fraction: f64) -> usize {
        (sharing_fraction * self.pim_lines as f64).round() as usize
    }
}

/// Concurrent CPU stream and PIM kernels over a shared region.
///
/// `shared_count` region lines, sampled with the seed, are written by the
/// CPU at the start of its stream and re-read by it afterwards, between
/// accesses to its own small private set. The PIM stream is one kernel per
/// pass over the region; each pass visits every line once in a fresh random
/// order, loading it, and updates lines the CPU never touches.
pub fn gen_shared_trace(n_ops: usize, sharing_fraction: f64, seed: u64) -> Trace {
    assert!(
        (0.0..=1.0).contains(&sharing_fraction),
        "sharing fraction must lie in [0, 1]"
    );
    let lay = SharedLayout::for_ops(n_ops);
    let mut rng = rng(seed);

    let mut shared: Vec<u64> = rand::seq::index::sample(
        &mut rng,
        lay.pim_lines as usize,
        lay.shared_count(sharing_fraction),
    )
    .into_iter()
    .map(|l| l as u64)
    .collect();
    shared.sort_unstable();
    let is_shared = |l: u64| shared.binary_search(&l).is_ok();

    let mut pim = Vec::new();
    let mut kernel_names = BTreeMap::new();
    let mut order: Vec<u64> = (0..lay.pim_lines).collect();
    let mut done = 0;
    let mut id: KernelId = 1;
    while done < n_ops {
        order.shuffle(&mut rng);
        let len = order.len().min(n_ops - done);
        kernel_names.insert(id, "pim_update".to_string());
        kernel(&mut pim, id, |ev| {
            for &line in &order[..len] {
                compute(ev, Agent::Pim, 2);
                let vaddr = line * LINE + 8 * rng.gen_range(0..LINE / 8);
                if !is_shared(line) && rng.gen_bool(0.25) {
                    ev.push(TraceEvent::Store { vaddr, bytes: 8 });
                } else {
                    ev.push(TraceEvent::Load { vaddr, bytes: 8 });
                }
            }
        });
        done += len;
        id += 1;
    }

    let mut cpu = Vec::new();
    for &line in &shared {
        compute(&mut cpu, Agent::Cpu, 2);
        cpu.push(TraceEvent::Store {
            vaddr: line * LINE,
            bytes: 8,
        });
    }
    for step in shared.len()..n_ops {
        compute(&mut cpu, Agent::Cpu, 2);
        if step % 8 == 0 && !shared.is_empty() {
            let vaddr = shared[(step / 8) % shared.len()] * LINE;
            cpu.push(TraceEvent::Load { vaddr, bytes: 8 });
        } else {
            let vaddr = lay.private_base + rng.gen_range(0..lay.private_lines) * LINE;
            if rng.gen_bool(0.3) {
                cpu.push(TraceEvent::Store { vaddr, bytes: 8 });
            } else {
                cpu.push(TraceEvent::Load { vaddr, bytes: 8 });
            }
        }
    }

    let end = lay.private_base + lay.private_lines * LINE;
    Trace {
        header: TraceHeader {
            vaddr_space_size: space_for(end),
            pim_regions: vec![lay.region()],
            kernel_names,
        },
        cpu,
        pim,
    }
}

/// A generator invocation written as `name:key=value,...`, e.g.
/// `quantize:n=1000` or `shared:n=5000,share=0.05`.
#[derive(Debug, Clone, PartialEq)]
pub enum GenSpec {
    Quantize { n: usize },
    Pack { rows: usize, cols: usize, block: usize },
    Gemm { nops: usize, elems: usize },
    Chase { n: usize },
    Shared { n: usize, share: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("generator spec `{spec}`: {msg}")]
pub struct GenSpecError {
    pub spec: String,
    pub msg: String,
}

impl GenSpec {
    pub fn generate(&self, seed: u64) -> Trace {
        match *self {
            GenSpec::Quantize { n } => gen_quantize_trace(n, seed),
            GenSpec::Pack { rows, cols, block } => gen_pack_trace(rows, cols, block, seed),
            GenSpec::Gemm { nops, elems } => gen_gemm_pipeline_trace(nops, elems, seed),
            GenSpec::Chase { n } => gen_pointer_chase_trace(n, seed),
            GenSpec::Shared { n, share } => gen_shared_trace(n, share, seed),
        }
    }
}

impl std::str::FromStr for GenSpec {
    type Err = GenSpecError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let err = |msg: String| GenSpecError {
            spec: spec.to_string(),
            msg,
        };
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut params = BTreeMap::new();
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(format!("`{kv}` is not key=value")))?;
            params.insert(k.trim(), v.trim());
        }
        let allowed: &[&str] = match name {
            "quantize" | "chase" => &["n"],
            "pack" => &["rows", "cols", "block"],
            "gemm" => &["nops", "elems"],
            "shared" => &["n", "share"],
            _ => {
                return Err(err(format!(
                    "unknown generator `{name}` (quantize, pack, gemm, chase, shared)"
                )))
            }
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(k)) {
            return Err(err(format!("unknown parameter `{k}` for {name}")));
        }
        let int = |k: &str, default: usize| -> Result<usize, GenSpecError> {
            params.get(k).map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| err(format!("{k}: `{v}` is not a count")))
            })
        };
        let positive = |k: &str, v: usize| {
            if v == 0 {
                Err(err(format!("{k} must be >= 1")))
            } else {
                Ok(v)
            }
        };
        Ok(match name {
            "quantize" => GenSpec::Quantize { n: int("n", 1000)? },
            "chase" => GenSpec::Chase { n: int("n", 1000)? },
            "pack" => {
                let rows = positive("rows", int("rows", 64)?)?;
                GenSpec::Pack {
                    rows,
                    cols: positive("cols", int("cols", rows)?)?,
                    block: positive("block", int("block", DEFAULT_PACK_BLOCK)?)?,
                }
            }
            "gemm" => GenSpec::Gemm {
                nops: positive("nops", int("nops", 1)?)?,
                elems: positive("elems", int("elems", DEFAULT_GEMM_ELEMS)?)?,
            },
            _ => {
                let share = match params.get("share") {
                    None => 0.05,
                    Some(v) => v
                        .parse::<f64>()
                        .ok()
                        .filter(|s| (0.0..=1.0).contains(s))
                        .ok_or_else(|| err(format!("share: `{v}` is not in [0, 1]")))?,
                };
                GenSpec::Shared {
                    n: int("n", 5000)?,
                    share,
                }
            }
        })
    }
}
