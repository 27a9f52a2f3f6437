//! Shared helpers for the integration tests: a random small-trace builder
//! and a brute-force search for a legal interleaving that explains a
//! simulation outcome.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pimsim::coherence::Mechanism;
use pimsim::engine::{simulate_detailed, store_token, Plan, SimOutcome};
use pimsim::machine::MachineConfig;
use pimsim::trace::{
    Agent, Granularity, KernelId, PeiOpcode, Region, Trace, TraceEvent, TraceHeader,
};

pub mod analyzer;
pub mod cli;
pub mod conda;
pub mod pei;

pub const LINE: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Load,
    Store(u64),
    Pei(PeiOpcode, i64),
}

#[derive(Debug, Clone, Copy)]
struct Op {
    origin: Agent,
    index: usize,
    vline: u64,
    kind: OpKind,
}

/// Ops that take effect together, once every `(thread, blocks)` dependency
/// has been met.
#[derive(Debug, Clone, Default)]
struct Block {
    ops: Vec<Op>,
    deps: Vec<(usize, usize)>,
}

const CPU: usize = 0;
const OFFLOAD: usize = 1;
const STREAM: usize = 2;

fn op_of(origin: Agent, index: usize, ev: &TraceEvent) -> Option<Op> {
    let (vaddr, kind) = match *ev {
        TraceEvent::Load { vaddr, .. } => (vaddr, OpKind::Load),
        TraceEvent::Store { vaddr, .. } => (vaddr, OpKind::Store(store_token(origin, index))),
        TraceEvent::Pei {
            opcode,
            vaddr,
            operand,
        } => (vaddr, OpKind::Pei(opcode, operand)),
        _ => return None,
    };
    Some(Op {
        origin,
        index,
        vline: vaddr / LINE * LINE,
        kind,
    })
}

/// Splits a trace into three threads of blocks: the CPU, offloaded kernels
/// and the PIM stream. With `atomic_pim` every PIM job is one block;
/// otherwise each op is. Single-line, non-nested kernels only.
fn threads(trace: &Trace, offload: &BTreeSet<KernelId>, atomic_pim: bool) -> [Vec<Block>; 3] {
    let mut cpu: Vec<Block> = Vec::new();
    let mut off: Vec<Block> = Vec::new();
    let mut in_offload = false;
    let mut dispatched_ops = 0;
    let mut pending_deps = Vec::new();
    for (i, ev) in trace.cpu.iter().enumerate() {
        match *ev {
            TraceEvent::KernelBegin { kernel_id, .. } if offload.contains(&kernel_id) => {
                in_offload = true;
                if atomic_pim {
                    off.push(Block {
                        ops: vec![],
                        deps: vec![(CPU, cpu.len())],
                    });
                }
            }
            TraceEvent::KernelEnd { .. } if in_offload => {
                in_offload = false;
                dispatched_ops = off.len();
            }
            TraceEvent::Fence => pending_deps.push((OFFLOAD, dispatched_ops)),
            _ => {
                if let Some(op) = op_of(Agent::Cpu, i, ev) {
                    if in_offload {
                        if atomic_pim {
                            off.last_mut().expect("kernel open").ops.push(op);
                        } else {
                            off.push(Block {
                                ops: vec![op],
                                deps: vec![(CPU, cpu.len())],
                            });
                        }
                    } else {
                        cpu.push(Block {
                            ops: vec![op],
                            deps: std::mem::take(&mut pending_deps),
                        });
                    }
                }
            }
        }
    }

    let mut stream: Vec<Block> = Vec::new();
    for (i, ev) in trace.pim.iter().enumerate() {
        match *ev {
            TraceEvent::KernelBegin { .. } => {
                if atomic_pim {
                    stream.push(Block::default());
                }
            }
            TraceEvent::KernelEnd { .. } => {
                if atomic_pim {
                    // a following stray event starts a new anonymous job
                    stream.push(Block::default());
                }
            }
            _ => {
                if let Some(op) = op_of(Agent::Pim, i, ev) {
                    if atomic_pim {
                        if stream.is_empty() {
                            stream.push(Block::default());
                        }
                        stream.last_mut().expect("block").ops.push(op);
                    } else {
                        stream.push(Block {
                            ops: vec![op],
                            deps: vec![],
                        });
                    }
                }
            }
        }
    }
    stream.retain(|b| !b.ops.is_empty());
    [cpu, off, stream]
}

struct Search<'a> {
    threads: [Vec<Block>; 3],
    observed: HashMap<(Agent, usize, u64), u64>,
    final_memory: &'a BTreeMap<u64, u64>,
}

impl Search<'_> {
    fn dfs(&self, pos: [usize; 3], mem: &mut HashMap<u64, u64>) -> bool {
        if (0..3).all(|t| pos[t] == self.threads[t].len()) {
            return self
                .final_memory
                .iter()
                .all(|(l, v)| mem.get(l).copied().unwrap_or(0) == *v);
        }
        for t in 0..3 {
            let Some(block) = self.threads[t].get(pos[t]) else {
                continue;
            };
            if block.deps.iter().any(|&(d, n)| pos[d] < n) {
                continue;
            }
            let saved: Vec<(u64, Option<u64>)> =
                block.ops.iter().map(|o| (o.vline, mem.get(&o.vline).copied())).collect();
            let mut ok = true;
            for op in &block.ops {
                let cur = mem.get(&op.vline).copied().unwrap_or(0);
                match op.kind {
                    OpKind::Load => {
                        if let Some(&seen) = self.observed.get(&(op.origin, op.index, op.vline)) {
                            if seen != cur {
                                ok = false;
                                break;
                            }
                        }
                    }
                    OpKind::Store(v) => {
                        mem.insert(op.vline, v);
                    }
                    OpKind::Pei(opcode, operand) => {
                        mem.insert(op.vline, opcode.apply(cur as i64, operand) as u64);
                    }
                }
            }
            if ok {
                let mut next = pos;
                next[t] += 1;
                if self.dfs(next, mem) {
                    return true;
                }
            }
            for (l, v) in saved.into_iter().rev() {
                match v {
                    Some(v) => mem.insert(l, v),
                    None => mem.remove(&l),
                };
            }
        }
        false
    }
}

/// Whether some interleaving of the trace that respects program order,
/// offload dispatch and fences (and, when `atomic_pim`, runs every PIM job
/// without interruption) explains every observed load value and the final
/// memory of `outcome`.
pub fn explained_by_interleaving(
    trace: &Trace,
    offload: &BTreeSet<KernelId>,
    atomic_pim: bool,
    outcome: &SimOutcome,
) -> bool {
    let observed = outcome
        .observations
        .iter()
        .map(|o| ((o.origin, o.index, o.vline), o.value))
        .collect();
    let search = Search {
        threads: threads(trace, offload, atomic_pim),
        observed,
        final_memory: &outcome.final_memory,
    };
    search.dfs([0; 3], &mut HashMap::new())
}

/// Whether a mechanism's PIM jobs are atomic with respect to the CPU.
pub fn atomic_jobs(m: Option<Mechanism>) -> bool {
    matches!(m, Some(Mechanism::Conda))
}

/// A header whose whole `space` is one PIM region.
pub fn single_region_header(space: u64) -> TraceHeader {
    TraceHeader {
        vaddr_space_size: space,
        pim_regions: vec![Region {
            base: 0,
            bound: space,
        }],
        kernel_names: BTreeMap::new(),
    }
}

pub struct SmallCase {
    pub trace: Trace,
    pub offload: BTreeSet<KernelId>,
}

fn random_access(rng: &mut impl Rng, lines: u64, allow_pei: bool) -> TraceEvent {
    let vaddr = rng.gen_range(0..lines) * LINE + 8 * rng.gen_range(0..8);
    match rng.gen_range(0..10) {
        0..=4 => TraceEvent::Load { vaddr, bytes: 8 },
        5..=8 => TraceEvent::Store { vaddr, bytes: 8 },
        _ if allow_pei => TraceEvent::Pei {
            opcode: PeiOpcode::Add,
            vaddr,
            operand: rng.gen_range(1..100),
        },
        _ => TraceEvent::Store { vaddr, bytes: 8 },
    }
}

fn push_delay(rng: &mut impl Rng, ev: &mut Vec<TraceEvent>, site: Agent) {
    if rng.gen_bool(0.6) {
        ev.push(TraceEvent::Compute {
            site,
            cycles: rng.gen_range(1..250),
        });
    }
}

/// A CPU stream and a PIM stream with at most 12 accesses over at most 4
/// lines of one PIM region. The CPU stream may hold one kernel to offload,
/// optionally followed by a fence; the PIM stream holds up to two kernels
/// and stray accesses.
pub fn random_small_case(rng: &mut impl Rng) -> SmallCase {
    let lines = rng.gen_range(1..=4);
    let total = rng.gen_range(1..=12usize);
    let n_cpu = rng.gen_range(0..=total);
    let n_pim = total - n_cpu;

    let mut cpu = Vec::new();
    let mut offload = BTreeSet::new();
    let kernel_at = if n_cpu >= 1 && rng.gen_bool(0.4) {
        let start = rng.gen_range(0..n_cpu);
        Some((start, rng.gen_range(start + 1..=n_cpu)))
    } else {
        None
    };
    for i in 0..n_cpu {
        if kernel_at.is_some_and(|(s, _)| s == i) {
            cpu.push(TraceEvent::KernelBegin {
                kernel_id: 1,
                granularity: Granularity::Function,
            });
            offload.insert(1);
        }
        push_delay(rng, &mut cpu, Agent::Cpu);
        cpu.push(random_access(rng, lines, true));
        if kernel_at.is_some_and(|(_, e)| e == i + 1) {
            cpu.push(TraceEvent::KernelEnd { kernel_id: 1 });
            if rng.gen_bool(0.5) {
                cpu.push(TraceEvent::Fence);
            }
        }
    }

    let mut pim = Vec::new();
    let mut next_kernel: KernelId = 10;
    let mut i = 0;
    while i < n_pim {
        if rng.gen_bool(0.6) {
            let len = rng.gen_range(1..=n_pim - i);
            pim.push(TraceEvent::KernelBegin {
                kernel_id: next_kernel,
                granularity: Granularity::Function,
            });
            for _ in 0..len {
                push_delay(rng, &mut pim, Agent::Pim);
                pim.push(random_access(rng, lines, true));
            }
            pim.push(TraceEvent::KernelEnd {
                kernel_id: next_kernel,
            });
            next_kernel += 1;
            i += len;
        } else {
            push_delay(rng, &mut pim, Agent::Pim);
            pim.push(random_access(rng, lines, true));
            i += 1;
        }
    }

    SmallCase {
        trace: Trace {
            header: single_region_header(4096),
            cpu,
            pim,
        },
        offload,
    }
}

fn small_config(rng: &mut impl Rng) -> MachineConfig {
    MachineConfig {
        cpu_cache_lines: [1, 2, 256][rng.gen_range(0..3)],
        lat_channel_round_trip: rng.gen_range(1..200),
        lat_dram_local_vault: rng.gen_range(1..60),
        rollback_limit: rng.gen_range(1..4),
        ..MachineConfig::default()
    }
}

/// Builds the small case for `seed` and checks cpu-only and every mechanism
/// against the interleaving oracle.
pub fn check_small_seed(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = random_small_case(&mut rng);
    let cfg = small_config(&mut rng);
    let mut plans = vec![(None, Plan::cpu_only())];
    for m in Mechanism::ALL {
        plans.push((Some(m), Plan::new(m).offloading(case.offload.iter().copied())));
    }
    for (m, plan) in plans {
        let out = simulate_detailed(&cfg, &case.trace, &plan)
            .map_err(|e| format!("seed {seed} {m:?}: {e}"))?;
        if !explained_by_interleaving(&case.trace, &case.offload, atomic_jobs(m), &out) {
            return Err(format!(
                "seed {seed} {m:?}: no legal interleaving explains the outcome\n{:#?}\n{:?}",
                case.trace, out.final_memory
            ));
        }
    }
    Ok(())
}
