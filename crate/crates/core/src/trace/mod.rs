//! Workload traces: a header (address space, PIM regions, kernel names) and
//! one ordered event stream per agent.

mod format;
mod gen;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{parse_trace, parse_trace_str, write_trace, write_trace_string};
pub use gen::{
    gen_gemm_pipeline_trace, gen_pack_trace, gen_pointer_chase_trace, gen_quantize_trace,
    gen_shared_trace, pack_output_index, GemmLayout, GenSpec, GenSpecError, SharedLayout,
    DEFAULT_GEMM_ELEMS, DEFAULT_PACK_BLOCK, NODE_STRIDE,
};

pub type VirtAddr = u64;
pub type KernelId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Cpu,
    Pim,
}

impl Agent {
    pub fn id(self) -> u32 {
        match self {
            Agent::Cpu => 0,
            Agent::Pim => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Cpu => "cpu",
            Agent::Pim => "pim",
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Offloading granularity of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Instruction,
    BulkOp,
    Function,
    Application,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Instruction => "instruction",
            Granularity::BulkOp => "bulk_op",
            Granularity::Function => "function",
            Granularity::Application => "application",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "instruction" => Granularity::Instruction,
            "bulk_op" => Granularity::BulkOp,
            "function" => Granularity::Function,
            "application" => Granularity::Application,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeiOpcode {
    Add,
    Min,
    Max,
}

impl PeiOpcode {
    pub fn as_str(self) -> &'static str {
        match self {
            PeiOpcode::Add => "add",
            PeiOpcode::Min => "min",
            PeiOpcode::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "add" => PeiOpcode::Add,
            "min" => PeiOpcode::Min,
            "max" => PeiOpcode::Max,
            _ => return None,
        })
    }

    pub fn apply(self, old: i64, operand: i64) -> i64 {
        match self {
            PeiOpcode::Add => old.wrapping_add(operand),
            PeiOpcode::Min => old.min(operand),
            PeiOpcode::Max => old.max(operand),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceEvent {
    Compute { site: Agent, cycles: u64 },
    Load { vaddr: VirtAddr, bytes: u32 },
    Store { vaddr: VirtAddr, bytes: u32 },
    KernelBegin { kernel_id: KernelId, granularity: Granularity },
    KernelEnd { kernel_id: KernelId },
    Pei { opcode: PeiOpcode, vaddr: VirtAddr, operand: i64 },
    Fence,
}

impl TraceEvent {
    pub fn is_memory(&self) -> bool {
        matches!(
            self,
            TraceEvent::Load { .. } | TraceEvent::Store { .. } | TraceEvent::Pei { .. }
        )
    }

    /// Byte range touched, if any.
    pub fn footprint(&self) -> Option<(VirtAddr, u64)> {
        match *self {
            TraceEvent::Load { vaddr, bytes } | TraceEvent::Store { vaddr, bytes } => {
                Some((vaddr, bytes as u64))
            }
            TraceEvent::Pei { vaddr, .. } => Some((vaddr, 8)),
            _ => None,
        }
    }
}

/// Half-open virtual range `[base, bound)` that PIM logic may operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub base: VirtAddr,
    pub bound: VirtAddr,
}

impl Region {
    pub fn contains(&self, vaddr: VirtAddr) -> bool {
        vaddr >= self.base && vaddr < self.bound
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceHeader {
    pub vaddr_space_size: u64,
    pub pim_regions: Vec<Region>,
    /// Function name per kernel id, used by the analyzer.
    pub kernel_names: BTreeMap<KernelId, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub header: TraceHeader,
    pub cpu: Vec<TraceEvent>,
    pub pim: Vec<TraceEvent>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("{agent} event {index}: address {vaddr:#x}+{bytes} outside declared space {space:#x}")]
    OutOfSpace {
        agent: Agent,
        index: usize,
        vaddr: VirtAddr,
        bytes: u64,
        space: u64,
    },
    #[error("{agent} event {index}: {msg}")]
    Nesting { agent: Agent, index: usize, msg: String },
    #[error("{agent} event {index}: access of zero bytes")]
    EmptyAccess { agent: Agent, index: usize },
    #[error("bad region [{base:#x}, {bound:#x}): {msg}")]
    Region { base: VirtAddr, bound: VirtAddr, msg: String },
    #[error("reading trace: {0}")]
    Io(String),
}

impl Trace {
    pub fn stream(&self, agent: Agent) -> &[TraceEvent] {
        match agent {
            Agent::Cpu => &self.cpu,
            Agent::Pim => &self.pim,
        }
    }

    pub fn region_of(&self, vaddr: VirtAddr) -> Option<usize> {
        self.header.pim_regions.iter().position(|r| r.contains(vaddr))
    }

    /// Checks the structural invariants: bounded addresses, non-empty
    /// accesses, non-overlapping regions and balanced kernel markers.
    pub fn validate(&self) -> Result<(), TraceError> {
        let space = self.header.vaddr_space_size;
        let mut regions = self.header.pim_regions.clone();
        regions.sort_by_key(|r| r.base);
        for r in &regions {
            if r.base >= r.bound {
                return Err(TraceError::Region {
                    base: r.base,
                    bound: r.bound,
                    msg: "base must be below bound".into(),
                });
            }
            if r.bound > space {
                return Err(TraceError::Region {
                    base: r.base,
                    bound: r.bound,
                    msg: "region exceeds address space".into(),
                });
            }
        }
        for w in regions.windows(2) {
            if w[1].base < w[0].bound {
                return Err(TraceError::Region {
                    base: w[1].base,
                    bound: w[1].bound,
                    msg: "overlaps another region".into(),
                });
            }
        }
        for agent in [Agent::Cpu, Agent::Pim] {
            let mut stack: Vec<KernelId> = Vec::new();
            for (index, ev) in self.stream(agent).iter().enumerate() {
                check_event(agent, index, ev, space, &mut stack)?;
            }
            if let Some(open) = stack.last() {
                return Err(TraceError::Nesting {
                    agent,
                    index: self.stream(agent).len(),
                    msg: format!("kernel {open} never ends"),
                });
            }
        }
        Ok(())
    }

    pub fn count(&self, pred: impl Fn(&TraceEvent) -> bool) -> usize {
        self.cpu.iter().chain(&self.pim).filter(|e| pred(e)).count()
    }

    pub fn loads(&self) -> usize {
        self.count(|e| matches!(e, TraceEvent::Load { .. }))
    }

    pub fn stores(&self) -> usize {
        self.count(|e| matches!(e, TraceEvent::Store { .. }))
    }

    /// Kernel ids in order of first appearance (cpu stream first).
    pub fn kernel_ids(&self) -> Vec<KernelId> {
        let mut seen = Vec::new();
        for ev in self.cpu.iter().chain(&self.pim) {
            if let TraceEvent::KernelBegin { kernel_id, .. } = ev {
                if !seen.contains(kernel_id) {
                    seen.push(*kernel_id);
                }
            }
        }
        seen
    }

    /// Ids of kernels whose function name is one of `names`.
    pub fn kernels_named(&self, names: &[&str]) -> Vec<KernelId> {
        self.header
            .kernel_names
            .iter()
            .filter(|(_, n)| names.contains(&n.as_str()))
            .map(|(id, _)| *id)
            .collect()
    }
}

pub(crate) fn check_event(
    agent: Agent,
    index: usize,
    ev: &TraceEvent,
    space: u64,
    stack: &mut Vec<KernelId>,
) -> Result<(), TraceError> {
    match *ev {
        TraceEvent::KernelBegin { kernel_id, .. } => stack.push(kernel_id),
        TraceEvent::KernelEnd { kernel_id } => match stack.pop() {
            Some(open) if open == kernel_id => {}
            Some(open) => {
                return Err(TraceError::Nesting {
                    agent,
                    index,
                    msg: format!("end of kernel {kernel_id} while kernel {open} is open"),
                })
            }
            None => {
                return Err(TraceError::Nesting {
                    agent,
                    index,
                    msg: format!("end of kernel {kernel_id} before its begin"),
                })
            }
        },
        TraceEvent::Load { bytes: 0, .. } | TraceEvent::Store { bytes: 0, .. } => {
            return Err(TraceError::EmptyAccess { agent, index })
        }
        _ => {}
    }
    if let Some((vaddr, bytes)) = ev.footprint() {
        if vaddr.checked_add(bytes).is_none_or(|end| end > space) {
            return Err(TraceError::OutOfSpace {
                agent,
                index,
                vaddr,
                bytes,
                space,
            });
        }
    }
    Ok(())
}
