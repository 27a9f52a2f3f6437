//! Trace-driven simulation of one CPU and the PIM logic of a memory stack.
//!
//! Timing is event-count based: every action has a fixed latency from the
//! machine config, both agents are in order, and each has at most one
//! outstanding memory access.
//!
//! An offloaded kernel is pulled out of the CPU stream and handed to the PIM
//! logic when the CPU reaches it. The CPU then runs on concurrently; a CPU
//! `Fence` waits until every offloaded kernel dispatched before it has
//! finished (and for in-flight PEIs). Between fences, the coherence
//! mechanism alone keeps shared data consistent. The PIM logic runs one job
//! at a time, preferring dispatched offloaded kernels over the kernels of
//! its own stream.

mod compare;
mod ledger;
mod report;
mod sim;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use compare::{
    compare_mechanisms, compare_to_csv, compare_to_text, sweep_gemm, sweep_to_csv, CompareRow,
    SweepRow,
};
pub use ledger::{account, EnergyLedger};
pub use report::{Counters, MetricsReport, REPORT_SCHEMA};
pub use sim::store_token;

use crate::coherence::{CondaError, Mechanism};
use crate::machine::{MachineConfig, Violation};
use crate::pei::PeiError;
use crate::trace::{Agent, Granularity, KernelId, Trace, TraceError, VirtAddr};
use crate::xlat::{PageTableMode, XlatError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid machine config ({} violations)", .0.len())]
    Config(Vec<Violation>),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("kernel {kernel}: translation fault at {vaddr:#x} (outside every PIM region)")]
    TranslationFault { kernel: String, vaddr: VirtAddr },
    #[error("kernel {kernel}: cannot translate {vaddr:#x}: {source}")]
    Translation {
        kernel: String,
        vaddr: VirtAddr,
        source: XlatError,
    },
    #[error("kernel {kernel}: granularity {granularity:?} cannot run on the PIM accelerator")]
    Unsupported {
        kernel: String,
        granularity: Option<Granularity>,
    },
    #[error("offload plan names kernel {0}, which does not begin in the cpu stream")]
    UnknownKernel(KernelId),
    #[error(transparent)]
    Pei(PeiError),
    #[error(transparent)]
    Conda(CondaError),
    #[error("both agents are blocked")]
    Deadlock,
}

/// What to simulate besides the machine and the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub mechanism: Mechanism,
    /// Kernels of the cpu stream to run on the PIM logic.
    pub offload: BTreeSet<KernelId>,
    pub xlat_mode: PageTableMode,
    /// Run both streams on the CPU, one after the other, with nothing
    /// offloaded. The mechanism is then irrelevant.
    pub cpu_only: bool,
    /// Recorded in the report; the engine itself draws no random numbers.
    pub seed: u64,
}

impl Plan {
    pub fn new(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            offload: BTreeSet::new(),
            xlat_mode: PageTableMode::RegionBased,
            cpu_only: false,
            seed: 0,
        }
    }

    pub fn cpu_only() -> Self {
        Self {
            cpu_only: true,
            ..Self::new(Mechanism::Fg)
        }
    }

    pub fn offloading(mut self, kernels: impl IntoIterator<Item = KernelId>) -> Self {
        self.offload.extend(kernels);
        self
    }

    pub fn with_xlat(mut self, mode: PageTableMode) -> Self {
        self.xlat_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-kernel share of a run. Kernels are attributed at the outermost
/// level of nesting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelStats {
    pub agent: Option<Agent>,
    pub cycles: u64,
    pub energy: EnergyLedger,
    /// Compute plus memory events.
    pub instructions: u64,
    /// Accesses that had to be served by DRAM.
    pub dram_misses: u64,
}

/// One line value returned to a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadObservation {
    /// Stream the load came from.
    pub origin: Agent,
    pub index: usize,
    pub vline: VirtAddr,
    pub value: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    pub kernels: BTreeMap<KernelId, KernelStats>,
    /// Coherent value of every touched line, keyed by virtual line address.
    pub final_memory: BTreeMap<VirtAddr, u64>,
    /// Loads that took effect. Loads of rolled-back epochs are dropped.
    pub observations: Vec<LoadObservation>,
}

pub fn simulate(
    config: &MachineConfig,
    trace: &Trace,
    plan: &Plan,
) -> Result<MetricsReport, SimError> {
    simulate_detailed(config, trace, plan).map(|o| o.report)
}

pub fn simulate_detailed(
    config: &MachineConfig,
    trace: &Trace,
    plan: &Plan,
) -> Result<SimOutcome, SimError> {
    sim::run(config, trace, plan)
}
