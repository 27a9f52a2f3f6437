//! PIM-enabled instructions.
//!
//! A PEI is one read-modify-write on at most one cache line. The PMU sends
//! it to the PCU next to the host core when the line is already in the CPU
//! cache, otherwise to the PCU of the vault that owns the line. PEIs to the
//! same line are serialized in issue order; a fence makes the issuing core
//! wait for all of its PEIs.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::coherence::{CoherenceState, LineAddr, LineState};
use crate::machine::{vault_of, MachineConfig, PhysAddr, VaultId};
use crate::trace::{PeiOpcode, VirtAddr};

/// Bytes touched by one PEI.
pub const PEI_OPERAND_BYTES: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PeiError {
    #[error("PEI at {vaddr:#x} spans two {line_size}-byte cache lines")]
    CrossesLine { vaddr: VirtAddr, line_size: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeiOp {
    opcode: PeiOpcode,
    vaddr: VirtAddr,
    operand: i64,
    issuing_core: u32,
}

impl PeiOp {
    pub fn new(
        opcode: PeiOpcode,
        vaddr: VirtAddr,
        operand: i64,
        issuing_core: u32,
        line_size: u64,
    ) -> Result<Self, PeiError> {
        let last = vaddr.saturating_add(PEI_OPERAND_BYTES - 1);
        if vaddr / line_size != last / line_size {
            return Err(PeiError::CrossesLine { vaddr, line_size });
        }
        Ok(Self {
            opcode,
            vaddr,
            operand,
            issuing_core,
        })
    }

    pub fn opcode(&self) -> PeiOpcode {
        self.opcode
    }

    pub fn vaddr(&self) -> VirtAddr {
        self.vaddr
    }

    pub fn operand(&self) -> i64 {
        self.operand
    }

    pub fn issuing_core(&self) -> u32 {
        self.issuing_core
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionSite {
    HostPcu(u32),
    MemoryPcu(VaultId),
}

/// Picks the PCU for `op`, whose target translates to `paddr`.
pub fn pmu_dispatch(
    op: &PeiOp,
    paddr: PhysAddr,
    state: &CoherenceState,
    cfg: &MachineConfig,
) -> ExecutionSite {
    if state.cache.contains(cfg.line_of(paddr)) {
        ExecutionSite::HostPcu(op.issuing_core)
    } else {
        ExecutionSite::MemoryPcu(vault_of(paddr, cfg))
    }
}

/// Applies `op` to `line` and returns the old value.
///
/// On a host PCU the cached copy is updated and marked Modified. On a
/// memory PCU any CPU copy is written back and dropped first, so DRAM holds
/// the only copy while the operation runs.
pub fn pcu_execute(
    op: &PeiOp,
    site: ExecutionSite,
    line: LineAddr,
    state: &mut CoherenceState,
) -> i64 {
    match site {
        ExecutionSite::HostPcu(_) => {
            let Some(cached) = state.cache.get(line) else {
                return pcu_execute(op, ExecutionSite::MemoryPcu(0), line, state);
            };
            let old = cached.value as i64;
            let new = op.opcode.apply(old, op.operand);
            state.cache.update(line, LineState::Modified, new as u64);
            state.cache.touch(line);
            old
        }
        ExecutionSite::MemoryPcu(_) => {
            if let Some(cached) = state.cache.remove(line) {
                if cached.state.is_dirty() {
                    state.memory.write(line, cached.value);
                }
            }
            let old = state.memory.read(line) as i64;
            state.memory.write(line, op.opcode.apply(old, op.operand) as u64);
            old
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    core: u32,
    completes_at: u64,
}

/// PEIs issued but not yet complete, queued FIFO per line.
#[derive(Debug, Clone, Default)]
pub struct PmuState {
    inflight: BTreeMap<LineAddr, VecDeque<InFlight>>,
}

impl PmuState {
    /// Queues a PEI on `line` issued at `now` that needs `latency` cycles.
    /// It cannot start before the previous PEI on the line has finished, so
    /// its completion is at least `occupancy` after that one's.
    pub fn enqueue(
        &mut self,
        line: LineAddr,
        core: u32,
        now: u64,
        latency: u64,
        occupancy: u64,
    ) -> u64 {
        self.retire(now);
        let q = self.inflight.entry(line).or_default();
        let after_prev = q.back().map_or(0, |p| p.completes_at + occupancy);
        let completes_at = (now + latency).max(after_prev);
        q.push_back(InFlight { core, completes_at });
        completes_at
    }

    /// Drops every PEI complete by `now`.
    pub fn retire(&mut self, now: u64) {
        self.inflight.retain(|_, q| {
            while q.front().is_some_and(|p| p.completes_at <= now) {
                q.pop_front();
            }
            !q.is_empty()
        });
    }

    pub fn in_flight_on(&self, line: LineAddr, now: u64) -> bool {
        self.inflight
            .get(&line)
            .is_some_and(|q| q.iter().any(|p| p.completes_at > now))
    }

    pub fn pending(&self) -> usize {
        self.inflight.values().map(VecDeque::len).sum()
    }

    /// Time at which all of `core`'s PEIs have completed; `now` if none
    /// are outstanding. The caller adds the fixed fence cost.
    pub fn fence(&mut self, core: u32, now: u64) -> u64 {
        let done = self
            .inflight
            .values()
            .flat_map(|q| q.iter())
            .filter(|p| p.core == core)
            .map(|p| p.completes_at)
            .max()
            .unwrap_or(now)
            .max(now);
        self.retire(done);
        done
    }
}
