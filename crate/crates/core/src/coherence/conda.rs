//! Optimistic PIM execution with signature-based conflict resolution.
//!
//! During an epoch PIM accesses only touch the read/write signatures and a
//! private write buffer; nothing crosses the channel. At kernel end the
//! signatures are sent to the CPU (two messages, one reply), which checks
//! them against its precise dirty/read sets. On conflict the offending
//! dirty CPU lines are flushed and the PIM side discards its buffer and
//! re-executes; the CPU never rolls back.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{Access, CoherenceOutcome, CoherenceState, Decision, LineAddr, Memory, Signature};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochStatus {
    Optimistic,
    Resolving,
    Committed,
    RolledBack,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CondaError {
    #[error("cannot {op} an epoch in state {status:?}")]
    Misuse {
        op: &'static str,
        status: EpochStatus,
    },
}

#[derive(Debug, Clone)]
pub struct CondaEpoch {
    pub read_sig: Signature,
    pub write_sig: Signature,
    pub write_buffer: BTreeMap<LineAddr, u64>,
    pub status: EpochStatus,
    /// Rollbacks of this epoch so far.
    pub rollbacks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Committed { flushed: Vec<LineAddr> },
    Conflict { flushed: Vec<LineAddr> },
}

impl Resolution {
    pub fn is_conflict(&self) -> bool {
        matches!(self, Resolution::Conflict { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayDirective {
    /// Event index, relative to the epoch, to resume from.
    pub restart_at: usize,
    pub rollbacks: u32,
}

impl CondaEpoch {
    pub fn new(signature_bits: usize, signature_hashes: u32) -> Self {
        Self {
            read_sig: Signature::new(signature_bits, signature_hashes),
            write_sig: Signature::new(signature_bits, signature_hashes),
            write_buffer: BTreeMap::new(),
            status: EpochStatus::Optimistic,
            rollbacks: 0,
        }
    }

    /// Value a PIM read observes: its own buffered write, else memory.
    pub fn read_value(&self, line: LineAddr, memory: &Memory) -> u64 {
        self.write_buffer
            .get(&line)
            .copied()
            .unwrap_or_else(|| memory.read(line))
    }
}

/// Records one optimistic PIM access. No channel traffic.
pub fn conda_record(
    epoch: &mut CondaEpoch,
    line: LineAddr,
    kind: Access,
) -> Result<CoherenceOutcome, CondaError> {
    if epoch.status != EpochStatus::Optimistic {
        return Err(CondaError::Misuse {
            op: "record into",
            status: epoch.status,
        });
    }
    let mut out = CoherenceOutcome::default();
    match kind {
        Access::Read => epoch.read_sig.insert(line),
        Access::Write(v) => {
            epoch.write_sig.insert(line);
            epoch.write_buffer.insert(line, v);
            out.value = v;
        }
    }
    Ok(out)
}

/// CPU-side resolution at the end of an epoch.
///
/// Conflict iff some CPU-dirty line may be in either signature, or some
/// line the CPU read may be in the write signature. Membership uses the
/// signatures, so false positives only add conflicts. On conflict the
/// conflicting dirty lines still in the CPU cache are written back and
/// invalidated. On commit the write buffer drains to memory and stale CPU
/// copies of the written lines are invalidated.
pub fn conda_resolve(
    epoch: &mut CondaEpoch,
    state: &mut CoherenceState,
    cpu_dirty_lines: &BTreeSet<LineAddr>,
    cpu_read_lines: &BTreeSet<LineAddr>,
) -> Result<(Resolution, CoherenceOutcome), CondaError> {
    if epoch.status != EpochStatus::Optimistic {
        return Err(CondaError::Misuse {
            op: "resolve",
            status: epoch.status,
        });
    }
    epoch.status = EpochStatus::Resolving;
    let mut out = CoherenceOutcome {
        messages_on_channel: 3,
        ..Default::default()
    };

    let dirty_conflicts: Vec<LineAddr> = cpu_dirty_lines
        .iter()
        .copied()
        .filter(|&l| epoch.read_sig.maybe_contains(l) || epoch.write_sig.maybe_contains(l))
        .collect();
    let read_conflict = cpu_read_lines
        .iter()
        .any(|&l| epoch.write_sig.maybe_contains(l));

    if !dirty_conflicts.is_empty() || read_conflict {
        for line in dirty_conflicts {
            if let Some(l) = state.cache.get(line) {
                if l.state.is_dirty() {
                    state.memory.write(line, l.value);
                    out.dram_accesses += 1;
                    out.channel_transfers += 1;
                    out.flushed_lines.push(line);
                }
                state.cache.remove(line);
            }
        }
        out.decision = Decision::Conflict;
        epoch.status = EpochStatus::RolledBack;
        let flushed = out.flushed_lines.clone();
        return Ok((Resolution::Conflict { flushed }, out));
    }

    for (&line, &v) in &epoch.write_buffer {
        state.memory.write(line, v);
        state.cache.remove(line);
    }
    epoch.write_buffer.clear();
    epoch.status = EpochStatus::Committed;
    Ok((Resolution::Committed { flushed: vec![] }, out))
}

/// Discards the epoch's speculative state so the kernel can run again from
/// its first event.
pub fn conda_rollback_and_reexecute(
    epoch: &mut CondaEpoch,
) -> Result<ReplayDirective, CondaError> {
    if epoch.status != EpochStatus::RolledBack {
        return Err(CondaError::Misuse {
            op: "roll back",
            status: epoch.status,
        });
    }
    epoch.write_buffer.clear();
    epoch.read_sig.clear();
    epoch.write_sig.clear();
    epoch.status = EpochStatus::Optimistic;
    epoch.rollbacks += 1;
    Ok(ReplayDirective {
        restart_at: 0,
        rollbacks: epoch.rollbacks,
    })
}
