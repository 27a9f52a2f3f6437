//! CPU/PIM coherence mechanisms.
//!
//! The CPU has one private cache whose lines follow MESI. PIM logic has no
//! cache, so each mechanism only differs in what it does when the two
//! agents touch the same line:
//!
//! * `fg`: per-line MESI; a PIM access to a CPU-cached line costs a channel
//!   message (and a writeback if the line is dirty).
//! * `cg`: PIM locks whole regions; acquiring flushes the CPU's copies and
//!   the CPU stalls on locked regions until release.
//! * `nc`: PIM regions are never cached by the CPU.
//! * `conda`: PIM runs optimistically, recording its accesses in
//!   signatures; the CPU resolves conflicts at kernel end and the PIM side
//!   rolls back on conflict.
//! * `ideal`: `fg` semantics at zero coherence cost.
//!
//! All functions operate on physical line addresses and carry data values
//! so that final memory state can be checked against interleaving oracles.

mod cache;
mod conda;
mod protocols;
mod signature;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::{CacheLine, CpuCache};
pub use conda::{
    conda_record, conda_resolve, conda_rollback_and_reexecute, CondaEpoch, CondaError,
    EpochStatus, ReplayDirective, Resolution,
};
pub use protocols::{
    cg_acquire, cg_check, cg_release, cpu_cached_access, fg_access, ideal_access, nc_access,
    CgLocks,
};
pub use signature::Signature;

use crate::trace::Agent;

pub type LineAddr = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Fg,
    Cg,
    Nc,
    Conda,
    Ideal,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Fg,
        Mechanism::Cg,
        Mechanism::Nc,
        Mechanism::Conda,
        Mechanism::Ideal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Fg => "fg",
            Mechanism::Cg => "cg",
            Mechanism::Nc => "nc",
            Mechanism::Conda => "conda",
            Mechanism::Ideal => "ideal",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mechanism {s:?} (expected fg|cg|nc|conda|ideal)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineState {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

impl LineState {
    pub fn is_dirty(self) -> bool {
        self == LineState::Modified
    }

    pub fn is_valid(self) -> bool {
        self != LineState::Invalid
    }
}

/// A memory operation on one line. Writes carry the value they store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write(u64),
}

impl Access {
    pub fn is_write(self) -> bool {
        matches!(self, Access::Write(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    #[default]
    Proceed,
    Stall,
    Conflict,
}

/// Side effects of one coherence action, in a form every mechanism shares.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoherenceOutcome {
    pub messages_on_channel: u64,
    pub dram_accesses: u64,
    /// Cache lines moved across the off-chip channel.
    pub channel_transfers: u64,
    pub flushed_lines: Vec<LineAddr>,
    pub decision: Decision,
    pub cache_hit: bool,
    /// Value read, or value written.
    pub value: u64,
}

/// Backing DRAM contents at line granularity; unwritten lines read as 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    lines: HashMap<LineAddr, u64>,
}

impl Memory {
    pub fn read(&self, line: LineAddr) -> u64 {
        self.lines.get(&line).copied().unwrap_or(0)
    }

    pub fn write(&mut self, line: LineAddr, value: u64) {
        self.lines.insert(line, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (LineAddr, u64)> + '_ {
        self.lines.iter().map(|(k, v)| (*k, *v))
    }
}

/// CPU cache plus DRAM: everything a coherence action may touch.
#[derive(Debug, Clone)]
pub struct CoherenceState {
    pub cache: CpuCache,
    pub memory: Memory,
}

impl CoherenceState {
    pub fn new(cache_lines: usize) -> Self {
        Self {
            cache: CpuCache::new(cache_lines),
            memory: Memory::default(),
        }
    }

    /// The value a sequentially consistent observer would see for `line`.
    pub fn coherent_value(&self, line: LineAddr) -> u64 {
        match self.cache.get(line) {
            Some(l) => l.value,
            None => self.memory.read(line),
        }
    }

    /// Lines held with write permission, per agent. PIM never caches, so
    /// the only candidate holder is the CPU.
    pub fn writers(&self, line: LineAddr) -> Vec<Agent> {
        match self.cache.get(line) {
            Some(l) if matches!(l.state, LineState::Modified | LineState::Exclusive) => {
                vec![Agent::Cpu]
            }
            _ => vec![],
        }
    }
}
