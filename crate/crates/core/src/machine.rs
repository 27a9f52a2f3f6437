//! Simulated machine: host CPU with one cache level, a 3D-stacked memory
//! split into vaults with replicated per-vault PIM logic, and the off-chip
//! channel between them.
//!
//! Every timing, energy and area parameter lives in [`MachineConfig`]; the
//! defaults are only a starting point and the whole struct can be loaded
//! from a TOML file (unknown keys are rejected).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::Granularity;

pub type PhysAddr = u64;
pub type VaultId = u32;

/// Energy accounting categories. Every simulated action is charged to
/// exactly one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CpuCompute,
    PimCompute,
    CacheAccess,
    DramAccess,
    ChannelTransfer,
    CoherenceMessage,
}

impl EventKind {
    pub const ALL: [EventKind; 6] = [
        EventKind::CpuCompute,
        EventKind::PimCompute,
        EventKind::CacheAccess,
        EventKind::DramAccess,
        EventKind::ChannelTransfer,
        EventKind::CoherenceMessage,
    ];

    /// Categories counted as data movement (as opposed to computation).
    pub fn is_data_movement(self) -> bool {
        matches!(
            self,
            EventKind::DramAccess | EventKind::ChannelTransfer | EventKind::CoherenceMessage
        )
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::CpuCompute => "cpu_compute",
            EventKind::PimCompute => "pim_compute",
            EventKind::CacheAccess => "cache_access",
            EventKind::DramAccess => "dram_access",
            EventKind::ChannelTransfer => "channel_transfer",
            EventKind::CoherenceMessage => "coherence_message",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Energy per event, in arbitrary energy units. Compute kinds are charged
/// per cycle, everything else per occurrence (one line moved, one message).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyTable {
    pub cpu_compute: f64,
    pub pim_compute: f64,
    pub cache_access: f64,
    pub dram_access: f64,
    pub channel_transfer: f64,
    pub coherence_message: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            cpu_compute: 1.0,
            pim_compute: 0.5,
            cache_access: 1.0,
            dram_access: 25.0,
            channel_transfer: 50.0,
            coherence_message: 10.0,
        }
    }
}

impl EnergyTable {
    pub fn get(&self, kind: EventKind) -> f64 {
        match kind {
            EventKind::CpuCompute => self.cpu_compute,
            EventKind::PimCompute => self.pim_compute,
            EventKind::CacheAccess => self.cache_access,
            EventKind::DramAccess => self.dram_access,
            EventKind::ChannelTransfer => self.channel_transfer,
            EventKind::CoherenceMessage => self.coherence_message,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PimCoreKind {
    /// Small in-order general-purpose core; runs any kernel.
    GeneralCore,
    /// Fixed-function unit; only runs kernels of the granularities it was
    /// built for, with a reduced compute-cycle cost.
    FixedAccelerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MachineConfig {
    pub num_vaults: u32,
    pub line_size: u64,
    pub cpu_cache_lines: usize,
    pub tlb_entries: usize,

    pub lat_cpu_cache_hit: u64,
    pub lat_dram_local_vault: u64,
    pub lat_dram_remote_vault: u64,
    pub lat_channel_round_trip: u64,
    /// Re-access of a line still held in one of the PIM line buffers.
    pub lat_pim_line_buffer: u64,
    /// Most recently fetched lines the PIM logic keeps for timing purposes.
    /// They hold no data of their own; 0 disables them.
    pub pim_line_buffers: usize,
    pub lat_fence: u64,
    pub lat_pcu_op: u64,

    pub energy: EnergyTable,

    /// Area available to PIM logic inside one vault, mm².
    pub vault_area_budget: f64,
    /// Area available in the whole logic layer, mm².
    pub logic_layer_area_budget: f64,
    pub pim_core_kind: PimCoreKind,
    /// Area of one replicated PIM logic instance, mm².
    pub pim_logic_area: f64,
    /// PIM cycles per CPU cycle for compute.
    pub pim_cycle_ratio: f64,
    /// Compute-cycle multiplier applied on a fixed-function accelerator.
    pub accel_compute_scale: f64,
    pub accel_granularities: Vec<Granularity>,

    pub signature_bits: usize,
    pub signature_hashes: u32,
    /// Consecutive rollbacks of one epoch before falling back to region locks.
    pub rollback_limit: u32,
    pub mapping_seed: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            num_vaults: 16,
            line_size: 64,
            cpu_cache_lines: 256,
            tlb_entries: 64,
            lat_cpu_cache_hit: 4,
            lat_dram_local_vault: 30,
            lat_dram_remote_vault: 60,
            lat_channel_round_trip: 100,
            lat_pim_line_buffer: 1,
            pim_line_buffers: 4,
            lat_fence: 2,
            lat_pcu_op: 2,
            energy: EnergyTable::default(),
            vault_area_budget: 3.5,
            logic_layer_area_budget: 55.0,
            pim_core_kind: PimCoreKind::GeneralCore,
            pim_logic_area: 0.25,
            pim_cycle_ratio: 1.0,
            accel_compute_scale: 0.5,
            accel_granularities: vec![Granularity::BulkOp, Granularity::Function],
            signature_bits: 2048,
            signature_hashes: 4,
            rollback_limit: 8,
            mapping_seed: 0x5eed,
        }
    }
}

/// Which group of invariants a violation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Topology,
    Area,
    Timing,
    Energy,
    Signature,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::Topology => "topology",
            ViolationKind::Area => "area",
            ViolationKind::Timing => "timing",
            ViolationKind::Energy => "energy",
            ViolationKind::Signature => "signature",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// Vault owning the cache line containing `paddr`; lines are interleaved
/// round-robin across vaults.
pub fn vault_of(paddr: PhysAddr, config: &MachineConfig) -> VaultId {
    ((paddr / config.line_size) % config.num_vaults as u64) as VaultId
}

/// Checks every invariant of `config`. Violations are returned as data.
pub fn validate_config(config: &MachineConfig) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |kind, message: String| out.push(Violation { kind, message });

    if config.num_vaults == 0 || !config.num_vaults.is_power_of_two() {
        push(
            ViolationKind::Topology,
            format!("num_vaults must be a power of two >= 1, got {}", config.num_vaults),
        );
    }
    if config.line_size == 0 || !config.line_size.is_power_of_two() {
        push(
            ViolationKind::Topology,
            format!("line_size must be a power of two, got {}", config.line_size),
        );
    } else if config.line_size < 8 {
        push(
            ViolationKind::Topology,
            format!("line_size must hold one 8-byte PEI operand, got {}", config.line_size),
        );
    }
    if config.cpu_cache_lines == 0 {
        push(ViolationKind::Topology, "cpu_cache_lines must be >= 1".into());
    }
    if config.tlb_entries == 0 {
        push(ViolationKind::Topology, "tlb_entries must be >= 1".into());
    }

    let area_ok = |x: f64| x.is_finite() && x > 0.0;
    if !area_ok(config.vault_area_budget) || !area_ok(config.logic_layer_area_budget) {
        push(ViolationKind::Area, "area budgets must be positive".into());
    } else if config.vault_area_budget > config.logic_layer_area_budget {
        push(
            ViolationKind::Area,
            format!(
                "vault_area_budget {} exceeds logic_layer_area_budget {}",
                config.vault_area_budget, config.logic_layer_area_budget
            ),
        );
    }
    if !(config.pim_logic_area.is_finite() && config.pim_logic_area >= 0.0) {
        push(ViolationKind::Area, "pim_logic_area must be >= 0".into());
    } else if config.pim_logic_area > config.vault_area_budget {
        push(
            ViolationKind::Area,
            format!(
                "pim_logic_area {} mm2 exceeds vault_area_budget {} mm2",
                config.pim_logic_area, config.vault_area_budget
            ),
        );
    }

    let lats = [
        ("lat_cpu_cache_hit", config.lat_cpu_cache_hit),
        ("lat_dram_local_vault", config.lat_dram_local_vault),
        ("lat_dram_remote_vault", config.lat_dram_remote_vault),
        ("lat_channel_round_trip", config.lat_channel_round_trip),
        ("lat_pim_line_buffer", config.lat_pim_line_buffer),
        ("lat_fence", config.lat_fence),
        ("lat_pcu_op", config.lat_pcu_op),
    ];
    for (name, v) in lats {
        if v < 1 {
            push(ViolationKind::Timing, format!("{name} must be >= 1 cycle"));
        }
    }
    for (name, v) in [
        ("pim_cycle_ratio", config.pim_cycle_ratio),
        ("accel_compute_scale", config.accel_compute_scale),
    ] {
        if !(v.is_finite() && v > 0.0) {
            push(ViolationKind::Timing, format!("{name} must be positive"));
        }
    }

    for kind in EventKind::ALL {
        let e = config.energy.get(kind);
        if !(e.is_finite() && e >= 0.0) {
            push(ViolationKind::Energy, format!("energy.{kind} must be >= 0"));
        }
    }

    if config.signature_bits == 0 || config.signature_hashes == 0 {
        push(
            ViolationKind::Signature,
            "signature_bits and signature_hashes must be >= 1".into(),
        );
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

impl MachineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let config: MachineConfig = toml::from_str(s)?;
        validate_config(&config).map_err(ConfigError::Invalid)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// SHA-256 over the canonical TOML rendering, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr & !(self.line_size - 1)
    }
}
