use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::ledger::EnergyLedger;
use crate::trace::KernelId;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub coherence_messages: u64,
    pub rollbacks: u64,
    pub page_walk_accesses: u64,
    pub tlb_misses: u64,
    pub offchip_bytes: u64,
    pub dram_accesses: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub flushed_lines: u64,
    pub epochs_committed: u64,
    /// Kernels that hit the rollback limit and were rerun under region locks.
    pub cg_fallbacks: u64,
    pub lock_stall_cycles: u64,
    pub pei_host: u64,
    pub pei_memory: u64,
    /// CPU accesses to a line while a PEI on it was still in flight.
    pub pei_race_warnings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub mechanism: String,
    pub config_digest: String,
    pub seed: u64,
    pub total_cycles: u64,
    pub per_kernel_cycles: BTreeMap<KernelId, u64>,
    pub energy: EnergyLedger,
    pub counters: Counters,
    pub event_counts: BTreeMap<&'static str, u64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report always serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("mechanism".into(), self.mechanism.clone()),
            ("config_digest".into(), self.config_digest.clone()),
            ("seed".into(), self.seed.to_string()),
            ("total_cycles".into(), self.total_cycles.to_string()),
        ];
        let c = &self.counters;
        for (k, v) in [
            ("coherence_messages", c.coherence_messages),
            ("rollbacks", c.rollbacks),
            ("page_walk_accesses", c.page_walk_accesses),
            ("tlb_misses", c.tlb_misses),
            ("offchip_bytes", c.offchip_bytes),
            ("dram_accesses", c.dram_accesses),
            ("cache_hits", c.cache_hits),
            ("cache_misses", c.cache_misses),
            ("flushed_lines", c.flushed_lines),
            ("epochs_committed", c.epochs_committed),
            ("cg_fallbacks", c.cg_fallbacks),
            ("lock_stall_cycles", c.lock_stall_cycles),
            ("pei_host", c.pei_host),
            ("pei_memory", c.pei_memory),
            ("pei_race_warnings", c.pei_race_warnings),
        ] {
            rows.push((k.into(), v.to_string()));
        }
        rows.push(("energy_total".into(), format!("{:.1}", self.energy.total())));
        rows.push((
            "energy_data_movement".into(),
            format!("{:.1}", self.energy.data_movement_total()),
        ));
        rows.push((
            "data_movement_fraction".into(),
            format!("{:.4}", self.energy.data_movement_fraction()),
        ));
        for (id, cyc) in &self.per_kernel_cycles {
            rows.push((format!("kernel {id} cycles"), cyc.to_string()));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v:>20}");
        }
        out
    }
}
