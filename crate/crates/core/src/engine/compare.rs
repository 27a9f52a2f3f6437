use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use super::{simulate, MetricsReport, Plan, SimError};
use crate::coherence::Mechanism;
use crate::machine::MachineConfig;
use crate::par::Exec;
use crate::trace::{gen_gemm_pipeline_trace, KernelId, Trace};
use crate::xlat::PageTableMode;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    /// cpu-only cycles over this row's cycles.
    pub speedup: f64,
    pub report: MetricsReport,
}

fn speedup(base: u64, cycles: u64) -> f64 {
    if cycles == 0 {
        1.0
    } else {
        base as f64 / cycles as f64
    }
}

/// Runs the trace once on the CPU alone and once per mechanism, in the
/// order cpu-only, fg, cg, nc, conda, ideal.
pub fn compare_mechanisms(
    config: &MachineConfig,
    trace: &Trace,
    offload: &BTreeSet<KernelId>,
    xlat_mode: PageTableMode,
    seed: u64,
    exec: Exec,
) -> Result<Vec<CompareRow>, SimError> {
    let mut plans = vec![Plan::cpu_only().with_seed(seed)];
    for m in Mechanism::ALL {
        plans.push(
            Plan::new(m)
                .offloading(offload.iter().copied())
                .with_xlat(xlat_mode)
                .with_seed(seed),
        );
    }
    let reports = exec
        .map(&plans, |p| simulate(config, trace, p))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let base = reports[0].total_cycles;
    Ok(reports
        .into_iter()
        .map(|r| CompareRow {
            label: r.mechanism.clone(),
            speedup: speedup(base, r.total_cycles),
            report: r,
        })
        .collect())
}

pub fn compare_to_csv(rows: &[CompareRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mechanism",
        "total_cycles",
        "speedup",
        "coherence_messages",
        "rollbacks",
        "flushed_lines",
        "dram_accesses",
        "offchip_bytes",
        "energy_total",
        "energy_data_movement",
    ])
    .expect("in-memory write");
    for r in rows {
        let c = &r.report.counters;
        w.write_record([
            r.label.clone(),
            r.report.total_cycles.to_string(),
            format!("{:.6}", r.speedup),
            c.coherence_messages.to_string(),
            c.rollbacks.to_string(),
            c.flushed_lines.to_string(),
            c.dram_accesses.to_string(),
            c.offchip_bytes.to_string(),
            format!("{:.3}", r.report.energy.total()),
            format!("{:.3}", r.report.energy.data_movement_total()),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Aligned table of speedup normalized to the cpu-only row.
pub fn compare_to_text(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>14} {:>9} {:>10} {:>10}",
        "mechanism", "cycles", "speedup", "messages", "rollbacks"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>14} {:>9.3} {:>10} {:>10}",
            r.label,
            r.report.total_cycles,
            r.speedup,
            r.report.counters.coherence_messages,
            r.report.counters.rollbacks
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_gemm_ops: usize,
    pub cpu_only_cycles: u64,
    pub offload_cycles: u64,
    /// cpu-only cycles over offloaded cycles.
    pub speedup: f64,
}

impl SweepRow {
    /// Fractional runtime reduction relative to cpu-only, `speedup - 1`.
    pub fn improvement(&self) -> f64 {
        self.speedup - 1.0
    }
}

/// GEMM pipeline at each depth in `nops`, with pack and quantize offloaded.
pub fn sweep_gemm(
    config: &MachineConfig,
    nops: &[usize],
    matrix_elems: usize,
    mechanism: Mechanism,
    seed: u64,
    exec: Exec,
) -> Result<Vec<SweepRow>, SimError> {
    exec.map(nops, |&n| {
        let trace = gen_gemm_pipeline_trace(n, matrix_elems, seed);
        let offload = trace.kernels_named(&["pack", "quantize"]);
        let base = simulate(config, &trace, &Plan::cpu_only().with_seed(seed))?;
        let pim = simulate(
            config,
            &trace,
            &Plan::new(mechanism).offloading(offload).with_seed(seed),
        )?;
        Ok(SweepRow {
            n_gemm_ops: n,
            cpu_only_cycles: base.total_cycles,
            offload_cycles: pim.total_cycles,
            speedup: speedup(base.total_cycles, pim.total_cycles),
        })
    })
    .into_iter()
    .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n_gemm_ops", "cpu_only_cycles", "offload_cycles", "speedup", "improvement"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.n_gemm_ops.to_string(),
            r.cpu_only_cycles.to_string(),
            r.offload_cycles.to_string(),
            format!("{:.6}", r.speedup),
            format!("{:.6}", r.improvement()),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}
