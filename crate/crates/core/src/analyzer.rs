//! Offload-target selection from per-function profiles.
//!
//! A function is a candidate when it passes all of
//!
//! * C1: its energy is the largest of all functions (ties all pass),
//! * C2: its data-movement energy is more than 20% of the workload's energy,
//! * C3: its MPKI is above 10,
//! * C4: data movement is its largest energy component, which with a
//!   movement/compute split means more than half of its energy.
//!
//! A candidate becomes a target unless a discard rule fires:
//!
//! * D1: it runs slower on the PIM logic than on the CPU (any loss),
//! * D2: its logic needs more area than the budget,
//! * D3: it shares too many lines with the CPU. Only applied when the
//!   mechanism under study is a conventional one.
//!
//! MPKI here counts DRAM-served accesses per thousand trace events, where
//! an event is a compute block or a memory access.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::Mechanism;
use crate::engine::{simulate_detailed, Plan, SimError};
use crate::machine::MachineConfig;
use crate::par::Exec;
use crate::trace::{KernelId, Trace, TraceEvent};
use crate::xlat::PageTableMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionProfile {
    pub name: String,
    pub energy_total: f64,
    pub energy_data_movement: f64,
    pub mpki: f64,
    /// PIM runtime over CPU runtime.
    pub pim_runtime_ratio: f64,
    pub est_area_mm2: f64,
    /// Lines touched both by this function and by the other agent.
    pub shared_lines: u64,
    /// Distinct lines touched by this function.
    pub touched_lines: u64,
    pub workload_energy_total: f64,
}

pub const PROFILE_COLUMNS: [&str; 9] = [
    "name",
    "energy_total",
    "energy_data_movement",
    "mpki",
    "pim_runtime_ratio",
    "est_area_mm2",
    "shared_lines",
    "touched_lines",
    "workload_energy_total",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// C2: data-movement energy over workload energy must exceed this.
    pub dm_fraction: f64,
    /// C3: MPKI must exceed this.
    pub mpki: f64,
    /// C4: data-movement share of the function's own energy must exceed this.
    pub dm_share: f64,
    /// D1: PIM/CPU runtime ratio must not exceed this.
    pub runtime_ratio_max: f64,
    /// D2: area budget for the function's logic, mm².
    pub area_budget_mm2: f64,
    /// D3: shared lines allowed, as a fraction of touched lines.
    pub sharing_fraction: f64,
    /// D3 only applies under a conventional coherence mechanism.
    pub conventional_coherence: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            dm_fraction: 0.20,
            mpki: 10.0,
            dm_share: 0.5,
            runtime_ratio_max: 1.0,
            area_budget_mm2: 3.5,
            sharing_fraction: 0.01,
            conventional_coherence: true,
        }
    }
}

impl Thresholds {
    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Rule {
    C1,
    C2,
    C3,
    C4,
    D1,
    D2,
    D3,
}

impl Rule {
    pub const ALL: [Rule; 7] = [Rule::C1, Rule::C2, Rule::C3, Rule::C4, Rule::D1, Rule::D2, Rule::D3];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleOutcome {
    pub rule: Rule,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub candidate: bool,
    pub target: bool,
    pub reasons: Vec<RuleOutcome>,
}

impl Verdict {
    pub fn outcome(&self, rule: Rule) -> Option<&RuleOutcome> {
        self.reasons.iter().find(|r| r.rule == rule)
    }
}

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("no profiles given")]
    Empty,
    #[error("profile {name}: workload energy is zero, fractions are undefined")]
    ZeroWorkloadEnergy { name: String },
    #[error("profile {name}: {msg}")]
    Invalid { name: String, msg: String },
    #[error("profile CSV: {0}")]
    Schema(String),
    #[error("kernels without a function name: {0:?}")]
    Unlabeled(Vec<KernelId>),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn check(p: &FunctionProfile) -> Result<(), AnalyzerError> {
    let bad = |msg: &str| AnalyzerError::Invalid {
        name: p.name.clone(),
        msg: msg.to_string(),
    };
    if p.workload_energy_total == 0.0 {
        return Err(AnalyzerError::ZeroWorkloadEnergy {
            name: p.name.clone(),
        });
    }
    let finite = [
        p.energy_total,
        p.energy_data_movement,
        p.mpki,
        p.est_area_mm2,
        p.workload_energy_total,
    ]
    .iter()
    .all(|x| x.is_finite());
    if !finite {
        return Err(bad("non-finite value"));
    }
    if !(0.0 <= p.energy_data_movement
        && p.energy_data_movement <= p.energy_total
        && p.energy_total <= p.workload_energy_total)
    {
        return Err(bad(
            "need 0 <= energy_data_movement <= energy_total <= workload_energy_total",
        ));
    }
    if p.mpki < 0.0 {
        return Err(bad("mpki must be >= 0"));
    }
    if p.pim_runtime_ratio.is_nan() || p.pim_runtime_ratio <= 0.0 {
        return Err(bad("pim_runtime_ratio must be > 0 (inf if the function cannot run on the PIM logic)"));
    }
    Ok(())
}

fn outcome(rule: Rule, passed: bool, measured: f64, threshold: f64) -> RuleOutcome {
    RuleOutcome {
        rule,
        passed,
        measured,
        threshold,
        note: None,
    }
}

/// Evaluates C1..C4. The returned verdicts carry only those four reasons;
/// [`filter_targets`] appends the discard rules.
pub fn identify_candidates(
    profiles: &[FunctionProfile],
    th: &Thresholds,
) -> Result<Vec<Verdict>, AnalyzerError> {
    if profiles.is_empty() {
        return Err(AnalyzerError::Empty);
    }
    for p in profiles {
        check(p)?;
    }
    let max = profiles
        .iter()
        .map(|p| p.energy_total)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(profiles
        .iter()
        .map(|p| {
            let dm_fraction = p.energy_data_movement / p.workload_energy_total;
            let dm_share = if p.energy_total > 0.0 {
                p.energy_data_movement / p.energy_total
            } else {
                0.0
            };
            let reasons = vec![
                outcome(Rule::C1, p.energy_total == max, p.energy_total, max),
                outcome(Rule::C2, dm_fraction > th.dm_fraction, dm_fraction, th.dm_fraction),
                outcome(Rule::C3, p.mpki > th.mpki, p.mpki, th.mpki),
                outcome(Rule::C4, dm_share > th.dm_share, dm_share, th.dm_share),
            ];
            Verdict {
                name: p.name.clone(),
                candidate: reasons.iter().all(|r| r.passed),
                target: false,
                reasons,
            }
        })
        .collect())
}

/// Appends D1..D3 to each verdict (matched to `profiles` by position) and
/// sets `target`.
pub fn filter_targets(
    mut verdicts: Vec<Verdict>,
    profiles: &[FunctionProfile],
    th: &Thresholds,
) -> Vec<Verdict> {
    for (v, p) in verdicts.iter_mut().zip(profiles) {
        v.reasons.retain(|r| r.rule < Rule::D1);
        let mut d1 = outcome(
            Rule::D1,
            p.pim_runtime_ratio <= th.runtime_ratio_max,
            p.pim_runtime_ratio,
            th.runtime_ratio_max,
        );
        if p.pim_runtime_ratio.is_infinite() {
            d1.note = Some("cannot run on the PIM logic".into());
        }
        v.reasons.push(d1);
        v.reasons.push(outcome(
            Rule::D2,
            p.est_area_mm2 <= th.area_budget_mm2,
            p.est_area_mm2,
            th.area_budget_mm2,
        ));
        let allowed = th.sharing_fraction * p.touched_lines as f64;
        let mut d3 = outcome(Rule::D3, p.shared_lines as f64 <= allowed, p.shared_lines as f64, allowed);
        if !th.conventional_coherence {
            d3.passed = true;
            d3.note = Some("not applied: mechanism is not conventional".into());
        }
        v.reasons.push(d3);
        v.target = v.candidate && v.reasons.iter().all(|r| r.passed);
    }
    verdicts
}

/// Both stages: complete verdicts with every rule once.
pub fn analyze(profiles: &[FunctionProfile], th: &Thresholds) -> Result<Vec<Verdict>, AnalyzerError> {
    let v = identify_candidates(profiles, th)?;
    Ok(filter_targets(v, profiles, th))
}

pub fn verdicts_to_json(verdicts: &[Verdict]) -> String {
    let targets: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.target)
        .map(|v| v.name.as_str())
        .collect();
    let mut s = serde_json::to_string_pretty(&serde_json::json!({
        "schema": 1,
        "targets": targets,
        "verdicts": verdicts,
    }))
    .expect("verdicts always serialize");
    s.push('\n');
    s
}

/// Reads profiles from CSV with exactly the [`PROFILE_COLUMNS`] header.
pub fn profiles_from_csv(reader: impl Read) -> Result<Vec<FunctionProfile>, AnalyzerError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| AnalyzerError::Schema(e.to_string()))?
        .clone();
    let have: BTreeSet<&str> = headers.iter().collect();
    let missing: Vec<&str> = PROFILE_COLUMNS
        .iter()
        .copied()
        .filter(|c| !have.contains(c))
        .collect();
    let unknown: Vec<&str> = headers
        .iter()
        .filter(|h| !PROFILE_COLUMNS.contains(h))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(AnalyzerError::Schema(format!(
            "missing columns {missing:?}, unknown columns {unknown:?}"
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| AnalyzerError::Schema(format!("data row {}: {e}", i + 1)))
        })
        .collect()
}

pub fn profiles_to_csv(profiles: &[FunctionProfile]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in profiles {
        w.serialize(p).expect("in-memory write");
    }
    if profiles.is_empty() {
        w.write_record(PROFILE_COLUMNS).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Kernel ids per function name, from the trace header. Errors if some
/// kernel in the trace has no name.
pub fn functions_of(trace: &Trace) -> Result<BTreeMap<String, Vec<KernelId>>, AnalyzerError> {
    let unlabeled: Vec<KernelId> = trace
        .kernel_ids()
        .into_iter()
        .filter(|k| !trace.header.kernel_names.contains_key(k))
        .collect();
    if !unlabeled.is_empty() {
        return Err(AnalyzerError::Unlabeled(unlabeled));
    }
    let present: BTreeSet<KernelId> = trace.kernel_ids().into_iter().collect();
    let mut out: BTreeMap<String, Vec<KernelId>> = BTreeMap::new();
    for (id, name) in &trace.header.kernel_names {
        if present.contains(id) {
            out.entry(name.clone()).or_default().push(*id);
        }
    }
    Ok(out)
}

/// Virtual lines touched inside and outside the given kernels, per stream.
fn line_sets(
    trace: &Trace,
    kernels: &BTreeSet<KernelId>,
    line: u64,
) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let mut inside = BTreeSet::new();
    let mut outside = BTreeSet::new();
    for stream in [&trace.cpu, &trace.pim] {
        let mut stack: Vec<KernelId> = Vec::new();
        for ev in stream {
            match *ev {
                TraceEvent::KernelBegin { kernel_id, .. } => stack.push(kernel_id),
                TraceEvent::KernelEnd { .. } => {
                    stack.pop();
                }
                _ => {}
            }
            if let Some((vaddr, bytes)) = ev.footprint() {
                let mine = stack.first().is_some_and(|k| kernels.contains(k));
                let set = if mine { &mut inside } else { &mut outside };
                for l in (vaddr / line)..=((vaddr + bytes - 1) / line) {
                    set.insert(l * line);
                }
            }
        }
    }
    (inside, outside)
}

/// Measures one profile per function: energy and misses from a cpu-only
/// run, the runtime ratio from a second run with the function's kernels
/// offloaded. A function whose kernels cannot run on the PIM logic (data
/// outside every PIM region, or a granularity the accelerator lacks) gets
/// an infinite ratio. Kernels already in the PIM stream run on the PIM logic in
/// that second run regardless.
pub fn profile_from_simulation(
    config: &MachineConfig,
    trace: &Trace,
    functions: &BTreeMap<String, Vec<KernelId>>,
    mechanism: Mechanism,
    xlat_mode: PageTableMode,
    exec: Exec,
) -> Result<Vec<FunctionProfile>, AnalyzerError> {
    let named: BTreeSet<KernelId> = functions.values().flatten().copied().collect();
    let unlabeled: Vec<KernelId> = trace
        .kernel_ids()
        .into_iter()
        .filter(|k| !named.contains(k))
        .collect();
    if !unlabeled.is_empty() {
        return Err(AnalyzerError::Unlabeled(unlabeled));
    }
    let base = simulate_detailed(config, trace, &Plan::cpu_only())?;
    let workload = base.report.energy.total();
    let cpu_kernels: BTreeSet<KernelId> = trace
        .cpu
        .iter()
        .filter_map(|e| match e {
            TraceEvent::KernelBegin { kernel_id, .. } => Some(*kernel_id),
            _ => None,
        })
        .collect();

    let entries: Vec<(&String, &Vec<KernelId>)> = functions.iter().collect();
    exec.map(&entries, |(name, ids)| {
        let ids: BTreeSet<KernelId> = ids.iter().copied().collect();
        let (mut energy, mut dm, mut cpu_cycles, mut instr, mut misses) = (0.0, 0.0, 0u64, 0u64, 0u64);
        for id in &ids {
            if let Some(k) = base.kernels.get(id) {
                energy += k.energy.total();
                dm += k.energy.data_movement_total();
                cpu_cycles += k.cycles;
                instr += k.instructions;
                misses += k.dram_misses;
            }
        }
        let plan = Plan::new(mechanism)
            .with_xlat(xlat_mode)
            .offloading(ids.iter().copied().filter(|k| cpu_kernels.contains(k)));
        let ratio = match simulate_detailed(config, trace, &plan) {
            Ok(pim) => {
                let pim_cycles: u64 = ids
                    .iter()
                    .filter_map(|id| pim.kernels.get(id))
                    .map(|k| k.cycles)
                    .sum();
                if cpu_cycles == 0 || pim_cycles == 0 {
                    1.0
                } else {
                    pim_cycles as f64 / cpu_cycles as f64
                }
            }
            Err(
                SimError::TranslationFault { .. }
                | SimError::Translation { .. }
                | SimError::Unsupported { .. },
            ) => f64::INFINITY,
            Err(e) => return Err(e.into()),
        };
        let (inside, outside) = line_sets(trace, &ids, config.line_size);
        Ok(FunctionProfile {
            name: name.to_string(),
            energy_total: energy,
            energy_data_movement: dm,
            mpki: if instr == 0 {
                0.0
            } else {
                misses as f64 * 1000.0 / instr as f64
            },
            pim_runtime_ratio: ratio,
            est_area_mm2: config.pim_logic_area,
            shared_lines: inside.intersection(&outside).count() as u64,
            touched_lines: inside.len() as u64,
            workload_energy_total: workload,
        })
    })
    .into_iter()
    .collect()
}
