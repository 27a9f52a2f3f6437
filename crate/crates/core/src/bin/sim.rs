//! Experiment runner. Exit status: 0 ok, 2 bad input (config, trace,
//! profiles, flags), 3 simulation error, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pimsim::analyzer::{
    analyze, functions_of, profile_from_simulation, profiles_from_csv, profiles_to_csv,
    verdicts_to_json, AnalyzerError, Thresholds,
};
use pimsim::coherence::Mechanism;
use pimsim::engine::{
    compare_mechanisms, compare_to_csv, compare_to_text, simulate, sweep_gemm, sweep_to_csv,
    MetricsReport, Plan, SimError,
};
use pimsim::machine::{ConfigError, MachineConfig};
use pimsim::par::Exec;
use pimsim::trace::{parse_trace, write_trace_string, GenSpec, KernelId, Trace, TraceError};
use pimsim::xlat::PageTableMode;

#[derive(Parser)]
#[command(name = "sim", version, about = "CPU + PIM coherence and offload simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a generated trace in the text trace format.
    Gen {
        /// Generator, e.g. `quantize:n=1000` or `shared:n=5000,share=0.05`.
        spec: GenSpec,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one trace under one mechanism.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value_t = MechArg::Fg)]
        mech: MechArg,
        #[command(flatten)]
        offload: Offload,
        #[command(flatten)]
        output: Output,
    },
    /// Simulate one trace on the CPU alone and under every mechanism.
    Compare {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        offload: Offload,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        threads: Threads,
    },
    /// GEMM pipeline speedup over cpu-only as the number of GEMM ops grows.
    SweepGemm {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
        nops: Vec<usize>,
        #[arg(long, default_value_t = pimsim::trace::DEFAULT_GEMM_ELEMS)]
        elems: usize,
        #[arg(long, value_enum, default_value_t = MechArg::Fg)]
        mech: MechArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// The GEMM generator ignores its seed, so this defaults to 0.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        threads: Threads,
    },
    /// Pick PIM targets from per-function profiles.
    Analyze {
        /// Profiles CSV. Without it, profiles are measured by simulating a trace.
        #[arg(long, conflicts_with_all = ["gen", "trace"])]
        profiles: Option<PathBuf>,
        #[arg(long, conflicts_with = "trace")]
        gen: Option<GenSpec>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = MechArg::Fg)]
        mech: MechArg,
        #[arg(long, value_enum, default_value_t = XlatArg::Region)]
        xlat: XlatArg,
        /// TOML file overriding analyzer thresholds.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Area available for the function's PIM logic, mm².
        #[arg(long)]
        area_budget: Option<f64>,
        /// Skip the data-sharing rule, as under a PIM-aware coherence mechanism.
        #[arg(long)]
        no_sharing_rule: bool,
        /// Also write the measured profiles as CSV.
        #[arg(long)]
        profiles_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        threads: Threads,
    },
}

#[derive(Args)]
struct Input {
    /// Generator, e.g. `quantize:n=1000`.
    #[arg(long, required_unless_present = "trace", conflicts_with = "trace")]
    gen: Option<GenSpec>,
    /// Trace file in the text trace format.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Machine config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = XlatArg::Region)]
    xlat: XlatArg,
}

#[derive(Args)]
struct Offload {
    /// CPU-stream kernel ids to run on the PIM logic.
    #[arg(long, value_delimiter = ',')]
    offload: Vec<KernelId>,
    /// Function names whose kernels run on the PIM logic.
    #[arg(long, value_delimiter = ',')]
    offload_fn: Vec<String>,
}

#[derive(Args)]
struct Output {
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Threads {
    /// Run the simulations one after another on this thread.
    #[arg(long)]
    sequential: bool,
}

impl Threads {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechArg {
    CpuOnly,
    Fg,
    Cg,
    Nc,
    Conda,
    Ideal,
}

impl MechArg {
    fn mechanism(self) -> Option<Mechanism> {
        match self {
            MechArg::CpuOnly => None,
            MechArg::Fg => Some(Mechanism::Fg),
            MechArg::Cg => Some(Mechanism::Cg),
            MechArg::Nc => Some(Mechanism::Nc),
            MechArg::Conda => Some(Mechanism::Conda),
            MechArg::Ideal => Some(Mechanism::Ideal),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum XlatArg {
    Region,
    Conventional,
}

impl From<XlatArg> for PageTableMode {
    fn from(x: XlatArg) -> Self {
        match x {
            XlatArg::Region => PageTableMode::RegionBased,
            XlatArg::Conventional => PageTableMode::Conventional4Level,
        }
    }
}

enum Failure {
    Input(String),
    Sim(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Sim(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Sim(m) | Failure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            ConfigError::Invalid(vs) => Failure::Input(format!(
                "invalid config:\n{}",
                vs.iter().map(|v| format!("  {v}\n")).collect::<String>()
            )),
            ConfigError::Parse(_) => Failure::Input(e.to_string()),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(vs) => Failure::Input(format!(
                "invalid config:\n{}",
                vs.iter().map(|v| format!("  {v}\n")).collect::<String>()
            )),
            SimError::Trace(t) => t.into(),
            other => Failure::Sim(other.to_string()),
        }
    }
}

impl From<AnalyzerError> for Failure {
    fn from(e: AnalyzerError) -> Self {
        match e {
            AnalyzerError::Sim(s) => s.into(),
            other => Failure::Input(other.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<MachineConfig, Failure> {
    match path {
        Some(p) => Ok(MachineConfig::load(p)?),
        None => Ok(MachineConfig::default()),
    }
}

fn load_trace(gen: Option<&GenSpec>, path: Option<&Path>, seed: u64) -> Result<Trace, Failure> {
    match (gen, path) {
        (Some(g), _) => Ok(g.generate(seed)),
        (None, Some(p)) => Ok(parse_trace(p)?),
        (None, None) => Err(Failure::Input("need --gen or --trace".into())),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("reading {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| Failure::Io(format!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn offload_set(trace: &Trace, o: &Offload) -> Result<Vec<KernelId>, Failure> {
    let mut ids = o.offload.clone();
    if !o.offload_fn.is_empty() {
        let names: Vec<&str> = o.offload_fn.iter().map(String::as_str).collect();
        let found = trace.kernels_named(&names);
        for name in &names {
            let known = trace.header.kernel_names.values().any(|n| n == name);
            if !known {
                return Err(Failure::Input(format!("no kernel is named `{name}`")));
            }
        }
        ids.extend(found);
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

fn report_text(r: &MetricsReport, format: Format) -> Result<String, Failure> {
    match format {
        Format::Json => Ok(r.to_json()),
        Format::Text => Ok(r.to_text()),
        Format::Csv => Err(Failure::Input("run reports are json or text".into())),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Gen { spec, seed, out } => emit(out.as_deref(), &write_trace_string(&spec.generate(seed))),
        Cmd::Run {
            input,
            mech,
            offload,
            output,
        } => {
            let config = load_config(input.config.as_deref())?;
            let trace = load_trace(input.gen.as_ref(), input.trace.as_deref(), input.seed)?;
            let plan = match mech.mechanism() {
                None => Plan::cpu_only(),
                Some(m) => Plan::new(m)
                    .offloading(offload_set(&trace, &offload)?)
                    .with_xlat(input.xlat.into()),
            }
            .with_seed(input.seed);
            let report = simulate(&config, &trace, &plan)?;
            emit(
                output.out.as_deref(),
                &report_text(&report, output.format.unwrap_or(Format::Json))?,
            )
        }
        Cmd::Compare {
            input,
            offload,
            output,
            threads,
        } => {
            let config = load_config(input.config.as_deref())?;
            let trace = load_trace(input.gen.as_ref(), input.trace.as_deref(), input.seed)?;
            let ids = offload_set(&trace, &offload)?.into_iter().collect();
            let rows = compare_mechanisms(
                &config,
                &trace,
                &ids,
                input.xlat.into(),
                input.seed,
                threads.exec(),
            )?;
            let text = match output.format.unwrap_or(Format::Csv) {
                Format::Csv => compare_to_csv(&rows),
                Format::Text => compare_to_text(&rows),
                Format::Json => to_json(&rows),
            };
            emit(output.out.as_deref(), &text)
        }
        Cmd::SweepGemm {
            nops,
            elems,
            mech,
            config,
            seed,
            output,
            threads,
        } => {
            let config = load_config(config.as_deref())?;
            if nops.is_empty() || nops.contains(&0) || elems == 0 {
                return Err(Failure::Input("--nops and --elems must be >= 1".into()));
            }
            let mechanism = mech
                .mechanism()
                .ok_or_else(|| Failure::Input("sweep-gemm needs a PIM mechanism".into()))?;
            let rows = sweep_gemm(&config, &nops, elems, mechanism, seed, threads.exec())?;
            let text = match output.format.unwrap_or(Format::Csv) {
                Format::Csv | Format::Text => sweep_to_csv(&rows),
                Format::Json => to_json(&rows),
            };
            emit(output.out.as_deref(), &text)
        }
        Cmd::Analyze {
            profiles,
            gen,
            trace,
            config,
            seed,
            mech,
            xlat,
            thresholds,
            area_budget,
            no_sharing_rule,
            profiles_out,
            out,
            threads,
        } => {
            let mut th = match &thresholds {
                Some(p) => Thresholds::from_toml_str(&read_text(p)?)
                    .map_err(|e| Failure::Input(format!("thresholds {}: {e}", p.display())))?,
                None => Thresholds::default(),
            };
            if let Some(a) = area_budget {
                th.area_budget_mm2 = a;
            }
            if no_sharing_rule {
                th.conventional_coherence = false;
            }
            let profiles = match profiles {
                Some(p) => {
                    let file = std::fs::File::open(&p)
                        .map_err(|e| Failure::Io(format!("reading {}: {e}", p.display())))?;
                    profiles_from_csv(file)?
                }
                None => {
                    let seed = seed.ok_or_else(|| {
                        Failure::Input("--seed is required when profiling a trace".into())
                    })?;
                    let config = load_config(config.as_deref())?;
                    let trace = load_trace(gen.as_ref(), trace.as_deref(), seed)?;
                    let functions = functions_of(&trace)?;
                    let mechanism = mech
                        .mechanism()
                        .ok_or_else(|| Failure::Input("analyze needs a PIM mechanism".into()))?;
                    profile_from_simulation(
                        &config,
                        &trace,
                        &functions,
                        mechanism,
                        xlat.into(),
                        threads.exec(),
                    )?
                }
            };
            if let Some(p) = &profiles_out {
                emit(Some(p), &profiles_to_csv(&profiles))?;
            }
            let verdicts = analyze(&profiles, &th)?;
            emit(out.as_deref(), &verdicts_to_json(&verdicts))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sim: {}", f.message().trim_end());
            ExitCode::from(f.code())
        }
    }
}
