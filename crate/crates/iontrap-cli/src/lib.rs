//! Front end of the `iontrap` command: process tomography, calibration scans, error
//! budgets and pulse-program dumps. [`execute`] runs one command line in-process;
//! the binary is a thin wrapper around it.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 simulation or fit, 5 I/O.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use iontrap::frames::Transition;
use iontrap::noiselab::{
    error_budget, fit_gate_fidelity, rabi_experiment, ramsey_experiment, residual_stark_check, run_process_tomography,
    stark_scan, thermal_state, ErrorSource, ExperimentResult,
};
use iontrap::sequencer::{ground_state, prep_operations, ExecMode, GateKind, ProgramBuilder};
use iontrap::tomography::{measurement_basis, projection_noise_errorbars, DesignMatrix, N_INPUTS, N_MEAS};

static QUIET: AtomicBool = AtomicBool::new(false);

/// Console summary lines; files are written regardless.
macro_rules! say {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            print!($($arg)*);
        }
    };
}

use config::{parse_mode, parse_range, RunConfig};
use output::{Provenance, Sink};

#[derive(Parser)]
#[command(name = "iontrap", version, about = "Single trapped-ion gate simulator and tomography toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat dotted keys, frequencies in Hz).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sample this many shots per measurement setting.
    #[arg(long, global = true, conflicts_with = "exact")]
    shots: Option<u64>,
    /// Use exact outcome probabilities.
    #[arg(long, global = true)]
    exact: bool,
    /// idealized | physical
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Monte-Carlo noise trajectories.
    #[arg(long, global = true)]
    trajectories: Option<usize>,
    /// Only write files; no console summaries.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// 16 x 15 process tomography of a gate, or of the 0/1/2-gate series.
    Tomography { gate: TomographyTarget },
    /// Calibration scans.
    Scan {
        experiment: ScanKind,
        /// carrier | bsb | rsb
        #[arg(long)]
        transition: Option<String>,
        /// Stark-pulse detunings in units of the trap frequency, start:stop:step.
        #[arg(long)]
        detunings: Option<String>,
        /// Initial thermal occupation for Rabi scans.
        #[arg(long)]
        nbar: Option<f64>,
    },
    /// Process-fidelity budget of the CNOT by error source.
    Errorbudget {
        /// Comma-separated subset of off_resonant, laser_frequency, laser_intensity.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
    },
    /// Print a compiled pulse program.
    DumpSequence {
        #[arg(long, default_value = "cnot")]
        gate: GateArg,
        /// Prepend preparation row 1..16.
        #[arg(long)]
        prep: Option<usize>,
        /// Append measurement setting 1..15.
        #[arg(long)]
        meas: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TomographyTarget {
    Identity,
    Cnot,
    Cnotx2,
    Series,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Identity,
    Cnot,
    Cnotx2,
}

impl GateArg {
    fn kind(self) -> GateKind {
        match self {
            GateArg::Identity => GateKind::Identity,
            GateArg::Cnot => GateKind::Cnot,
            GateArg::Cnotx2 => GateKind::CnotTwice,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanKind {
    Rabi,
    Ramsey,
    Stark,
    #[value(name = "residual_stark")]
    ResidualStark,
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Config(String),
    Run(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(e) => e.exit_code() as u8,
            CliError::Config(_) => 3,
            CliError::Run(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{}", e.to_string().trim_end()),
            CliError::Config(m) | CliError::Run(m) | CliError::Io(m) => write!(f, "{}", m.replace('\n', " ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = cli.shots {
        if n == 0 {
            return Err(CliError::Config("--shots must be positive".into()));
        }
        cfg.shots = Some(n);
    }
    if cli.exact {
        cfg.shots = None;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = parse_mode(m).ok_or_else(|| CliError::Config(format!("unknown mode `{m}`")))?;
    }
    if let Some(n) = cli.trajectories {
        cfg.n_trajectories = n;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TomographySummary {
    gate: &'static str,
    mode: &'static str,
    method: &'static str,
    shots: Option<u64>,
    n_trajectories: usize,
    process_fidelity: f64,
    process_fidelity_std: f64,
    mean_fidelity: f64,
    mean_fidelity_std: f64,
    haar_mean_fidelity: f64,
    chi_min_eigenvalue: f64,
    tp_violation: f64,
    state_fidelities: Vec<f64>,
}

#[derive(Serialize)]
struct SeriesSummary {
    process_fidelities: Vec<(usize, f64)>,
    gate_fidelity: f64,
    spam_fidelity: f64,
}

fn cmd_tomography(cfg: &RunConfig, target: TomographyTarget) -> Result<(), CliError> {
    let gates: Vec<GateKind> = match target {
        TomographyTarget::Identity => vec![GateKind::Identity],
        TomographyTarget::Cnot => vec![GateKind::Cnot],
        TomographyTarget::Cnotx2 => vec![GateKind::CnotTwice],
        TomographyTarget::Series => vec![GateKind::Identity, GateKind::Cnot, GateKind::CnotTwice],
    };
    let label = match target {
        TomographyTarget::Series => "series",
        _ => gates[0].name(),
    };
    let mut sink = Sink::new(cfg, Provenance::new(cfg, format!("tomography {label}")));
    let setup = cfg.setup();
    let design = DesignMatrix::standard();
    let mut series = Vec::new();
    for gate in gates {
        let (data, report) =
            run_process_tomography(&setup, gate, cfg.shots, cfg.seed, cfg.method).map_err(run_err)?;
        let bars = projection_noise_errorbars(&design, &data, &gate.target(), cfg.method, cfg.bootstrap, cfg.seed)
            .map_err(run_err)?;
        let name = gate.name();
        sink.csv(&format!("tomography_{name}_data.csv"), &data.to_csv())?;
        let summary = [
            ("process_fidelity", report.process_fidelity),
            ("process_fidelity_std", bars.process_fidelity_std),
            ("mean_fidelity", report.mean_fidelity),
            ("mean_fidelity_std", bars.mean_fidelity_std),
            ("haar_mean_fidelity", report.haar_mean_fidelity),
        ];
        sink.text(&format!("tomography_{name}_chi.txt"), &report.chi.to_text(&summary))?;
        sink.json(
            &format!("tomography_{name}.json"),
            &TomographySummary {
                gate: name,
                mode: cfg.mode.name(),
                method: cfg.method_name(),
                shots: cfg.shots,
                n_trajectories: cfg.n_trajectories,
                process_fidelity: report.process_fidelity,
                process_fidelity_std: bars.process_fidelity_std,
                mean_fidelity: report.mean_fidelity,
                mean_fidelity_std: bars.mean_fidelity_std,
                haar_mean_fidelity: report.haar_mean_fidelity,
                chi_min_eigenvalue: report.chi.min_eigenvalue(),
                tp_violation: report.chi.tp_violation,
                state_fidelities: report.state_fidelities.clone(),
            },
        )?;
        say!(
            "{name:<9} F_p = {:.4} +- {:.4}  F_mean = {:.4} +- {:.4}  (4F_p+1)/5 = {:.4}\n",
            report.process_fidelity,
            bars.process_fidelity_std,
            report.mean_fidelity,
            bars.mean_fidelity_std,
            report.haar_mean_fidelity
        );
        series.push((gate.count(), report.process_fidelity));
    }
    if series.len() == 3 {
        let (fg, fi) = fit_gate_fidelity(&series).map_err(run_err)?;
        sink.json("tomography_series.json", &SeriesSummary { process_fidelities: series, gate_fidelity: fg, spam_fidelity: fi })?;
        say!("per-gate F_g = {fg:.4}  (preparation/measurement F_i = {fi:.4})\n");
    }
    finish(&sink);
    Ok(())
}

#[derive(Serialize)]
struct FitParam {
    name: String,
    value: f64,
    error: f64,
}

#[derive(Serialize)]
struct ScanSummary {
    experiment: String,
    mode: &'static str,
    n_trajectories: usize,
    fit: Vec<FitParam>,
    residual_rms: f64,
    points: usize,
}

fn us_range(spec: &str) -> Result<Vec<f64>, CliError> {
    Ok(parse_range(spec).map_err(CliError::Config)?.into_iter().map(|t| t * 1e-6).collect())
}

fn cmd_scan(
    cfg: &RunConfig,
    kind: ScanKind,
    transition: Option<String>,
    detunings: Option<String>,
    nbar: Option<f64>,
) -> Result<(), CliError> {
    let transition = match &transition {
        Some(t) => Some(Transition::from_name(t).ok_or_else(|| CliError::Config(format!("unknown transition `{t}`")))?),
        None => None,
    };
    let setup = cfg.setup();
    let needs_physical = matches!(kind, ScanKind::Stark | ScanKind::ResidualStark);
    if needs_physical && cfg.mode != ExecMode::Physical {
        return Err(CliError::Config("Stark scans need --mode physical".into()));
    }
    let result: ExperimentResult = match kind {
        ScanKind::Rabi => {
            let tr = transition.unwrap_or(Transition::BlueSideband);
            let n = nbar.unwrap_or(cfg.nbar);
            if !(n >= 0.0) {
                return Err(CliError::Config("--nbar must be >= 0".into()));
            }
            let rho = if n > 0.0 { thermal_state(n) } else { ground_state() };
            rabi_experiment(&setup, tr, &us_range(&cfg.rabi_durations_us)?, &rho).map_err(run_err)?
        }
        ScanKind::Ramsey => {
            let tr = transition.unwrap_or(Transition::Carrier);
            ramsey_experiment(&setup, tr, &us_range(&cfg.ramsey_delays_us)?, 0.0).map_err(run_err)?
        }
        ScanKind::Stark => {
            let xs = parse_range(detunings.as_deref().unwrap_or(&cfg.detunings)).map_err(CliError::Config)?;
            let taus = us_range(&cfg.stark_taus_us)?;
            stark_scan(&setup, &xs, &taus, cfg.t_fixed_us * 1e-6).map_err(run_err)?.0
        }
        ScanKind::ResidualStark => residual_stark_check(&setup, &us_range(&cfg.residual_delays_us)?).map_err(run_err)?,
    };
    let name = match kind {
        ScanKind::Rabi => "rabi",
        ScanKind::Ramsey => "ramsey",
        ScanKind::Stark => "stark",
        ScanKind::ResidualStark => "residual_stark",
    }
    .to_string();
    let mut sink = Sink::new(cfg, Provenance::new(cfg, format!("scan {name}")));
    sink.csv(&format!("scan_{name}.csv"), &result.to_csv())?;
    sink.json(
        &format!("scan_{name}.json"),
        &ScanSummary {
            experiment: name.clone(),
            mode: cfg.mode.name(),
            n_trajectories: cfg.n_trajectories,
            fit: result.fit.iter().map(|(n, v, e)| FitParam { name: n.clone(), value: *v, error: *e }).collect(),
            residual_rms: result.residual_rms,
            points: result.xs.len(),
        },
    )?;
    for (n, v, e) in &result.fit {
        say!("{name}: {n} = {v:.6e} +- {e:.2e}\n");
    }
    finish(&sink);
    Ok(())
}

#[derive(Serialize)]
struct BudgetJson {
    n_trajectories: usize,
    rows: Vec<BudgetEntry>,
    total: BudgetEntry,
    product_rule_deficit: f64,
}

#[derive(Serialize)]
struct BudgetEntry {
    source: String,
    process_fidelity: f64,
    deficit: f64,
}

fn cmd_errorbudget(cfg: &RunConfig, sources: Option<Vec<String>>) -> Result<(), CliError> {
    let sources: Vec<ErrorSource> = match sources {
        None => ErrorSource::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| ErrorSource::from_name(n.trim()).ok_or_else(|| CliError::Config(format!("unknown error source `{n}`"))))
            .collect::<Result<_, _>>()?,
    };
    let budget = error_budget(cfg.params(), &cfg.noise(), &sources, cfg.n_trajectories, cfg.method).map_err(run_err)?;
    let names: Vec<&str> = sources.iter().map(|s| s.name()).collect();
    let mut sink = Sink::new(cfg, Provenance::new(cfg, format!("errorbudget {}", names.join(","))));
    sink.csv("errorbudget.csv", &budget.to_csv())?;
    sink.text("errorbudget.txt", &budget.to_table())?;
    let entry = |r: &iontrap::noiselab::BudgetRow| BudgetEntry {
        source: r.label.clone(),
        process_fidelity: r.process_fidelity,
        deficit: r.deficit,
    };
    sink.json(
        "errorbudget.json",
        &BudgetJson {
            n_trajectories: cfg.n_trajectories,
            rows: budget.rows.iter().map(entry).collect(),
            total: entry(&budget.total),
            product_rule_deficit: budget.product_rule,
        },
    )?;
    say!("{}", budget.to_table());
    finish(&sink);
    Ok(())
}

fn cmd_dump(cfg: &RunConfig, gate: GateArg, prep: Option<usize>, meas: Option<usize>) -> Result<(), CliError> {
    let mut b = ProgramBuilder::new(cfg.context());
    if let Some(i) = prep {
        if !(1..=N_INPUTS).contains(&i) {
            return Err(CliError::Config(format!("--prep must be in 1..={N_INPUTS}")));
        }
        b.ops(&prep_operations(i).map_err(run_err)?).map_err(run_err)?;
    }
    b.ops(&gate.kind().operations()).map_err(run_err)?;
    if let Some(m) = meas {
        if !(1..=N_MEAS).contains(&m) {
            return Err(CliError::Config(format!("--meas must be in 1..={N_MEAS}")));
        }
        measurement_basis()[m - 1].append_to(&mut b).map_err(run_err)?;
    }
    let prog = b.finish().map_err(run_err)?;
    let mut command = format!("dump-sequence {}", gate.kind().name());
    if let Some(i) = prep {
        command += &format!(" --prep {i}");
    }
    if let Some(m) = meas {
        command += &format!(" --meas {m}");
    }
    let prov = Provenance::new(cfg, command);
    print!("{}# mode: {} | duration_s: {:e}\n{}", prov.header(), cfg.mode.name(), prog.total_duration(), prog.dump());
    Ok(())
}

fn finish(sink: &Sink) {
    if QUIET.load(Ordering::Relaxed) {
        return;
    }
    eprintln!("wrote {} file(s) to {}", sink.written.len(), sink.dir().display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    QUIET.store(cli.quiet, Ordering::Relaxed);
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Tomography { gate } => cmd_tomography(&cfg, gate),
        Command::Scan { experiment, transition, detunings, nbar } => {
            cmd_scan(&cfg, experiment, transition, detunings, nbar)
        }
        Command::Errorbudget { sources } => cmd_errorbudget(&cfg, sources),
        Command::DumpSequence { gate, prep, meas } => cmd_dump(&cfg, gate, prep, meas),
    }
}

/// Parses and runs one command line; `args` includes the program name.
pub fn execute<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::Usage)?;
    run(cli)
}
