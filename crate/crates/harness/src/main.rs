use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hamtomo::bayes::ModelFit;
use hamtomo::control::{estimate_deltas, PhaseOptions};
use hamtomo::model::{apply_gauge, Hamiltonian4};
use hamtomo::reconstruct::{gauge_alignment, reconstruct};
use hamtomo::sim::{prepared_state, read_traces, run_fixed_basis, run_two_step, write_traces, Protocol, SamplingPlan};
use hamtomo::spectral::write_spectrum_csv;
use hamtomo_harness::config::{RunConfig, SeedingOptions};
use hamtomo_harness::generate::{generate_system, GeneratorOptions};
use hamtomo_harness::pipeline::{estimate, run_pipeline, write_outputs, Dumps};
use hamtomo_harness::report::{write_summary, write_tables, ErrorReport};
use hamtomo_harness::{HarnessError, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hamtomo", version, about = "Hamiltonian tomography from simulated measurement traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random test Hamiltonian.
    Generate(GenerateArgs),
    /// Simulate measurement traces.
    Simulate(SimulateArgs),
    /// Estimate frequencies and coefficients from traces.
    Estimate(EstimateArgs),
    /// Reconstruct a Hamiltonian from a fit.
    Reconstruct(ReconstructArgs),
    /// Estimate the gauge phases of a target from two-step traces.
    PhaseEstimate(PhaseArgs),
    /// Run a configured batch and write report.json and tables.csv.
    Pipeline(PipelineArgs),
    /// Summarize an existing report.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator options as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    near_degenerate: bool,
    /// Output JSON file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Hamiltonian JSON; a random system from `--seed` if absent.
    #[arg(long)]
    hamiltonian: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1025)]
    n: usize,
    #[arg(long, default_value_t = 125)]
    ne: u64,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Reference Hamiltonian for the two-step protocol.
    #[arg(long, requires = "t_star")]
    reference: Option<PathBuf>,
    /// Preparation time under the reference.
    #[arg(long)]
    t_star: Option<f64>,
    /// Output trace CSV; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    traces: PathBuf,
    /// Run configuration whose seeding and estimator options apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dump_spectrum: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Ground truth for an error figure.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhaseArgs {
    /// Estimated reference Hamiltonian.
    #[arg(long)]
    reference: PathBuf,
    /// Reconstructed target, in its own gauge.
    #[arg(long)]
    target: PathBuf,
    /// Two-step traces; their preparation time is used.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each cell's power spectrum under `<out>/spectra`.
    #[arg(long)]
    dump_spectrum: bool,
    /// Write each cell's traces under `<out>/traces`.
    #[arg(long)]
    dump_traces: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json of an earlier run.
    input: PathBuf,
    /// Rewrite tables.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut opts: GeneratorOptions = match &args.config {
        Some(p) => read_json(p)?,
        None => GeneratorOptions::default(),
    };
    opts.near_degenerate |= args.near_degenerate;
    let h = generate_system(args.seed, &opts)?;
    emit(&h, args.out.as_deref())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let h = match &args.hamiltonian {
        Some(p) => read_json::<Hamiltonian4>(p)?,
        None => generate_system(args.seed, &GeneratorOptions::default())?,
    };
    let plan = SamplingPlan::new(args.dt, args.n, args.ne, args.seed)?;
    let traces = match (&args.reference, args.t_star) {
        (Some(r), Some(t)) => run_two_step(&read_json(r)?, t, &h, &plan)?,
        _ => run_fixed_basis(&h, &plan)?,
    };
    write_traces(&traces, &args.out)?;
    Ok(())
}

fn estimate_cmd(args: EstimateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let traces = read_traces(&args.traces)?;
    if traces.protocol != Protocol::FixedBasis {
        return Err(HarnessError::Config("estimate needs fixed-basis traces".into()));
    }
    let seeding: SeedingOptions = cfg.seeding;
    let est = estimate(&traces, &seeding, &cfg.estimator)?;
    if let Some(p) = &args.dump_spectrum {
        write_spectrum_csv(&est.seeding.spectrum, p)?;
    }
    eprintln!(
        "{} spectral peaks, {} frequencies, logP = {:.6}",
        est.seeding.peaks.len(),
        est.fit.frequency_count(),
        est.fit.log_likelihood
    );
    emit(&est.fit, args.out.as_deref())
}

#[derive(Serialize)]
struct ReconstructOutput {
    #[serde(flatten)]
    reconstruction: hamtomo::reconstruct::Reconstruction,
    /// Gauge-compensated relative error against `--truth`.
    error: Option<f64>,
}

fn reconstruct_cmd(args: ReconstructArgs) -> Result<()> {
    let fit: ModelFit = read_json(&args.fit)?;
    let rec = reconstruct(&fit)?;
    let error = match &args.truth {
        Some(p) => {
            let truth: Hamiltonian4 = read_json(p)?;
            let e = gauge_alignment(&rec.htilde, &truth).error;
            eprintln!("relative error {:.6} %", 100.0 * e);
            Some(e)
        }
        None => None,
    };
    emit(
        &ReconstructOutput {
            reconstruction: rec,
            error,
        },
        args.out.as_deref(),
    )
}

#[derive(Serialize)]
struct PhaseOutput {
    estimate: hamtomo::control::PhaseEstimate,
    hamiltonian: Hamiltonian4,
}

fn phase_cmd(args: PhaseArgs) -> Result<()> {
    let h0: Hamiltonian4 = read_json(&args.reference)?;
    let target: Hamiltonian4 = read_json(&args.target)?;
    let traces = read_traces(&args.traces)?;
    let t_star = traces
        .preparation_time
        .ok_or_else(|| HarnessError::Config("traces carry no preparation time".into()))?;
    let alphas = prepared_state(&h0, t_star);
    let opts = PhaseOptions {
        seed: args.seed,
        ..Default::default()
    };
    let est = estimate_deltas(&target, &alphas, &traces, &opts)?;
    let hamiltonian = apply_gauge(&target, &est.deltas);
    emit(&PhaseOutput { estimate: est, hamiltonian }, args.out.as_deref())
}

/// Returns whether any cell failed.
fn pipeline(args: PipelineArgs) -> Result<bool> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    let dumps = Dumps {
        spectrum_dir: args.dump_spectrum.then(|| cfg.output_dir.join("spectra")),
        traces_dir: args.dump_traces.then(|| cfg.output_dir.join("traces")),
    };
    let report = run_pipeline(&cfg, &dumps)?;
    write_outputs(&report, &cfg.output_dir)?;
    write_summary(&report, std::io::stdout())?;
    let failures = report.failures();
    if failures > 0 {
        eprintln!("{failures} cells failed; see report.json");
    }
    Ok(failures > 0)
}

fn report(args: ReportArgs) -> Result<()> {
    let report: ErrorReport = read_json(&args.input)?;
    if let Some(p) = &args.out {
        write_tables(&report, p)?;
    }
    write_summary(&report, std::io::stdout())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| false),
        Command::Simulate(a) => simulate(a).map(|_| false),
        Command::Estimate(a) => estimate_cmd(a).map(|_| false),
        Command::Reconstruct(a) => reconstruct_cmd(a).map(|_| false),
        Command::PhaseEstimate(a) => phase_cmd(a).map(|_| false),
        Command::Pipeline(a) => pipeline(a),
        Command::Report(a) => report(a).map(|_| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
