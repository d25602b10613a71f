//! One grid cell: simulate, seed from the spectrum, optimize, refine,
//! reconstruct and score against the ground truth. The batch driver runs
//! every cell of a `RunConfig` and the optional gauge-phase stage.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use hamtomo::bayes::{optimize_frequencies, refine_degenerate, EstimatorOptions, ModelFit};
use hamtomo::control::{full_tomography, FullTomography, select_balanced_time, PhaseOptions, SimulatedExperiment};
use hamtomo::model::{apply_gauge, signal_model_of, GaugePhases, Hamiltonian4, SignalModel, TRACES};
use hamtomo::reconstruct::{gauge_alignment, reconstruct, reflect_map, LevelDiagnostic};
use hamtomo::sim::{run_fixed_basis, write_traces, SamplingPlan, TraceSet};
use hamtomo::spectral::{
    default_floor, find_peaks_pruned, power_spectrum_with, write_spectrum_csv, PowerSpectrum, SpectrumOptions, Window,
    DEFAULT_MAX_PEAKS,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{cell_seed, derive_seed, stream, system_seed, PhaseStageConfig, RunConfig, SeedingOptions};
use crate::generate::generate_system;
use crate::report::{aggregate_cells, aggregate_phase, ErrorReport, PhaseReport, SCHEMA_VERSION};
use crate::{HarnessError, Result};

/// Spectrum, floor and seed frequencies of a trace set.
#[derive(Clone, Debug)]
pub struct Seeding {
    pub spectrum: PowerSpectrum,
    pub floor: f64,
    pub peaks: Vec<f64>,
}

pub fn seed_frequencies(traces: &TraceSet, opts: &SeedingOptions) -> Result<Seeding> {
    let sopts = SpectrumOptions {
        resolution_factor: opts.resolution_factor,
        window: if opts.hann { Window::Hann } else { Window::Rectangular },
        remove_mean: opts.hann,
        keep_per_trace: false,
    };
    let spectrum = power_spectrum_with(traces, opts.omega_max, &sopts)?;
    let floor = opts.floor_scale * default_floor(&spectrum, opts.dead_zone);
    let peaks = find_peaks_pruned(
        &spectrum,
        floor,
        DEFAULT_MAX_PEAKS,
        opts.dead_zone,
        sopts.window,
        traces.plan.duration(),
        opts.leakage_margin,
    );
    Ok(Seeding { spectrum, floor, peaks })
}

/// Output of the estimation stage.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub seeding: Seeding,
    pub fit: ModelFit,
    /// Whether the split search added frequencies.
    pub refined: bool,
}

/// Estimator options for traces sampled with `plan_seed`; the jitter
/// stream is derived from it so file-based and in-process runs agree.
pub fn estimator_options_for(plan_seed: u64, base: &EstimatorOptions) -> EstimatorOptions {
    EstimatorOptions {
        seed: derive_seed(&[plan_seed, stream::ESTIMATOR]),
        ..base.clone()
    }
}

/// Spectral seeding, likelihood maximization and, with fewer than six
/// peaks, the split search.
pub fn estimate(traces: &TraceSet, seeding_opts: &SeedingOptions, base: &EstimatorOptions) -> Result<Estimate> {
    let seeding = seed_frequencies(traces, seeding_opts)?;
    estimate_from(traces, seeding, base)
}

pub fn estimate_from(traces: &TraceSet, seeding: Seeding, base: &EstimatorOptions) -> Result<Estimate> {
    if seeding.peaks.is_empty() {
        return Err(HarnessError::Numerical("no spectral peaks above the floor".into()));
    }
    let opts = estimator_options_for(traces.plan.seed, base);
    let mut fit = optimize_frequencies(&seeding.peaks, traces, &opts)?;
    let mut refined = false;
    if fit.frequency_count() < DEFAULT_MAX_PEAKS {
        let r = refine_degenerate(&fit, traces, &opts)?;
        refined = r.fit.frequency_count() > fit.frequency_count();
        fit = r.fit;
    }
    Ok(Estimate { seeding, fit, refined })
}

/// `100 max_m |1 - w_est / w_m|`. Six estimates are paired in sorted
/// order; otherwise each true frequency takes its nearest estimate.
pub fn eps_max_pct(est: &[f64], truth: &[f64]) -> Option<f64> {
    if est.is_empty() {
        return None;
    }
    let mut e = est.to_vec();
    e.sort_by(f64::total_cmp);
    let worst = if e.len() == truth.len() {
        e.iter().zip(truth).map(|(a, w)| (1.0 - a / w).abs()).fold(0.0, f64::max)
    } else {
        truth
            .iter()
            .map(|w| e.iter().map(|a| (1.0 - a / w).abs()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(100.0 * worst)
}

/// `100 median |1 - x_est / x|` over entries with nonzero truth.
pub fn eps_med_pct(est: &[f64], truth: &[f64]) -> Option<f64> {
    let errs: Vec<f64> = est
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t != 0.0)
        .map(|(e, t)| (1.0 - e / t).abs())
        .collect();
    crate::stats::median(&errs).map(|m| 100.0 * m)
}

/// Outcome of one `(system, N, Ne)` cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub system: usize,
    pub n: usize,
    pub ne: u64,
    pub seed: u64,
    pub peaks: usize,
    pub frequencies: usize,
    pub refined: bool,
    pub eps_max_omega0_pct: Option<f64>,
    pub eps_max_omega_opt_pct: Option<f64>,
    pub eps_med_a_pct: Option<f64>,
    pub eps_med_b_pct: Option<f64>,
    pub eps_med_c_pct: Option<f64>,
    pub mean_sigma2: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub arrangement: Option<usize>,
    pub arrangement_correct: Option<bool>,
    pub level_diagnostic: Option<LevelDiagnostic>,
    /// Sum-rule violation of the phase table before refinement.
    pub phase_violation: Option<f64>,
    pub low_confidence_pairs: Option<usize>,
    /// Gauge-compensated relative error of the reconstruction, in percent.
    pub h_error_pct: Option<f64>,
    pub error: Option<String>,
}

/// A cell result with the reconstructed matrix, if any.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub result: CellResult,
    pub htilde: Option<Hamiltonian4>,
}

/// Extra files written per cell.
#[derive(Clone, Debug, Default)]
pub struct Dumps {
    pub spectrum_dir: Option<PathBuf>,
    pub traces_dir: Option<PathBuf>,
}

fn cell_name(system: usize, n: usize, ne: u64) -> String {
    format!("sys{system:03}_N{n}_Ne{ne}")
}

/// Whether an estimated assignment names the true transitions in either
/// orientation.
fn arrangement_matches(model: &SignalModel, map: &[(usize, usize); 6]) -> bool {
    *map == model.transitions || reflect_map(map) == model.transitions
}

/// Run one cell against the ground truth `h`.
pub fn run_cell(
    h: &Hamiltonian4,
    system: usize,
    n: usize,
    ne: u64,
    seed: u64,
    cfg: &RunConfig,
    dumps: &Dumps,
) -> CellOutput {
    let mut result = CellResult {
        system,
        n,
        ne,
        seed,
        ..Default::default()
    };
    let htilde = match run_cell_inner(h, &mut result, cfg, dumps) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("system {system}, N = {n}, Ne = {ne}: {e}");
            result.error = Some(e.to_string());
            None
        }
    };
    log::info!(
        "system {system}, N = {n}, Ne = {ne}: {} peaks, H error {:?} %",
        result.peaks,
        result.h_error_pct
    );
    CellOutput { result, htilde }
}

fn run_cell_inner(
    h: &Hamiltonian4,
    out: &mut CellResult,
    cfg: &RunConfig,
    dumps: &Dumps,
) -> Result<Option<Hamiltonian4>> {
    let truth = signal_model_of(h)?;
    let plan = SamplingPlan::new(cfg.dt, out.n, out.ne, out.seed)?;
    let traces = run_fixed_basis(h, &plan)?;
    let name = cell_name(out.system, out.n, out.ne);
    if let Some(dir) = &dumps.traces_dir {
        write_traces(&traces, &dir.join(format!("{name}.csv")))?;
    }
    let seeding = seed_frequencies(&traces, &cfg.seeding)?;
    if let Some(dir) = &dumps.spectrum_dir {
        write_spectrum_csv(&seeding.spectrum, &dir.join(format!("{name}.csv")))?;
    }
    out.peaks = seeding.peaks.len();
    out.eps_max_omega0_pct = eps_max_pct(&seeding.peaks, &truth.frequencies);
    let est = estimate_from(&traces, seeding, &cfg.estimator)?;
    let fit = &est.fit;
    out.refined = est.refined;
    out.frequencies = fit.frequency_count();
    out.log_likelihood = Some(fit.log_likelihood);
    out.eps_max_omega_opt_pct = eps_max_pct(&fit.frequencies, &truth.frequencies);
    out.mean_sigma2 = crate::stats::mean(&fit.sigma2);
    if fit.frequency_count() != 6 {
        return Err(HarnessError::Numerical(format!(
            "estimated {} frequencies instead of six",
            fit.frequency_count()
        )));
    }
    let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
    let flat_true = |m: &[[f64; 6]; TRACES]| m.iter().flatten().copied().collect::<Vec<f64>>();
    out.eps_med_a_pct = eps_med_pct(&flat(&fit.a), &flat_true(&truth.a));
    out.eps_med_b_pct = eps_med_pct(&flat(&fit.b), &flat_true(&truth.b));
    out.eps_med_c_pct = eps_med_pct(&fit.c, &truth.c);
    if !cfg.reconstruct {
        return Ok(None);
    }
    let rec = reconstruct(fit)?;
    out.arrangement = Some(rec.assignment.arrangement);
    out.arrangement_correct = Some(arrangement_matches(&truth, &rec.assignment.map));
    out.level_diagnostic = rec.assignment.diagnostic.clone();
    out.phase_violation = Some(rec.raw_violation);
    out.low_confidence_pairs = Some(rec.overlaps.low_confidence.iter().filter(|&&b| b).count());
    out.h_error_pct = Some(100.0 * gauge_alignment(&rec.htilde, h).error);
    Ok(Some(rec.htilde))
}

/// Target system with its prior estimate, scored in the frame of the
/// reference estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub system: usize,
    pub n: usize,
    pub ne: u64,
    /// Relative error in percent, without gauge compensation beyond the
    /// reference frame.
    pub h_error_pct: Option<f64>,
    /// Whether the inversion image of the prior estimate fitted better
    /// against the truth.
    pub inverted_branch: bool,
    pub residual: Option<f64>,
    pub restarts_agreeing: Option<usize>,
    pub low_confidence: bool,
    pub error: Option<String>,
}

/// The truth expressed in the gauge and branch of the reference estimate:
/// if `h0_true ~ apply_gauge(b(h0_est), g)`, targets map to
/// `b(apply_gauge(h_true, -g))`.
pub fn reference_frame(h0_est: &Hamiltonian4, h0_true: &Hamiltonian4, h_true: &Hamiltonian4) -> Hamiltonian4 {
    let al = gauge_alignment(h0_est, h0_true);
    let d = al.gauge.as_array();
    let back = GaugePhases::new(-d[0], -d[1], -d[2]);
    let moved = apply_gauge(&h_true.traceless(), &back);
    if al.inverted {
        moved.inversion_image()
    } else {
        moved
    }
}

fn relative_error(est: &Hamiltonian4, reference: &Hamiltonian4) -> f64 {
    let diff = est.traceless().matrix() - reference.traceless().matrix();
    let norm = reference.traceless().operator_norm();
    Hamiltonian4::hermitize(&diff).operator_norm() / norm
}

/// Gauge-phase estimation for one target at one trace length. Both
/// branches of the prior estimate fit the data equally well; the one
/// closer to the truth is reported.
#[allow(clippy::too_many_arguments)]
pub fn run_phase_cell(
    h0_true: &Hamiltonian4,
    h0_est: &Hamiltonian4,
    hf_true: &Hamiltonian4,
    htilde_f: &Hamiltonian4,
    system: usize,
    n: usize,
    ne: u64,
    dt: f64,
    seed: u64,
    opts: &PhaseOptions,
) -> PhaseResult {
    let mut out = PhaseResult {
        system,
        n,
        ne,
        ..Default::default()
    };
    let run = || -> Result<(f64, bool, FullTomography)> {
        let plan = SamplingPlan::new(dt, n, ne, seed)?;
        let reference = reference_frame(h0_est, h0_true, hf_true);
        let mut best: Option<(f64, bool, FullTomography)> = None;
        for (inverted, branch) in [(false, htilde_f.clone()), (true, htilde_f.inversion_image())] {
            let mut exp = SimulatedExperiment {
                h0: h0_true.clone(),
                hf: hf_true.clone(),
                plan,
            };
            let ft = full_tomography(h0_est, &branch, &mut exp, opts)?;
            let err = relative_error(&ft.hf, &reference);
            if best.as_ref().is_none_or(|b| err < b.0) {
                best = Some((err, inverted, ft));
            }
        }
        Ok(best.expect("two branches evaluated"))
    };
    match run() {
        Ok((err, inverted, ft)) => {
            out.h_error_pct = Some(100.0 * err);
            out.inverted_branch = inverted;
            out.residual = Some(ft.estimate.residual);
            out.restarts_agreeing = Some(ft.estimate.restarts_agreeing);
            out.low_confidence = ft.estimate.low_confidence;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Ground-truth systems of a batch.
pub fn batch_systems(cfg: &RunConfig) -> Result<Vec<Hamiltonian4>> {
    (0..cfg.n_systems)
        .map(|i| generate_system(system_seed(cfg.seed, i), &cfg.generator))
        .collect()
}

pub fn reference_system(cfg: &RunConfig) -> Result<Hamiltonian4> {
    generate_system(derive_seed(&[cfg.seed, stream::REFERENCE]), &cfg.generator)
}

fn run_phase_stage(
    cfg: &RunConfig,
    stage: &PhaseStageConfig,
    systems: &[Hamiltonian4],
    cache: &HashMap<(usize, usize, u64), Option<Hamiltonian4>>,
) -> Result<PhaseReport> {
    let h0 = reference_system(cfg)?;
    let ref_seed = derive_seed(&[cfg.seed, stream::REFERENCE, stage.prior_n as u64, stage.prior_ne]);
    let ref_cell = run_cell(&h0, usize::MAX, stage.prior_n, stage.prior_ne, ref_seed, cfg, &Dumps::default());
    let h0_est = ref_cell.htilde.ok_or_else(|| {
        HarnessError::Numerical(format!(
            "reference reconstruction failed: {}",
            ref_cell.result.error.clone().unwrap_or_default()
        ))
    })?;
    let balanced = select_balanced_time(&h0_est, stage.options.t_max, stage.options.scan_step)?;

    let priors: Vec<Option<Hamiltonian4>> = systems
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            if let Some(cached) = cache.get(&(i, stage.prior_n, stage.prior_ne)) {
                return cached.clone();
            }
            let seed = cell_seed(cfg.seed, i, stage.prior_n, stage.prior_ne);
            run_cell(h, i, stage.prior_n, stage.prior_ne, seed, cfg, &Dumps::default()).htilde
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..systems.len())
        .flat_map(|i| stage.n_list.iter().map(move |&n| (i, n)))
        .collect();
    let results: Vec<PhaseResult> = jobs
        .par_iter()
        .map(|&(i, n)| match &priors[i] {
            Some(prior) => {
                let seed = derive_seed(&[cfg.seed, stream::PHASE, i as u64, n as u64, stage.ne]);
                let opts = PhaseOptions {
                    seed: derive_seed(&[seed, stream::ESTIMATOR]),
                    ..stage.options.clone()
                };
                run_phase_cell(&h0, &h0_est, &systems[i], prior, i, n, stage.ne, cfg.dt, seed, &opts)
            }
            None => PhaseResult {
                system: i,
                n,
                ne: stage.ne,
                error: Some("prior reconstruction failed".into()),
                ..Default::default()
            },
        })
        .collect();
    let aggregates = aggregate_phase(&results, &stage.n_list);
    Ok(PhaseReport {
        reference_error_pct: ref_cell.result.h_error_pct,
        t_star: balanced.t_star,
        imbalance: balanced.imbalance,
        results,
        aggregates,
    })
}

/// Run every cell of the grid and, if configured, the phase stage.
pub fn run_pipeline(cfg: &RunConfig, dumps: &Dumps) -> Result<ErrorReport> {
    cfg.validate()?;
    for dir in [&dumps.spectrum_dir, &dumps.traces_dir].into_iter().flatten() {
        std::fs::create_dir_all(dir)?;
    }
    let systems = batch_systems(cfg)?;
    let jobs: Vec<(usize, usize, u64)> = (0..systems.len())
        .flat_map(|i| {
            cfg.n_list
                .iter()
                .flat_map(move |&n| cfg.ne_list.iter().map(move |&ne| (i, n, ne)))
        })
        .collect();
    let outputs: Vec<CellOutput> = jobs
        .par_iter()
        .map(|&(i, n, ne)| run_cell(&systems[i], i, n, ne, cell_seed(cfg.seed, i, n, ne), cfg, dumps))
        .collect();
    let cache: HashMap<(usize, usize, u64), Option<Hamiltonian4>> = outputs
        .iter()
        .map(|o| ((o.result.system, o.result.n, o.result.ne), o.htilde.clone()))
        .collect();
    let cells: Vec<CellResult> = outputs.into_iter().map(|o| o.result).collect();
    let aggregates = aggregate_cells(&cells, &cfg.n_list, &cfg.ne_list);
    let (phase, phase_error) = match &cfg.phase_stage {
        Some(stage) => match run_phase_stage(cfg, stage, &systems, &cache) {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, None),
    };
    Ok(ErrorReport {
        schema_version: SCHEMA_VERSION,
        rng_algorithm: hamtomo::sim::RNG_ALGORITHM.to_string(),
        config: cfg.clone(),
        cells,
        aggregates,
        phase,
        phase_error,
    })
}

/// Write `report.json` and `tables.csv` into `dir`.
pub fn write_outputs(report: &ErrorReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    crate::report::write_tables(report, &dir.join("tables.csv"))
}
