//! Bayesian multi-sinusoid estimation: marginal log-likelihood over the
//! frequencies, closed-form coefficient means and uncertainties, BFGS
//! maximization and model selection for unresolved frequency pairs.
//!
//! The basis for `F` frequencies has `M = 2F + 1` functions ordered
//! `cos w_1 t, sin w_1 t, ..., cos w_F t, sin w_F t, 1`. For `K` traces the
//! log-likelihood is
//!
//! ```text
//! log P = (M - N)/2 * sum_k log10(1 - sum_m h_km^2 / sum_n d_kn^2)
//! ```
//!
//! where `h` are projections on the orthonormalised basis. The bracket is
//! the relative residual after least-squares projection and is evaluated as
//! an explicit residual sum of squares, which keeps it accurate when the fit
//! is nearly exact.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result, TomographyError};
use crate::model::{trace_index, SignalModel, LEVELS, TRACES};
use crate::optim::{minimize, BfgsOptions};
use crate::sim::{Protocol, TraceSet};

/// Smallest admissible `alpha_min / alpha_max` of the Gram matrix.
pub const DEGENERACY_RATIO: f64 = 1e-12;
/// Lower clamp of the likelihood bracket.
pub const BRACKET_FLOOR: f64 = 1e-300;

/// Times and trace values prepared for repeated likelihood evaluation.
#[derive(Clone, Debug)]
pub struct Observations {
    times: Vec<f64>,
    dt: Option<f64>,
    /// `N x K`, one column per trace.
    data: DMatrix<f64>,
    sum_sq: Vec<f64>,
}

impl Observations {
    pub fn new(times: Vec<f64>, traces: &[Vec<f64>]) -> Result<Self> {
        let n = times.len();
        if traces.iter().any(|t| t.len() != n) {
            return Err(invalid("trace length does not match the number of times"));
        }
        let data = DMatrix::from_fn(n, traces.len(), |i, k| traces[k][i]);
        let sum_sq = traces.iter().map(|t| t.iter().map(|x| x * x).sum()).collect();
        let dt = uniform_step(&times);
        Ok(Self {
            times,
            dt,
            data,
            sum_sq,
        })
    }

    pub fn from_traces(ts: &TraceSet) -> Self {
        Self::new(ts.times(), ts.data()).expect("trace set lengths are validated")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn trace_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `T = t_last - t_first`.
    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0) - self.times.first().copied().unwrap_or(0.0)
    }
}

fn uniform_step(times: &[f64]) -> Option<f64> {
    if times.len() < 2 || times[0] != 0.0 {
        return None;
    }
    let dt = times[1] - times[0];
    times
        .iter()
        .enumerate()
        .all(|(i, t)| (t - i as f64 * dt).abs() <= 1e-12 * t.abs().max(1.0))
        .then_some(dt)
}

/// `N x (2F+1)` matrix of basis functions.
pub fn design_matrix(freqs: &[f64], times: &[f64]) -> DMatrix<f64> {
    design_matrix_with(freqs, times, uniform_step(times))
}

fn design_matrix_with(freqs: &[f64], times: &[f64], dt: Option<f64>) -> DMatrix<f64> {
    let n = times.len();
    let m = 2 * freqs.len() + 1;
    let mut g = DMatrix::<f64>::zeros(n, m);
    for (f, &w) in freqs.iter().enumerate() {
        match dt {
            // Rotation recurrence, re-anchored every 64 samples.
            Some(dt) => {
                let (rs, rc) = (w * dt).sin_cos();
                let (mut s, mut c) = (0.0, 1.0);
                for i in 0..n {
                    if i % 64 == 0 {
                        (s, c) = (w * times[i]).sin_cos();
                    }
                    g[(i, 2 * f)] = c;
                    g[(i, 2 * f + 1)] = s;
                    (c, s) = (c * rc - s * rs, s * rc + c * rs);
                }
            }
            None => {
                for (i, t) in times.iter().enumerate() {
                    let (s, c) = (w * t).sin_cos();
                    g[(i, 2 * f)] = c;
                    g[(i, 2 * f + 1)] = s;
                }
            }
        }
    }
    for i in 0..n {
        g[(i, m - 1)] = 1.0;
    }
    g
}

/// Basis functions, their Gram matrix and its eigendecomposition.
#[derive(Clone, Debug)]
pub struct BasisSet {
    pub frequencies: Vec<f64>,
    /// `N x M` values `g_m(t_n)`.
    pub functions: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    /// Gram eigenvalues `alpha_j`.
    pub eigenvalues: DVector<f64>,
    /// Column `j` is the eigenvector `e_{. j}`.
    pub eigenvectors: DMatrix<f64>,
}

impl BasisSet {
    /// `H_j(t_n) = alpha_j^{-1/2} sum_m e_{mj} g_m(t_n)`.
    pub fn orthonormal(&self) -> DMatrix<f64> {
        let mut h = &self.functions * &self.eigenvectors;
        for (j, a) in self.eigenvalues.iter().enumerate() {
            h.column_mut(j).scale_mut(1.0 / a.sqrt());
        }
        h
    }

    /// `diag(G^{-1})`.
    pub fn inverse_gram_diagonal(&self) -> Vec<f64> {
        let m = self.eigenvalues.len();
        (0..m)
            .map(|r| {
                (0..m)
                    .map(|j| self.eigenvectors[(r, j)].powi(2) / self.eigenvalues[j])
                    .sum()
            })
            .collect()
    }
}

fn check_frequencies(freqs: &[f64], n: usize) -> Result<()> {
    if freqs.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(invalid(format!("frequencies must be positive and finite: {freqs:?}")));
    }
    if 2 * freqs.len() + 1 > n {
        return Err(invalid(format!(
            "{} frequencies need at least {} samples, got {n}",
            freqs.len(),
            2 * freqs.len() + 1
        )));
    }
    Ok(())
}

pub fn build_basis(freqs: &[f64], times: &[f64]) -> Result<BasisSet> {
    check_frequencies(freqs, times.len())?;
    basis_from_functions(freqs, design_matrix(freqs, times))
}

fn basis_from_functions(freqs: &[f64], functions: DMatrix<f64>) -> Result<BasisSet> {
    let gram = functions.tr_mul(&functions);
    let eig = SymmetricEigen::new(gram.clone());
    let amax = eig.eigenvalues.max();
    let amin = eig.eigenvalues.min();
    let ratio = amin / amax;
    if !(ratio >= DEGENERACY_RATIO) {
        return Err(TomographyError::DegenerateBasis {
            ratio,
            threshold: DEGENERACY_RATIO,
        });
    }
    Ok(BasisSet {
        frequencies: freqs.to_vec(),
        functions,
        gram,
        eigenvalues: eig.eigenvalues,
        eigenvectors: eig.eigenvectors,
    })
}

/// Least-squares projection of every trace onto a basis.
struct Projection {
    basis: BasisSet,
    /// `M x K` optimal amplitudes.
    x: DMatrix<f64>,
    /// Residual sum of squares per trace.
    residual: Vec<f64>,
}

/// Frequencies are sorted first so that permuted inputs give bitwise
/// identical results.
fn project(freqs: &[f64], obs: &Observations) -> Result<Projection> {
    check_frequencies(freqs, obs.len())?;
    let mut sorted = freqs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let g = design_matrix_with(&sorted, &obs.times, obs.dt);
    let basis = basis_from_functions(&sorted, g)?;
    let q = basis.functions.tr_mul(&obs.data);
    // x = E diag(1/alpha) E^T q
    let mut y = basis.eigenvectors.tr_mul(&q);
    for (j, a) in basis.eigenvalues.iter().enumerate() {
        y.row_mut(j).scale_mut(1.0 / a);
    }
    let x = &basis.eigenvectors * y;
    let r = &obs.data - &basis.functions * &x;
    let residual = r.column_iter().map(|c| c.norm_squared()).collect();
    Ok(Projection { basis, x, residual })
}

/// Log-likelihood value and whether any bracket had to be clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    pub clamped: bool,
}

fn log_likelihood_of(proj: &Projection, obs: &Observations) -> LogLikelihood {
    let m = proj.basis.eigenvalues.len() as f64;
    let n = obs.len() as f64;
    let mut acc = 0.0;
    let mut clamped = false;
    for (r, d2) in proj.residual.iter().zip(&obs.sum_sq) {
        // An all-zero trace carries no information about the frequencies.
        if *d2 == 0.0 {
            continue;
        }
        let bracket = r / d2;
        if bracket <= BRACKET_FLOOR {
            clamped = true;
        }
        acc += bracket.max(BRACKET_FLOOR).log10();
    }
    LogLikelihood {
        value: 0.5 * (m - n) * acc,
        clamped,
    }
}

pub fn log_likelihood(freqs: &[f64], obs: &Observations) -> Result<LogLikelihood> {
    let proj = project(freqs, obs)?;
    Ok(log_likelihood_of(&proj, obs))
}

/// Status flags attached to a fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    /// Some likelihood bracket was at or below the clamp.
    pub clamped_likelihood: bool,
    /// Some noise-variance estimate was clamped to zero.
    pub overfit: bool,
    /// The optimizer stopped without meeting a convergence criterion.
    pub not_converged: bool,
}

/// Frequencies, likelihood and per-trace coefficient estimates.
///
/// Coefficients follow the trace model `c + 2 sum_m (a_m cos + b_m sin)`,
/// so `a` and `b` are half the fitted basis amplitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub frequencies: Vec<f64>,
    pub log_likelihood: f64,
    /// `a[trace][m]`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub a_err: Vec<Vec<f64>>,
    pub b_err: Vec<Vec<f64>>,
    pub c_err: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Signal length `T` of the data.
    pub signal_length: f64,
    pub flags: FitFlags,
}

impl ModelFit {
    pub fn frequency_count(&self) -> usize {
        self.frequencies.len()
    }

    /// Fit carrying the exact coefficients of a signal model, with zero
    /// uncertainties.
    pub fn from_signal_model(m: &SignalModel, signal_length: f64) -> Self {
        let f = m.frequencies.len();
        Self {
            frequencies: m.frequencies.to_vec(),
            log_likelihood: 0.0,
            a: m.a.iter().map(|r| r.to_vec()).collect(),
            b: m.b.iter().map(|r| r.to_vec()).collect(),
            c: m.c.to_vec(),
            a_err: vec![vec![0.0; f]; TRACES],
            b_err: vec![vec![0.0; f]; TRACES],
            c_err: vec![0.0; TRACES],
            sigma2: vec![0.0; TRACES],
            signal_length,
            flags: FitFlags::default(),
        }
    }
}

fn fit_from_projection(proj: &Projection, obs: &Observations, symmetrize: bool) -> ModelFit {
    let ll = log_likelihood_of(proj, obs);
    let f = proj.basis.frequencies.len();
    let m = 2 * f + 1;
    let k = obs.trace_count();
    let dof = obs.len() as f64 - (m as f64 + 1.0);
    let inv_diag = proj.basis.inverse_gram_diagonal();
    let mut fit = ModelFit {
        frequencies: proj.basis.frequencies.clone(),
        log_likelihood: ll.value,
        a: vec![vec![0.0; f]; k],
        b: vec![vec![0.0; f]; k],
        c: vec![0.0; k],
        a_err: vec![vec![0.0; f]; k],
        b_err: vec![vec![0.0; f]; k],
        c_err: vec![0.0; k],
        sigma2: vec![0.0; k],
        signal_length: obs.duration(),
        flags: FitFlags {
            clamped_likelihood: ll.clamped,
            ..Default::default()
        },
    };
    for t in 0..k {
        let mut s2 = if dof > 0.0 { proj.residual[t] / dof } else { 0.0 };
        if !(s2 > 0.0) && obs.sum_sq[t] > 0.0 {
            fit.flags.overfit = true;
            s2 = s2.max(0.0);
        }
        fit.sigma2[t] = s2;
        for j in 0..f {
            fit.a[t][j] = 0.5 * proj.x[(2 * j, t)];
            fit.b[t][j] = 0.5 * proj.x[(2 * j + 1, t)];
            fit.a_err[t][j] = 0.5 * (s2 * inv_diag[2 * j]).sqrt();
            fit.b_err[t][j] = 0.5 * (s2 * inv_diag[2 * j + 1]).sqrt();
        }
        fit.c[t] = proj.x[(m - 1, t)];
        fit.c_err[t] = (s2 * inv_diag[m - 1]).sqrt();
    }
    if symmetrize && k == TRACES {
        symmetrize_fit(&mut fit);
    }
    fit
}

/// `a_kl = a_lk`, `b_kl = -b_lk`, `c_kl = c_lk` by averaging; errors of
/// averaged off-diagonal entries combine in quadrature.
fn symmetrize_fit(fit: &mut ModelFit) {
    let f = fit.frequencies.len();
    for k in 0..LEVELS {
        for l in k..LEVELS {
            let i = trace_index(k, l);
            let j = trace_index(l, k);
            let comb = |x: f64, y: f64| 0.5 * (x * x + y * y).sqrt();
            for m in 0..f {
                let a = 0.5 * (fit.a[i][m] + fit.a[j][m]);
                let b = 0.5 * (fit.b[i][m] - fit.b[j][m]);
                fit.a[i][m] = a;
                fit.a[j][m] = a;
                fit.b[i][m] = b;
                fit.b[j][m] = -b;
                if i != j {
                    let ea = comb(fit.a_err[i][m], fit.a_err[j][m]);
                    let eb = comb(fit.b_err[i][m], fit.b_err[j][m]);
                    fit.a_err[i][m] = ea;
                    fit.a_err[j][m] = ea;
                    fit.b_err[i][m] = eb;
                    fit.b_err[j][m] = eb;
                }
            }
            let c = 0.5 * (fit.c[i] + fit.c[j]);
            fit.c[i] = c;
            fit.c[j] = c;
            if i != j {
                let ec = comb(fit.c_err[i], fit.c_err[j]);
                fit.c_err[i] = ec;
                fit.c_err[j] = ec;
            }
        }
    }
}

/// Coefficients at fixed frequencies. Fixed-basis trace sets are
/// symmetrized across `(k, l)` and `(l, k)`.
pub fn estimate_coefficients(freqs: &[f64], traces: &TraceSet) -> Result<ModelFit> {
    let obs = Observations::from_traces(traces);
    estimate_coefficients_obs(freqs, &obs, traces.protocol == Protocol::FixedBasis)
}

pub fn estimate_coefficients_obs(freqs: &[f64], obs: &Observations, symmetrize: bool) -> Result<ModelFit> {
    let proj = project(freqs, obs)?;
    Ok(fit_from_projection(&proj, obs, symmetrize))
}

/// Tunables of the frequency search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    /// Extra BFGS runs from jittered seeds.
    pub restarts: usize,
    /// Jitter half-width in units of `pi / T`.
    pub jitter: f64,
    /// Finite-difference step in units of `2 pi / T`.
    pub fd_step: f64,
    /// First BFGS step (infinity norm) in units of `pi / T`.
    pub initial_step: f64,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Points per axis of the split-search grid.
    pub split_grid: usize,
    /// Half-width of the split-search interval in units of `1 / T`.
    pub split_half_width: f64,
    /// Largest model size considered by the split search.
    pub max_frequencies: usize,
    /// Seed of the jitter stream.
    pub seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            jitter: 0.5,
            fd_step: 1e-6,
            initial_step: 0.1,
            grad_tol: 1e-7,
            rel_tol: 1e-12,
            max_iter: 200,
            split_grid: 21,
            split_half_width: 10.0,
            max_frequencies: 6,
            seed: 0,
        }
    }
}

/// Result of one local maximization.
#[derive(Clone, Debug)]
struct LocalOptimum {
    freqs: Vec<f64>,
    log_p: f64,
    converged: bool,
}

fn neg_log_p(obs: &Observations) -> impl Fn(&[f64]) -> f64 + '_ {
    move |w: &[f64]| match log_likelihood(w, obs) {
        Ok(ll) => -ll.value,
        Err(_) => f64::INFINITY,
    }
}

fn local_maximize(seed: &[f64], obs: &Observations, opts: &EstimatorOptions) -> LocalOptimum {
    let t = obs.duration();
    let bfgs = BfgsOptions {
        grad_tol: opts.grad_tol,
        rel_f_tol: opts.rel_tol,
        max_iter: opts.max_iter,
        initial_step: opts.initial_step * PI / t,
        fd_steps: vec![opts.fd_step * 2.0 * PI / t],
        ..Default::default()
    };
    let f = neg_log_p(obs);
    let r = minimize(&f, seed, &bfgs);
    let mut freqs = r.x;
    freqs.sort_by(f64::total_cmp);
    LocalOptimum {
        freqs,
        log_p: -r.f,
        converged: r.converged,
    }
}

/// Maximize the log-likelihood from `seed` and from `restarts` jittered
/// copies of it; the best optimum wins.
pub fn optimize_frequencies(seed: &[f64], traces: &TraceSet, opts: &EstimatorOptions) -> Result<ModelFit> {
    let obs = Observations::from_traces(traces);
    optimize_frequencies_obs(seed, &obs, opts, traces.protocol == Protocol::FixedBasis)
}

pub fn optimize_frequencies_obs(
    seed: &[f64],
    obs: &Observations,
    opts: &EstimatorOptions,
    symmetrize: bool,
) -> Result<ModelFit> {
    if seed.is_empty() {
        return Err(invalid("frequency seed is empty"));
    }
    let mut start = seed.to_vec();
    start.sort_by(f64::total_cmp);
    // Validates the seed itself.
    log_likelihood(&start, obs)?;

    let half = opts.jitter * PI / obs.duration();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![start.clone()];
    for _ in 0..opts.restarts {
        let s: Vec<f64> = start
            .iter()
            .map(|w| (w + rng.random_range(-half..=half)).max(f64::MIN_POSITIVE))
            .collect();
        starts.push(s);
    }
    let results: Vec<LocalOptimum> = starts
        .par_iter()
        .map(|s| local_maximize(s, obs, opts))
        .collect();
    let best = results
        .into_iter()
        .filter(|r| r.log_p.is_finite())
        .max_by(|a, b| a.log_p.total_cmp(&b.log_p))
        .ok_or_else(|| invalid("no finite likelihood reached from the seed"))?;
    let mut fit = estimate_coefficients_obs(&best.freqs, obs, symmetrize)?;
    fit.flags.not_converged = !best.converged;
    Ok(fit)
}

/// One trial split of frequency `index` into a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    /// Model size before the split.
    pub from_frequencies: usize,
    pub split_index: usize,
    /// Best grid point `(w, w')`.
    pub grid_pair: (f64, f64),
    pub frequencies: Vec<f64>,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub fit: ModelFit,
    /// Every optimized candidate, in evaluation order.
    pub candidates: Vec<SplitCandidate>,
}

/// Resolve unresolved frequency pairs: split each frequency in turn over a
/// coarse grid, optimize the best grid point, and keep the best model while
/// it beats the incumbent, until `max_frequencies` is reached.
pub fn refine_degenerate(fit: &ModelFit, traces: &TraceSet, opts: &EstimatorOptions) -> Result<Refinement> {
    let obs = Observations::from_traces(traces);
    refine_degenerate_obs(fit, &obs, opts, traces.protocol == Protocol::FixedBasis)
}

pub fn refine_degenerate_obs(
    fit: &ModelFit,
    obs: &Observations,
    opts: &EstimatorOptions,
    symmetrize: bool,
) -> Result<Refinement> {
    let mut incumbent = fit.clone();
    let mut candidates = Vec::new();
    let t = obs.duration();
    let half = opts.split_half_width / t;
    let steps = opts.split_grid.max(2);

    while incumbent.frequencies.len() < opts.max_frequencies {
        let base = incumbent.frequencies.clone();
        let round: Vec<SplitCandidate> = (0..base.len())
            .into_par_iter()
            .filter_map(|idx| {
                let lo = base[idx] - half;
                let grid: Vec<f64> = (0..steps)
                    .map(|i| lo + 2.0 * half * i as f64 / (steps - 1) as f64)
                    .filter(|w| *w > 0.0)
                    .collect();
                let mut best: Option<((f64, f64), f64)> = None;
                for i in 0..grid.len() {
                    for j in i + 1..grid.len() {
                        let mut trial = base.clone();
                        trial[idx] = grid[i];
                        trial.push(grid[j]);
                        if let Ok(ll) = log_likelihood(&trial, obs) {
                            if best.is_none_or(|b| ll.value > b.1) {
                                best = Some(((grid[i], grid[j]), ll.value));
                            }
                        }
                    }
                }
                let ((w1, w2), _) = best?;
                let mut seed = base.clone();
                seed[idx] = w1;
                seed.push(w2);
                let local = local_maximize(&seed, obs, opts);
                local.log_p.is_finite().then_some(SplitCandidate {
                    from_frequencies: base.len(),
                    split_index: idx,
                    grid_pair: (w1, w2),
                    frequencies: local.freqs,
                    log_likelihood: local.log_p,
                })
            })
            .collect();
        let winner = round
            .iter()
            .max_by(|a, b| a.log_likelihood.total_cmp(&b.log_likelihood))
            .cloned();
        candidates.extend(round);
        match winner {
            Some(w) if w.log_likelihood > incumbent.log_likelihood => {
                incumbent = estimate_coefficients_obs(&w.frequencies, obs, symmetrize)?;
            }
            _ => break,
        }
    }
    Ok(Refinement {
        fit: incumbent,
        candidates,
    })
}
