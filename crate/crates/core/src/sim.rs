//! Measurement simulation: fixed-basis and two-step (superposition)
//! protocols with finite-ensemble multinomial noise, the analytic
//! superposition signal, and the trace file format.
//!
//! Randomness. Every (initial state, sample index) cell draws from its own
//! `ChaCha8Rng` stream keyed by the plan seed and the cell id, so a trace set
//! is a pure function of `(H, plan)` regardless of evaluation order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TomographyError};
use crate::model::{
    apply_gauge, eigendecompose, trace_index, EigenSystem, GaugePhases, Hamiltonian4, C64,
    LEVELS, TRACES,
};
use crate::propagate::{evolution_operator, transition_probabilities};

/// Description of the pseudo-random generator recorded alongside outputs.
pub const RNG_ALGORITHM: &str =
    "ChaCha8Rng (rand_chacha 0.9), seed_from_u64(seed), one stream per (state, sample) cell; \
     multinomial drawn as sequential binomials (rand_distr 0.5)";

/// Probabilities may leave `[0, 1]` by this much from round-off.
pub const PROBABILITY_TOL: f64 = 1e-9;

/// Sampling grid and ensemble size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Time step.
    pub dt: f64,
    /// Number of samples; times are `n dt` for `n = 0..n`.
    pub n: usize,
    /// Ensemble size per sample.
    pub ne: u64,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(dt: f64, n: usize, ne: u64, seed: u64) -> Result<Self> {
        let plan = Self { dt, n, ne, seed };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if self.n < 2 {
            return Err(invalid(format!("need at least two samples, got {}", self.n)));
        }
        if self.ne < 1 {
            return Err(invalid("ensemble size must be at least 1"));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|i| i as f64 * self.dt).collect()
    }

    /// Signal length `T = (N - 1) dt`.
    pub fn duration(&self) -> f64 {
        (self.n - 1) as f64 * self.dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Sixteen traces: every basis state prepared and measured in the basis.
    FixedBasis,
    /// Four traces: `|1>` evolved under a reference Hamiltonian for a
    /// preparation time, then under the target Hamiltonian.
    Superposition,
}

impl Protocol {
    pub fn trace_count(&self) -> usize {
        match self {
            Protocol::FixedBasis => TRACES,
            Protocol::Superposition => LEVELS,
        }
    }
}

/// Sampled (or exact) population traces.
///
/// Fixed-basis sets hold sixteen traces indexed by [`trace_index`];
/// superposition sets hold four, one per outcome. Sampled sets contain only
/// multiples of `1/Ne`; exact sets hold noiseless probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub plan: SamplingPlan,
    pub protocol: Protocol,
    pub preparation_time: Option<f64>,
    exact: bool,
    data: Vec<Vec<f64>>,
}

impl TraceSet {
    /// Sampled traces; every value must be a multiple of `1/Ne`.
    pub fn sampled(
        plan: SamplingPlan,
        protocol: Protocol,
        preparation_time: Option<f64>,
        data: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let set = Self {
            plan,
            protocol,
            preparation_time,
            exact: false,
            data,
        };
        set.validate()?;
        Ok(set)
    }

    /// Noiseless traces (used for model checks and idealised runs).
    pub fn exact(
        plan: SamplingPlan,
        protocol: Protocol,
        preparation_time: Option<f64>,
        data: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let set = Self {
            plan,
            protocol,
            preparation_time,
            exact: true,
            data,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.data.len() != self.protocol.trace_count() {
            return Err(invalid(format!(
                "expected {} traces, got {}",
                self.protocol.trace_count(),
                self.data.len()
            )));
        }
        let ne = self.plan.ne as f64;
        for tr in &self.data {
            if tr.len() != self.plan.n {
                return Err(invalid(format!(
                    "trace length {} does not match N = {}",
                    tr.len(),
                    self.plan.n
                )));
            }
            for &d in tr {
                if !d.is_finite() {
                    return Err(invalid("non-finite trace value"));
                }
                if !self.exact && (d - (d * ne).round() / ne).abs() > 1e-12 {
                    return Err(TomographyError::TraceFormat(format!(
                        "value {d} is not a multiple of 1/Ne = 1/{}",
                        self.plan.ne
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn trace(&self, idx: usize) -> &[f64] {
        &self.data[idx]
    }

    pub fn times(&self) -> Vec<f64> {
        self.plan.times()
    }
}

fn check_probability(p: f64) -> Result<f64> {
    if !(-PROBABILITY_TOL..=1.0 + PROBABILITY_TOL).contains(&p) || !p.is_finite() {
        return Err(TomographyError::ProbabilityOutOfRange { value: p });
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Draw multinomial counts over four outcomes as sequential binomials.
fn sample_counts(probs: &[f64; 4], ne: u64, rng: &mut ChaCha8Rng) -> [u64; 4] {
    let total: f64 = probs.iter().sum();
    let mut counts = [0u64; 4];
    let mut remaining = ne;
    let mut rest = 1.0;
    for i in 0..LEVELS - 1 {
        if remaining == 0 {
            break;
        }
        let p = probs[i] / total;
        let q = if rest > 0.0 { (p / rest).clamp(0.0, 1.0) } else { 0.0 };
        let x = Binomial::new(remaining, q)
            .expect("binomial parameter lies in [0, 1]")
            .sample(rng);
        counts[i] = x;
        remaining -= x;
        rest -= p;
    }
    counts[LEVELS - 1] = remaining;
    counts
}

fn cell_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TWO_STEP_STREAM: u64 = 1 << 63;

fn fixed_basis_stream(k: usize, n: usize) -> u64 {
    ((k as u64) << 40) | n as u64
}

/// Noiseless fixed-basis probabilities on the plan grid.
pub fn exact_fixed_basis(h: &Hamiltonian4, plan: &SamplingPlan) -> Result<TraceSet> {
    plan.validate()?;
    let mut data = vec![vec![0.0; plan.n]; TRACES];
    for (n, t) in plan.times().into_iter().enumerate() {
        let p = transition_probabilities(h, t);
        for k in 0..LEVELS {
            for l in 0..LEVELS {
                data[trace_index(k, l)][n] = check_probability(p[k][l])?;
            }
        }
    }
    TraceSet::exact(*plan, Protocol::FixedBasis, None, data)
}

/// Simulate the fixed-basis protocol with `Ne` shots per (state, time).
pub fn run_fixed_basis(h: &Hamiltonian4, plan: &SamplingPlan) -> Result<TraceSet> {
    plan.validate()?;
    let ne = plan.ne as f64;
    let mut data = vec![vec![0.0; plan.n]; TRACES];
    for (n, t) in plan.times().into_iter().enumerate() {
        let p = transition_probabilities(h, t);
        for k in 0..LEVELS {
            let mut probs = [0.0; 4];
            for l in 0..LEVELS {
                probs[l] = check_probability(p[k][l])?;
            }
            let mut rng = cell_rng(plan.seed, fixed_basis_stream(k, n));
            let counts = sample_counts(&probs, plan.ne, &mut rng);
            for l in 0..LEVELS {
                data[trace_index(k, l)][n] = counts[l] as f64 / ne;
            }
        }
    }
    TraceSet::sampled(*plan, Protocol::FixedBasis, None, data)
}

/// The state `|Phi> = exp(-i H0 t*) |1>`.
pub fn prepared_state(h0: &Hamiltonian4, t_star: f64) -> [C64; 4] {
    let u = evolution_operator(h0, t_star);
    [u[(0, 0)], u[(1, 0)], u[(2, 0)], u[(3, 0)]]
}

fn two_step_probabilities(hf: &Hamiltonian4, phi: &[C64; 4], t: f64) -> [f64; 4] {
    let u = evolution_operator(hf, t);
    let mut p = [0.0; 4];
    for (l, v) in p.iter_mut().enumerate() {
        let mut amp = C64::new(0.0, 0.0);
        for (k, a) in phi.iter().enumerate() {
            amp += u[(l, k)] * a;
        }
        *v = amp.norm_sqr();
    }
    p
}

/// Noiseless two-step probabilities.
pub fn exact_two_step(
    h0: &Hamiltonian4,
    t_star: f64,
    hf: &Hamiltonian4,
    plan: &SamplingPlan,
) -> Result<TraceSet> {
    plan.validate()?;
    let phi = prepared_state(h0, t_star);
    let mut data = vec![vec![0.0; plan.n]; LEVELS];
    for (n, t) in plan.times().into_iter().enumerate() {
        let p = two_step_probabilities(hf, &phi, t);
        for l in 0..LEVELS {
            data[l][n] = check_probability(p[l])?;
        }
    }
    TraceSet::exact(*plan, Protocol::Superposition, Some(t_star), data)
}

/// Simulate the two-step protocol: prepare `|1>`, evolve under `h0` for
/// `t_star`, then under `hf` for each sample time, and measure.
pub fn run_two_step(
    h0: &Hamiltonian4,
    t_star: f64,
    hf: &Hamiltonian4,
    plan: &SamplingPlan,
) -> Result<TraceSet> {
    plan.validate()?;
    if !(t_star.is_finite() && t_star >= 0.0) {
        return Err(invalid(format!("preparation time must be non-negative, got {t_star}")));
    }
    let phi = prepared_state(h0, t_star);
    let ne = plan.ne as f64;
    let mut data = vec![vec![0.0; plan.n]; LEVELS];
    for (n, t) in plan.times().into_iter().enumerate() {
        let raw = two_step_probabilities(hf, &phi, t);
        let mut probs = [0.0; 4];
        for l in 0..LEVELS {
            probs[l] = check_probability(raw[l])?;
        }
        let mut rng = cell_rng(plan.seed, TWO_STEP_STREAM | n as u64);
        let counts = sample_counts(&probs, plan.ne, &mut rng);
        for l in 0..LEVELS {
            data[l][n] = counts[l] as f64 / ne;
        }
    }
    TraceSet::sampled(*plan, Protocol::Superposition, Some(t_star), data)
}

/// Closed-form two-step signal built from the eigensystem of `H~`.
///
/// For outcome `l` the population is a constant plus, for every eigenvalue
/// pair `mu > nu`, a cosine at `lambda_mu - lambda_nu` whose amplitude and
/// phase collect the products `|alpha_m| |alpha_n| s_{lm;mu} s_{nl;nu}` with
/// phases `(d_m - d_n) + (theta_m - theta_n) + delta_{lm;mu} + delta_{nl;nu}`.
#[derive(Clone, Debug)]
pub struct SuperpositionModel {
    es: EigenSystem,
}

/// Constant and oscillating content of one outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeSignal {
    pub constant: f64,
    /// `(frequency, amplitude, phase)`: term `amplitude * cos(w t - phase)`.
    pub terms: Vec<(f64, f64, f64)>,
}

impl SuperpositionModel {
    pub fn new(htilde: &Hamiltonian4) -> Self {
        Self {
            es: eigendecompose(htilde),
        }
    }

    pub fn eigensystem(&self) -> &EigenSystem {
        &self.es
    }

    pub fn outcome_signals(&self, g: &GaugePhases, alphas: &[C64; 4]) -> [OutcomeSignal; 4] {
        let r = &self.es.magnitudes;
        let phi = &self.es.phases;
        let lam = &self.es.eigenvalues;
        let d = g.level_phases();
        let mag: [f64; 4] = std::array::from_fn(|m| alphas[m].norm());
        let theta: [f64; 4] = std::array::from_fn(|m| {
            if mag[m] == 0.0 {
                0.0
            } else {
                alphas[m].arg()
            }
        });
        std::array::from_fn(|l| {
            // z[mu][nu] = sum_{m,n} |a_m||a_n| s_{lm;mu} s_{nl;nu} e^{i Theta}
            let mut z = [[C64::new(0.0, 0.0); 4]; 4];
            for (mu, zrow) in z.iter_mut().enumerate() {
                for (nu, zv) in zrow.iter_mut().enumerate() {
                    let mut acc = C64::new(0.0, 0.0);
                    for m in 0..LEVELS {
                        let s_lm = r[l][mu] * r[m][mu];
                        let d_lm = phi[l][mu] - phi[m][mu];
                        for n in 0..LEVELS {
                            let s_nl = r[n][nu] * r[l][nu];
                            let d_nl = phi[n][nu] - phi[l][nu];
                            let w = mag[m] * mag[n] * s_lm * s_nl;
                            if w == 0.0 {
                                continue;
                            }
                            let big = (d[m] - d[n]) + (theta[m] - theta[n]) + d_lm + d_nl;
                            acc += C64::from_polar(w, big);
                        }
                    }
                    *zv = acc;
                }
            }
            let constant = (0..LEVELS).map(|mu| z[mu][mu].re).sum();
            let mut terms = Vec::with_capacity(6);
            for mu in 0..LEVELS {
                for nu in 0..mu {
                    let zz = z[mu][nu];
                    terms.push((lam[mu] - lam[nu], 2.0 * zz.norm(), zz.arg()));
                }
            }
            OutcomeSignal { constant, terms }
        })
    }

    pub fn evaluate(&self, g: &GaugePhases, alphas: &[C64; 4], times: &[f64]) -> Vec<Vec<f64>> {
        self.outcome_signals(g, alphas)
            .iter()
            .map(|sig| {
                times
                    .iter()
                    .map(|&t| {
                        sig.constant
                            + sig
                                .terms
                                .iter()
                                .map(|(w, a, p)| a * (w * t - p).cos())
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Two-step populations from the analytic expansion, for a state `Phi` with
/// amplitudes `alphas` evolving under `H = D^dag H~ D`.
pub fn superposition_signal(
    htilde: &Hamiltonian4,
    g: &GaugePhases,
    alphas: &[C64; 4],
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let norm: f64 = alphas.iter().map(|a| a.norm_sqr()).sum();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("state is not normalised: |Phi|^2 = {norm}")));
    }
    Ok(SuperpositionModel::new(htilde).evaluate(g, alphas, times))
}

/// Same populations by direct propagation, for cross-checks.
pub fn superposition_by_propagation(
    htilde: &Hamiltonian4,
    g: &GaugePhases,
    alphas: &[C64; 4],
    times: &[f64],
) -> Vec<Vec<f64>> {
    let h = apply_gauge(htilde, g);
    let mut out: Vec<Vec<f64>> = (0..LEVELS).map(|_| Vec::with_capacity(times.len())).collect();
    for &t in times {
        let p = two_step_probabilities(&h, alphas, t);
        for l in 0..LEVELS {
            out[l].push(p[l]);
        }
    }
    out
}

/// Sidecar metadata written next to a trace CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format_version: u32,
    pub plan: SamplingPlan,
    pub protocol: Protocol,
    pub preparation_time: Option<f64>,
    pub exact: bool,
    pub rng: String,
}

/// `traces.csv` -> `traces.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct Row {
    t: f64,
    k: usize,
    l: usize,
    d: f64,
}

/// Write `t,k,l,d` rows (1-based `k`, `l`) plus the JSON sidecar.
pub fn write_traces(set: &TraceSet, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    let times = set.times();
    for (n, &t) in times.iter().enumerate() {
        match set.protocol {
            Protocol::FixedBasis => {
                for k in 0..LEVELS {
                    for l in 0..LEVELS {
                        w.serialize(Row {
                            t,
                            k: k + 1,
                            l: l + 1,
                            d: set.data[trace_index(k, l)][n],
                        })?;
                    }
                }
            }
            Protocol::Superposition => {
                for l in 0..LEVELS {
                    w.serialize(Row {
                        t,
                        k: 1,
                        l: l + 1,
                        d: set.data[l][n],
                    })?;
                }
            }
        }
    }
    w.flush()?;
    let meta = TraceMeta {
        format_version: 1,
        plan: set.plan,
        protocol: set.protocol,
        preparation_time: set.preparation_time,
        exact: set.exact,
        rng: RNG_ALGORITHM.to_string(),
    };
    fs::write(sidecar_path(csv_path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read a trace CSV and its sidecar, validating the grid and the
/// `1/Ne` quantisation of sampled data.
pub fn read_traces(csv_path: &Path) -> Result<TraceSet> {
    let meta_text = fs::read_to_string(sidecar_path(csv_path)).map_err(|e| {
        TomographyError::TraceFormat(format!(
            "missing sidecar {}: {e}",
            sidecar_path(csv_path).display()
        ))
    })?;
    let meta: TraceMeta = serde_json::from_str(&meta_text)?;
    meta.plan.validate()?;
    let plan = meta.plan;
    let count = meta.protocol.trace_count();
    let mut data = vec![vec![f64::NAN; plan.n]; count];
    let mut seen: HashMap<(usize, usize), ()> = HashMap::new();

    let mut r = csv::Reader::from_path(csv_path)?;
    for rec in r.deserialize::<Row>() {
        let row = rec?;
        let n = (row.t / plan.dt).round();
        if n < 0.0 || n as usize >= plan.n || (row.t - n * plan.dt).abs() > 1e-9 * plan.dt.max(1.0) {
            return Err(TomographyError::TraceFormat(format!(
                "time {} is not on the sampling grid",
                row.t
            )));
        }
        let n = n as usize;
        if !(1..=LEVELS).contains(&row.k) || !(1..=LEVELS).contains(&row.l) {
            return Err(TomographyError::TraceFormat(format!(
                "state labels must lie in 1..=4, got k={} l={}",
                row.k, row.l
            )));
        }
        let idx = match meta.protocol {
            Protocol::FixedBasis => trace_index(row.k - 1, row.l - 1),
            Protocol::Superposition => {
                if row.k != 1 {
                    return Err(TomographyError::TraceFormat(
                        "superposition traces must use k = 1".into(),
                    ));
                }
                row.l - 1
            }
        };
        if seen.insert((idx, n), ()).is_some() {
            return Err(TomographyError::TraceFormat(format!(
                "duplicate cell at t={} k={} l={}",
                row.t, row.k, row.l
            )));
        }
        data[idx][n] = row.d;
    }
    if seen.len() != count * plan.n {
        return Err(TomographyError::TraceFormat(format!(
            "expected {} cells, found {}",
            count * plan.n,
            seen.len()
        )));
    }
    if meta.exact {
        TraceSet::exact(plan, meta.protocol, meta.preparation_time, data)
    } else {
        TraceSet::sampled(plan, meta.protocol, meta.preparation_time, data)
    }
}

/// Uniform draw used by callers that need an auxiliary stream tied to a seed.
pub fn auxiliary_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    cell_rng(seed, stream)
}

/// A random normalised four-component state (Gaussian amplitudes).
pub fn random_state(rng: &mut ChaCha8Rng) -> [C64; 4] {
    let mut v: [C64; 4] = std::array::from_fn(|_| {
        let (a, b): (f64, f64) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        C64::new(a, b)
    });
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut v {
        *z /= norm;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate_traces, signal_model_of};

    fn sample_h() -> Hamiltonian4 {
        let re = [
            [0.9, 0.31, -0.42, 0.15],
            [0.31, -1.3, 0.27, 0.55],
            [-0.42, 0.27, 0.2, -0.36],
            [0.15, 0.55, -0.36, 2.1],
        ];
        let im = [
            [0.0, 0.12, 0.33, -0.21],
            [-0.12, 0.0, -0.18, 0.07],
            [-0.33, 0.18, 0.0, 0.29],
            [0.21, -0.07, -0.29, 0.0],
        ];
        Hamiltonian4::from_parts(re, im).unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(SamplingPlan::new(0.0, 10, 5, 1).is_err());
        assert!(SamplingPlan::new(0.1, 1, 5, 1).is_err());
        assert!(SamplingPlan::new(0.1, 10, 0, 1).is_err());
        let p = SamplingPlan::new(0.5, 5, 5, 1).unwrap();
        assert_eq!(p.times(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(p.duration(), 2.0);
    }

    #[test]
    fn sampled_values_are_quantised_and_normalised() {
        let plan = SamplingPlan::new(0.1, 200, 37, 9).unwrap();
        let ts = run_fixed_basis(&sample_h(), &plan).unwrap();
        for k in 0..4 {
            for n in 0..plan.n {
                let mut sum = 0.0;
                for l in 0..4 {
                    let d = ts.trace(trace_index(k, l))[n];
                    assert!((0.0..=1.0).contains(&d));
                    assert!(((d * 37.0).round() - d * 37.0).abs() < 1e-9);
                    sum += d;
                }
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let plan = SamplingPlan::new(0.1, 64, 100, 42).unwrap();
        let a = run_fixed_basis(&sample_h(), &plan).unwrap();
        let b = run_fixed_basis(&sample_h(), &plan).unwrap();
        assert_eq!(a, b);
        let other = SamplingPlan { seed: 43, ..plan };
        assert_ne!(a, run_fixed_basis(&sample_h(), &other).unwrap());
    }

    #[test]
    fn single_shot_and_identity() {
        let plan = SamplingPlan::new(0.1, 20, 1, 3).unwrap();
        let ts = run_fixed_basis(&sample_h(), &plan).unwrap();
        for tr in ts.data() {
            assert!(tr.iter().all(|&d| d == 0.0 || d == 1.0));
        }
        let plan = SamplingPlan::new(0.1, 20, 50, 3).unwrap();
        let ts = run_fixed_basis(&Hamiltonian4::zero(), &plan).unwrap();
        for k in 0..4 {
            for l in 0..4 {
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!(ts.trace(trace_index(k, l)).iter().all(|&d| d == expect));
            }
        }
    }

    #[test]
    fn sample_mean_and_variance_match_binomial() {
        // Many replicas of one cell: mean and variance of d for one outcome.
        let probs = [0.1, 0.45, 0.3, 0.15];
        let ne = 200u64;
        let reps = 4000;
        let mut xs = Vec::with_capacity(reps);
        for s in 0..reps {
            let mut rng = cell_rng(s as u64, 7);
            xs.push(sample_counts(&probs, ne, &mut rng)[2] as f64 / ne as f64);
        }
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let expect_var = 0.3 * 0.7 / ne as f64;
        let se_mean = (expect_var / reps as f64).sqrt();
        assert!((mean - 0.3).abs() < 5.0 * se_mean);
        assert!((var / expect_var - 1.0).abs() < 0.1);
    }

    #[test]
    fn exact_traces_match_signal_model() {
        let h = sample_h();
        let plan = SamplingPlan::new(0.07, 300, 1, 0).unwrap();
        let ts = exact_fixed_basis(&h, &plan).unwrap();
        let model = signal_model_of(&h).unwrap();
        let ev = evaluate_traces(&model, &plan.times());
        for idx in 0..16 {
            for n in 0..plan.n {
                assert!((ev[idx][n] - ts.trace(idx)[n]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn superposition_expansion_matches_propagation() {
        let htilde = sample_h().traceless();
        let mut rng = auxiliary_rng(5, 0);
        let times: Vec<f64> = (0..400).map(|n| n as f64 * 0.05).collect();
        for trial in 0..5 {
            let alphas = random_state(&mut rng);
            let g = GaugePhases::new(0.3 + trial as f64, 1.7 * trial as f64, 4.0 - trial as f64);
            let a = superposition_signal(&htilde, &g, &alphas, &times).unwrap();
            let b = superposition_by_propagation(&htilde, &g, &alphas, &times);
            for l in 0..4 {
                for n in 0..times.len() {
                    assert!((a[l][n] - b[l][n]).abs() < 1e-9, "l={l} n={n}");
                }
            }
        }
        // A basis state reduces to the fixed-basis traces.
        let e3 = [C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let sig = superposition_signal(&htilde, &GaugePhases::identity(), &e3, &times).unwrap();
        let model = signal_model_of(&htilde).unwrap();
        let ev = evaluate_traces(&model, &times);
        for l in 0..4 {
            for n in 0..times.len() {
                assert!((sig[l][n] - ev[trace_index(2, l)][n]).abs() < 1e-9);
            }
        }
        let bad = [C64::new(1.0, 0.0); 4];
        assert!(superposition_signal(&htilde, &g_id(), &bad, &times).is_err());
    }

    fn g_id() -> GaugePhases {
        GaugePhases::identity()
    }

    #[test]
    fn two_step_matches_expansion() {
        let h0 = sample_h();
        let htilde = Hamiltonian4::diagonal([0.0, 0.7, 1.9, 3.2]).traceless();
        let mut re = [[0.0; 4]; 4];
        re[0][1] = 0.2;
        re[1][0] = 0.2;
        re[2][3] = -0.3;
        re[3][2] = -0.3;
        let htilde = Hamiltonian4::new(htilde.matrix() + Hamiltonian4::from_real(re).unwrap().matrix()).unwrap();
        let g = GaugePhases::new(0.4, 1.1, 2.5);
        let hf = apply_gauge(&htilde, &g);
        let plan = SamplingPlan::new(0.1, 100, 1, 0).unwrap();
        let ts = exact_two_step(&h0, 0.8, &hf, &plan).unwrap();
        let phi = prepared_state(&h0, 0.8);
        let sig = superposition_signal(&htilde, &g, &phi, &plan.times()).unwrap();
        for l in 0..4 {
            for n in 0..plan.n {
                assert!((ts.trace(l)[n] - sig[l][n]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        let plan = SamplingPlan::new(0.1, 50, 250, 11).unwrap();
        let ts = run_fixed_basis(&sample_h(), &plan).unwrap();
        write_traces(&ts, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = read_traces(&path).unwrap();
        assert_eq!(back, ts);

        let h0 = sample_h();
        let two = run_two_step(&h0, 0.5, &h0, &plan).unwrap();
        let path2 = dir.path().join("two.csv");
        write_traces(&two, &path2).unwrap();
        assert_eq!(read_traces(&path2).unwrap(), two);
    }

    #[test]
    fn reader_rejects_unquantised_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        let plan = SamplingPlan::new(0.1, 10, 4, 1).unwrap();
        let ts = run_fixed_basis(&sample_h(), &plan).unwrap();
        write_traces(&ts, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = "0,1,1,0.3".to_string();
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_traces(&path), Err(TomographyError::TraceFormat(_))));
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        assert!(check_probability(1.0 + 1e-10).is_ok());
        assert!(matches!(
            check_probability(1.1),
            Err(TomographyError::ProbabilityOutOfRange { .. })
        ));
        assert!(check_probability(-1e-6).is_err());
    }
}
