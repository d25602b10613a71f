//! Hamiltonian reconstruction from a six-frequency fit: level-structure
//! identification, phase extraction and constraint refinement, rank-1
//! completion of the overlap matrices, and assembly of `H~`.
//!
//! Phase tables are stored in transition space: entry `j` of a row refers
//! to `TRANSITION_PAIRS[j]`, independent of the frequency ordering.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::bayes::ModelFit;
use crate::error::{invalid, Result};
use crate::model::{
    apply_gauge, assemble_htilde, tilde_eigenvalues, trace_index, wrap_pi, GaugePhases,
    Hamiltonian4, LEVELS, TRACES, TRANSITIONS, TRANSITION_PAIRS,
};

/// Frequency index `m` (ascending order) to transition `(mu, nu)` for the
/// five generic arrangements, in canonical orientation.
pub const ARRANGEMENTS: [[(usize, usize); 6]; 5] = [
    [(0, 1), (1, 2), (2, 3), (0, 2), (1, 3), (0, 3)],
    [(0, 1), (2, 3), (1, 2), (0, 2), (1, 3), (0, 3)],
    [(1, 2), (0, 1), (2, 3), (0, 2), (1, 3), (0, 3)],
    [(1, 2), (0, 1), (0, 2), (2, 3), (1, 3), (0, 3)],
    [(0, 1), (1, 2), (0, 2), (2, 3), (1, 3), (0, 3)],
];

/// Index of a transition in [`TRANSITION_PAIRS`].
pub fn pair_index(mu: usize, nu: usize) -> usize {
    TRANSITION_PAIRS
        .iter()
        .position(|&p| p == (mu, nu))
        .expect("transition with mu < nu")
}

/// The three sum rules `w13 = w12 + w23`, `w24 = w23 + w34`,
/// `w14 = w12 + w23 + w34` as rows over transition-space entries.
pub fn pair_constraints() -> Matrix3x6 {
    let p = pair_index;
    let mut a = [[0.0; 6]; 3];
    a[0][p(0, 2)] = 1.0;
    a[0][p(0, 1)] = -1.0;
    a[0][p(1, 2)] = -1.0;
    a[1][p(1, 3)] = 1.0;
    a[1][p(1, 2)] = -1.0;
    a[1][p(2, 3)] = -1.0;
    a[2][p(0, 3)] = 1.0;
    a[2][p(0, 1)] = -1.0;
    a[2][p(1, 2)] = -1.0;
    a[2][p(2, 3)] = -1.0;
    a
}

pub type Matrix3x6 = [[f64; 6]; 3];

/// Sum-rule matrix acting on the ascending frequency vector for a map.
pub fn constraint_matrix(map: &[(usize, usize); 6]) -> Matrix3x6 {
    let pc = pair_constraints();
    let mut a = [[0.0; 6]; 3];
    for (m, &(mu, nu)) in map.iter().enumerate() {
        let j = pair_index(mu, nu);
        for r in 0..3 {
            a[r][m] = pc[r][j];
        }
    }
    a
}

fn residual_sq(a: &Matrix3x6, x: &[f64]) -> f64 {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>().powi(2))
        .sum()
}

/// Map of the level-reflected structure, `(mu, nu) -> (3 - nu, 3 - mu)`.
pub fn reflect_map(map: &[(usize, usize); 6]) -> [(usize, usize); 6] {
    map.map(|(mu, nu)| (LEVELS - 1 - nu, LEVELS - 1 - mu))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LevelDiagnostic {
    /// No arrangement satisfies the sum rules within the threshold.
    NotFourLevel { best: f64, threshold: f64 },
    /// The two best arrangements fit comparably well.
    Ambiguous { best: f64, runner_up: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAssignment {
    /// Arrangement number `1..=5`.
    pub arrangement: usize,
    pub map: [(usize, usize); 6],
    /// `|A_s w|^2` for `s = 1..=5`.
    pub residuals: [f64; 5],
    /// Whether `map` is the reflected orientation.
    pub inverted: bool,
    pub diagnostic: Option<LevelDiagnostic>,
}

impl LevelAssignment {
    /// Frequency index of transition `(mu, nu)`.
    pub fn frequency_index(&self, mu: usize, nu: usize) -> usize {
        self.map
            .iter()
            .position(|&p| p == (mu, nu))
            .expect("assignment covers every transition")
    }

    /// The same arrangement read in the reflected orientation.
    pub fn reflected(&self) -> Self {
        Self {
            map: reflect_map(&self.map),
            inverted: !self.inverted,
            ..self.clone()
        }
    }
}

/// Thresholds for accepting an arrangement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelOptions {
    /// Accept only if `best < ambiguity_ratio * runner_up`.
    pub ambiguity_ratio: f64,
    /// Absolute acceptance threshold in units of `(pi / T)^2`.
    pub absolute_factor: f64,
}

impl Default for LevelOptions {
    fn default() -> Self {
        Self {
            ambiguity_ratio: 0.1,
            absolute_factor: 6.0,
        }
    }
}

/// Pick the arrangement whose sum rules the ascending frequencies satisfy
/// best. `signal_length` sets the absolute threshold `6 (pi / T)^2`.
pub fn identify_levels(freqs: &[f64], signal_length: f64) -> Result<LevelAssignment> {
    identify_levels_with(freqs, signal_length, &LevelOptions::default())
}

pub fn identify_levels_with(freqs: &[f64], signal_length: f64, opts: &LevelOptions) -> Result<LevelAssignment> {
    if freqs.len() != TRANSITIONS {
        return Err(invalid(format!("need six frequencies, got {}", freqs.len())));
    }
    if freqs.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(invalid(format!("frequencies must be positive: {freqs:?}")));
    }
    let mut w = freqs.to_vec();
    w.sort_by(f64::total_cmp);
    if w.windows(2).any(|p| p[0] == p[1]) {
        return Err(invalid("frequencies must be distinct"));
    }
    let mut residuals = [0.0; 5];
    for (s, map) in ARRANGEMENTS.iter().enumerate() {
        residuals[s] = residual_sq(&constraint_matrix(map), &w);
    }
    let mut order = [0usize, 1, 2, 3, 4];
    order.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]));
    let (best, runner_up) = (residuals[order[0]], residuals[order[1]]);
    let threshold = (opts.absolute_factor * (PI / signal_length).powi(2)).max(1e-20);
    let diagnostic = if best > threshold {
        Some(LevelDiagnostic::NotFourLevel { best, threshold })
    } else if best >= opts.ambiguity_ratio * runner_up {
        Some(LevelDiagnostic::Ambiguous { best, runner_up })
    } else {
        None
    };
    Ok(LevelAssignment {
        arrangement: order[0] + 1,
        map: ARRANGEMENTS[order[0]],
        residuals,
        inverted: false,
        diagnostic,
    })
}

/// Phase differences `Delta_{kl;mu nu}` in transition space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub delta: [[f64; 6]; 16],
    /// Propagated standard errors of `delta`.
    pub sigma: [[f64; 6]; 16],
    /// `max_{kl} |e_kl|^2` of the wrapped sum-rule residuals.
    pub violation: f64,
    pub pair_violation: [f64; 16],
    /// `(trace, transition)` entries with `a = b = 0`.
    pub vanishing: Vec<(usize, usize)>,
    /// Set when the constraint violation is large enough that refinement
    /// may worsen the estimate.
    pub quality_warning: bool,
}

/// Violation above which a table is considered unreliable.
pub const QUALITY_THRESHOLD: f64 = 0.05;

fn wrapped_residuals(row: &[f64; 6]) -> [f64; 3] {
    let a = pair_constraints();
    std::array::from_fn(|r| wrap_pi(a[r].iter().zip(row).map(|(x, d)| x * d).sum()))
}

fn row_violation(row: &[f64; 6]) -> f64 {
    wrapped_residuals(row).iter().map(|e| e * e).sum()
}

fn finish_table(mut t: PhaseTable) -> PhaseTable {
    for i in 0..TRACES {
        t.pair_violation[i] = row_violation(&t.delta[i]);
    }
    t.violation = t.pair_violation.iter().copied().fold(0.0, f64::max);
    t.quality_warning = t.violation > QUALITY_THRESHOLD;
    t
}

/// `Delta = atan2(b, a)` for each trace and transition.
pub fn extract_phases(fit: &ModelFit, assign: &LevelAssignment) -> Result<PhaseTable> {
    if fit.frequencies.len() != TRANSITIONS || fit.a.len() != TRACES {
        return Err(invalid("phase extraction needs a six-frequency fixed-basis fit"));
    }
    let mut t = PhaseTable {
        delta: [[0.0; 6]; 16],
        sigma: [[0.0; 6]; 16],
        violation: 0.0,
        pair_violation: [0.0; 16],
        vanishing: Vec::new(),
        quality_warning: false,
    };
    for i in 0..TRACES {
        for (m, &(mu, nu)) in assign.map.iter().enumerate() {
            let j = pair_index(mu, nu);
            let (a, b) = (fit.a[i][m], fit.b[i][m]);
            let r2 = a * a + b * b;
            if r2 == 0.0 {
                t.vanishing.push((i, j));
                t.delta[i][j] = 0.0;
                t.sigma[i][j] = PI;
                continue;
            }
            t.delta[i][j] = b.atan2(a);
            let (ea, eb) = (fit.a_err[i][m], fit.b_err[i][m]);
            t.sigma[i][j] = ((b * ea).powi(2) + (a * eb).powi(2)).sqrt() / r2;
        }
    }
    Ok(finish_table(t))
}

/// Smallest weighted change of one row that satisfies the sum rules exactly
/// (modulo `2 pi`): the limit of a violation penalty with an
/// inverse-variance tether to the measured values.
fn refine_row(row: &[f64; 6], sigma: &[f64; 6]) -> [f64; 6] {
    let a = pair_constraints();
    let floor = 1e-6;
    let all_zero = sigma.iter().all(|s| *s == 0.0);
    let var: [f64; 6] = std::array::from_fn(|j| {
        if all_zero {
            1.0
        } else {
            sigma[j].min(PI).powi(2) + floor * floor
        }
    });
    // r = A x - 2 pi n, with n chosen so that r is wrapped.
    let r = Vector3::from_fn(|i, _| {
        let raw: f64 = a[i].iter().zip(row).map(|(x, d)| x * d).sum();
        raw - TAU * (raw / TAU).round()
    });
    let mut s = Matrix3::<f64>::zeros();
    for i in 0..3 {
        for k in 0..3 {
            s[(i, k)] = (0..6).map(|j| a[i][j] * var[j] * a[k][j]).sum();
        }
    }
    let lam = s.lu().solve(&r).unwrap_or_else(Vector3::zeros);
    std::array::from_fn(|j| {
        let corr: f64 = (0..3).map(|i| a[i][j] * lam[i]).sum();
        wrap_pi(row[j] - var[j] * corr)
    })
}

/// Enforce the sum rules on every row, weighting each entry by its inverse
/// variance. Diagonal traces are set to zero phase and antisymmetry
/// `Delta_lk = -Delta_kl` is imposed.
pub fn refine_phases(table: &PhaseTable) -> PhaseTable {
    let mut out = table.clone();
    for k in 0..LEVELS {
        let i = trace_index(k, k);
        out.delta[i] = [0.0; 6];
        for l in k + 1..LEVELS {
            let i = trace_index(k, l);
            let j = trace_index(l, k);
            let refined = refine_row(&table.delta[i], &table.sigma[i]);
            out.delta[i] = refined;
            out.delta[j] = refined.map(|d| wrap_pi(-d));
        }
    }
    let warned = table.quality_warning;
    let mut out = finish_table(out);
    out.quality_warning |= warned;
    out
}

/// Overlap vectors recovered from rank-1 completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SVectors {
    pub s: [[f64; 4]; 16],
    /// Completed diagonals `d_nu ~ s_nu^2`.
    pub diagonals: [[f64; 4]; 16],
    /// `sum_{m,n} (g_mm g_nn - g_mn^2)^2` of each completed matrix.
    pub residuals: [f64; 16],
    /// Pairs whose completion is not trustworthy.
    pub low_confidence: [bool; 16],
}

fn completion_cost(d: &[f64; 4], m2: &[[f64; 4]; 4], c: f64, tie: f64) -> f64 {
    let mut cost = 0.0;
    for mu in 0..4 {
        for nu in mu + 1..4 {
            cost += (d[mu] * d[nu] - m2[mu][nu]).powi(2);
        }
    }
    cost + tie * (d.iter().sum::<f64>() - c).powi(2)
}

/// Projected Levenberg-Marquardt on `d in [0, c]^4`.
fn complete_from(start: [f64; 4], m2: &[[f64; 4]; 4], c: f64, tie: f64) -> ([f64; 4], f64) {
    let clamp = |x: f64| x.clamp(0.0, c);
    let mut d = start.map(clamp);
    let mut cost = completion_cost(&d, m2, c, tie);
    let mut lambda = 1e-3;
    let wt = tie.sqrt();
    for _ in 0..500 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for mu in 0..4 {
            for nu in mu + 1..4 {
                let r = d[mu] * d[nu] - m2[mu][nu];
                let mut row = Vector4::zeros();
                row[mu] = d[nu];
                row[nu] = d[mu];
                jtj += row * row.transpose();
                jtr += row * r;
            }
        }
        let r = wt * (d.iter().sum::<f64>() - c);
        let row = Vector4::repeat(wt);
        jtj += row * row.transpose();
        jtr += row * r;

        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += lambda * (jtj[(i, i)] + c * c * 1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: [f64; 4] = std::array::from_fn(|i| clamp(d[i] + step[i]));
            let tc = completion_cost(&trial, m2, c, tie);
            if tc < cost {
                let moved = (0..4).map(|i| (trial[i] - d[i]).abs()).fold(0.0, f64::max);
                d = trial;
                cost = tc;
                lambda = (lambda / 3.0).max(1e-15);
                improved = moved > 1e-16 * c;
                break;
            }
            lambda *= 4.0;
        }
        if !improved || cost <= 1e-32 * c.powi(4) {
            break;
        }
    }
    (d, cost)
}

fn completion_starts(m: &[[f64; 4]; 4], c: f64) -> Vec<[f64; 4]> {
    let mut starts = Vec::with_capacity(8);
    // Closed form d_mu = M_mu,nu M_mu,la / M_nu,la, medianed over triples.
    let mut seed = [0.0; 4];
    for mu in 0..4 {
        let mut vals = Vec::new();
        for nu in 0..4 {
            for la in nu + 1..4 {
                if nu == mu || la == mu {
                    continue;
                }
                let den = m[nu][la];
                if den.abs() > 1e-12 * c.max(f64::MIN_POSITIVE) {
                    vals.push((m[mu][nu] * m[mu][la] / den).abs());
                }
            }
        }
        vals.sort_by(f64::total_cmp);
        seed[mu] = vals.get(vals.len() / 2).copied().unwrap_or(0.0);
    }
    starts.push(seed);
    for i in 0..4 {
        let mut e = [0.0; 4];
        e[i] = c;
        starts.push(e);
    }
    starts.push([0.5 * c; 4]);
    starts.push([0.25 * c; 4]);
    let total: f64 = (0..4).flat_map(|a| (0..4).map(move |b| (a, b))).filter(|(a, b)| a != b).map(|(a, b)| m[a][b].abs()).sum();
    if total > 0.0 {
        starts.push(std::array::from_fn(|mu| {
            c * (0..4).filter(|&nu| nu != mu).map(|nu| m[mu][nu].abs()).sum::<f64>() / total
        }));
    } else {
        starts.push([0.0; 4]);
    }
    starts
}

/// Weight of the trace tie `(sum d - c)^2`, relative to `c^2`. It pins the
/// diagonals of levels that carry no off-diagonal signal.
pub const TRACE_TIE: f64 = 1e-4;

/// Complete one matrix with known off-diagonals `m` and trace `c`.
pub fn complete_matrix(m: &[[f64; 4]; 4], c: f64) -> ([f64; 4], [f64; 4], f64, bool) {
    if !(c > 0.0) {
        return ([0.0; 4], [0.0; 4], 0.0, c < 0.0);
    }
    let m2: [[f64; 4]; 4] = std::array::from_fn(|a| std::array::from_fn(|b| m[a][b] * m[a][b]));
    let tie = TRACE_TIE * c * c;
    let mut best: Option<([f64; 4], f64)> = None;
    for start in completion_starts(m, c) {
        let (d, cost) = complete_from(start, &m2, c, tie);
        if best.is_none_or(|b| cost < b.1 * (1.0 - 1e-12)) {
            best = Some((d, cost));
        }
    }
    let (d, _) = best.expect("at least one start");

    let full = Matrix4::from_fn(|a, b| if a == b { d[a] } else { m[a][b] });
    let mut residual = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                residual += (d[a] * d[b] - m2[a][b]).powi(2);
            }
        }
    }
    let eig = SymmetricEigen::new(full);
    let (top, lam) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let trace: f64 = d.iter().sum();
    let mut low = lam < 0.9 * trace || residual > 1e-6;
    let mut v: [f64; 4] = std::array::from_fn(|i| eig.eigenvectors[(i, top)]);
    if v.iter().sum::<f64>() < 0.0 {
        v = v.map(|x| -x);
    }
    for x in &mut v {
        if *x < 0.0 {
            if *x < -1e-6 {
                low = true;
            }
            *x = 0.0;
        }
    }
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let s = if norm2 > 0.0 {
        let scale = (c / norm2).sqrt();
        v.map(|x| x * scale)
    } else {
        low = true;
        [0.0; 4]
    };
    (s, d, residual, low)
}

/// Recover `s_{kl;nu}` for every trace from the refined phases.
pub fn complete_rank1(fit: &ModelFit, table: &PhaseTable, assign: &LevelAssignment) -> SVectors {
    let mut out = SVectors {
        s: [[0.0; 4]; 16],
        diagonals: [[0.0; 4]; 16],
        residuals: [0.0; 16],
        low_confidence: [false; 16],
    };
    for i in 0..TRACES {
        let mut m = [[0.0; 4]; 4];
        for (f, &(mu, nu)) in assign.map.iter().enumerate() {
            let delta = table.delta[i][pair_index(mu, nu)];
            let v = fit.a[i][f] * delta.cos() + fit.b[i][f] * delta.sin();
            m[mu][nu] = v;
            m[nu][mu] = v;
        }
        let (s, d, r, low) = complete_matrix(&m, fit.c[i]);
        out.s[i] = s;
        out.diagonals[i] = d;
        out.residuals[i] = r;
        out.low_confidence[i] = low;
    }
    out
}

/// Result of a full reconstruction with its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub htilde: Hamiltonian4,
    pub lambda_tilde: [f64; 4],
    pub assignment: LevelAssignment,
    /// Constraint violation before refinement.
    pub raw_violation: f64,
    pub phases: PhaseTable,
    pub overlaps: SVectors,
}

/// Fit -> levels -> phases -> refined phases -> overlaps -> `H~`.
pub fn reconstruct(fit: &ModelFit) -> Result<Reconstruction> {
    if fit.frequencies.len() != TRANSITIONS {
        return Err(invalid(format!(
            "reconstruction needs six frequencies, got {}",
            fit.frequencies.len()
        )));
    }
    let assignment = identify_levels(&fit.frequencies, fit.signal_length)?;
    let raw = extract_phases(fit, &assignment)?;
    let phases = refine_phases(&raw);
    let overlaps = complete_rank1(fit, &phases, &assignment);
    let w = |nu: usize| fit.frequencies[assignment.frequency_index(0, nu)];
    let lambda_tilde = tilde_eigenvalues(w(1), w(2), w(3));
    let mut delta_1nu = [[0.0; 4]; 16];
    for i in 0..TRACES {
        for nu in 1..LEVELS {
            delta_1nu[i][nu] = phases.delta[i][pair_index(0, nu)];
        }
    }
    let htilde = assemble_htilde(&lambda_tilde, &overlaps.s, &delta_1nu);
    Ok(Reconstruction {
        htilde,
        lambda_tilde,
        assignment,
        raw_violation: raw.violation,
        phases,
        overlaps,
    })
}

/// Relative operator-norm error after removing the trace, the diagonal
/// gauge (matched on the first row) and the energy-inversion branch.
pub fn gauge_compensated_error(est: &Hamiltonian4, act: &Hamiltonian4) -> f64 {
    gauge_alignment(est, act).error
}

/// Best match of `est` onto `act` over the inversion branch and the three
/// first-row gauge phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeAlignment {
    /// `act ~ apply_gauge(branch(est), gauge)`.
    pub gauge: GaugePhases,
    /// Whether the branch is the inversion image of `est`.
    pub inverted: bool,
    /// Relative operator-norm error of the traceless parts.
    pub error: f64,
}

pub fn gauge_alignment(est: &Hamiltonian4, act: &Hamiltonian4) -> GaugeAlignment {
    let a = act.traceless();
    let norm = a.operator_norm();
    let e0 = est.traceless();
    let branches = [e0.clone(), e0.inversion_image()];
    let scale = norm.max(e0.operator_norm());
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let grid: Vec<f64> = (0..64).map(|i| TAU * i as f64 / 64.0).collect();
    let mut best = GaugeAlignment {
        gauge: GaugePhases::identity(),
        inverted: false,
        error: f64::INFINITY,
    };
    for (bi, e) in branches.iter().enumerate() {
        let mut fixed = [None; 3];
        for l in 1..LEVELS {
            let (za, ze) = (a.entry(0, l), e.entry(0, l));
            if za.norm() > tol && ze.norm() > tol {
                fixed[l - 1] = Some(za.arg() - ze.arg());
            }
        }
        let choices: Vec<Vec<f64>> = fixed
            .iter()
            .map(|f| match f {
                Some(d) => vec![*d],
                None => grid.clone(),
            })
            .collect();
        for d12 in &choices[0] {
            for d13 in &choices[1] {
                for d14 in &choices[2] {
                    let g = GaugePhases::new(*d12, *d13, *d14);
                    let diff = apply_gauge(e, &g).matrix() - a.matrix();
                    let err = crate::model::operator_norm(&diff);
                    if err < best.error {
                        best = GaugeAlignment {
                            gauge: g,
                            inverted: bi == 1,
                            error: err,
                        };
                    }
                }
            }
        }
    }
    if norm != 0.0 {
        best.error /= norm;
    }
    best
}
