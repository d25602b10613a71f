//! Exact four-level model: Hermitian eigendecomposition, the analytic
//! multi-sinusoid form of the sixteen measurement traces, assembly of the
//! gauge-reduced Hamiltonian and the diagonal gauge action.
//!
//! Phase conventions. With `<k|xi_nu> = r_{k nu} e^{i phi_{k nu}}` we write
//! `delta_{kl;nu} = phi_{k nu} - phi_{l nu}` and, for a transition `mu < nu`,
//! `Delta_{kl;mu nu} = delta_{kl;mu} - delta_{kl;nu}`. With this orientation
//! the traces read
//!
//! ```text
//! p_kl(t) = c_kl + 2 sum_m [ a_kl;m cos(w_m t) + b_kl;m sin(w_m t) ]
//! a = s_mu s_nu cos(Delta),  b = s_mu s_nu sin(Delta),  c = sum_nu s_nu^2
//! ```
//!
//! and `<l|H~|k> = sum_nu lambda~_nu s_{kl;nu} exp(i Delta_{kl;1 nu})` holds
//! exactly. `H~` equals `D^dag (H - tr H / 4) D` for the gauge with
//! `delta_l = phi_{l 1} - phi_{1 1}`; equivalently `H - tr H / 4` is the
//! gauge image of `H~` under the negated phases.

use nalgebra::{Complex, Matrix4};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{Result, TomographyError};

pub type C64 = Complex<f64>;
pub type Matrix4c = Matrix4<C64>;

/// Number of measurement-basis states.
pub const LEVELS: usize = 4;
/// Number of (initial state, outcome) traces.
pub const TRACES: usize = 16;
/// Number of transitions between four levels.
pub const TRANSITIONS: usize = 6;

/// Transitions `(mu, nu)` with `mu < nu`, 0-based, in canonical order.
pub const TRANSITION_PAIRS: [(usize, usize); TRANSITIONS] =
    [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Flat index of trace `(k, l)`: initial state `k`, outcome `l` (0-based).
#[inline]
pub fn trace_index(k: usize, l: usize) -> usize {
    LEVELS * k + l
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_pi(x: f64) -> f64 {
    let mut y = x.rem_euclid(TAU);
    if y > PI {
        y -= TAU;
    }
    y
}

/// Wrap an angle into `[0, 2 pi)`.
pub fn wrap_tau(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU {
        0.0
    } else {
        y
    }
}

/// A 4x4 complex Hermitian matrix in the measurement basis (hbar = 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HamiltonianJson", into = "HamiltonianJson")]
pub struct Hamiltonian4 {
    m: Matrix4c,
}

/// Wire form: row-major real and imaginary parts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HamiltonianJson {
    pub re: [[f64; 4]; 4],
    pub im: [[f64; 4]; 4],
}

impl TryFrom<HamiltonianJson> for Hamiltonian4 {
    type Error = TomographyError;
    fn try_from(j: HamiltonianJson) -> Result<Self> {
        Hamiltonian4::from_parts(j.re, j.im)
    }
}

impl From<Hamiltonian4> for HamiltonianJson {
    fn from(h: Hamiltonian4) -> Self {
        let (re, im) = h.parts();
        HamiltonianJson { re, im }
    }
}

impl Hamiltonian4 {
    /// Absolute tolerance on `|H_lk - conj(H_kl)|`.
    pub const HERMITIAN_TOL: f64 = 1e-12;

    /// Validate Hermiticity and wrap the matrix unchanged.
    pub fn new(m: Matrix4c) -> Result<Self> {
        for r in 0..LEVELS {
            for c in r..LEVELS {
                let dev = (m[(r, c)] - m[(c, r)].conj()).norm();
                if !dev.is_finite() || dev > Self::HERMITIAN_TOL {
                    return Err(TomographyError::NotHermitian {
                        row: r,
                        col: c,
                        deviation: dev,
                    });
                }
            }
        }
        Ok(Self { m })
    }

    /// `(M + M^dag) / 2`.
    pub fn hermitize(m: &Matrix4c) -> Self {
        Self {
            m: (m + m.adjoint()) * C64::new(0.5, 0.0),
        }
    }

    pub fn from_parts(re: [[f64; 4]; 4], im: [[f64; 4]; 4]) -> Result<Self> {
        let m = Matrix4c::from_fn(|r, c| C64::new(re[r][c], im[r][c]));
        Self::new(m)
    }

    pub fn from_real(re: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_parts(re, [[0.0; 4]; 4])
    }

    pub fn diagonal(d: [f64; 4]) -> Self {
        let mut m = Matrix4c::zeros();
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = C64::new(*v, 0.0);
        }
        Self { m }
    }

    pub fn zero() -> Self {
        Self { m: Matrix4c::zeros() }
    }

    pub fn matrix(&self) -> &Matrix4c {
        &self.m
    }

    pub fn entry(&self, row: usize, col: usize) -> C64 {
        self.m[(row, col)]
    }

    pub fn parts(&self) -> ([[f64; 4]; 4], [[f64; 4]; 4]) {
        let mut re = [[0.0; 4]; 4];
        let mut im = [[0.0; 4]; 4];
        for r in 0..LEVELS {
            for c in 0..LEVELS {
                re[r][c] = self.m[(r, c)].re;
                im[r][c] = self.m[(r, c)].im;
            }
        }
        (re, im)
    }

    pub fn trace(&self) -> f64 {
        (0..LEVELS).map(|i| self.m[(i, i)].re).sum()
    }

    /// `H - tr(H)/4 I`.
    pub fn traceless(&self) -> Self {
        let shift = C64::new(self.trace() / LEVELS as f64, 0.0);
        let mut m = self.m;
        for i in 0..LEVELS {
            m[(i, i)] -= shift;
        }
        Self { m }
    }

    /// `-H*`: the energy-inverted partner that produces identical
    /// fixed-basis traces.
    pub fn inversion_image(&self) -> Self {
        Self {
            m: self.m.map(|z| -z.conj()),
        }
    }

    /// Largest singular value.
    pub fn operator_norm(&self) -> f64 {
        operator_norm(&self.m)
    }
}

pub(crate) fn operator_norm(m: &Matrix4c) -> f64 {
    m.singular_values().max()
}

/// Eigenvalues (ascending) and phase-fixed eigenvectors of a Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSystem {
    pub eigenvalues: [f64; 4],
    /// Column `nu` holds `|xi_nu>`.
    pub eigenvectors: Matrix4c,
    /// `r[k][nu] = |<k|xi_nu>|`.
    pub magnitudes: [[f64; 4]; 4],
    /// `phi[k][nu] = arg <k|xi_nu>` in `(-pi, pi]`.
    pub phases: [[f64; 4]; 4],
}

impl EigenSystem {
    /// `sum_nu lambda_nu |xi_nu><xi_nu|`.
    pub fn recompose(&self) -> Matrix4c {
        let mut m = Matrix4c::zeros();
        for nu in 0..LEVELS {
            let v = self.eigenvectors.column(nu);
            m += (v * v.adjoint()) * C64::new(self.eigenvalues[nu], 0.0);
        }
        m
    }
}

/// Eigendecomposition with eigenvalues ascending. Each eigenvector is rotated
/// so that its largest-magnitude component (lowest index on ties) is real
/// and positive.
pub fn eigendecompose(h: &Hamiltonian4) -> EigenSystem {
    let eig = h.m.symmetric_eigen();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut eigenvalues = [0.0; 4];
    let mut eigenvectors = Matrix4c::zeros();
    let mut magnitudes = [[0.0; 4]; 4];
    let mut phases = [[0.0; 4]; 4];
    for (nu, &src) in order.iter().enumerate() {
        eigenvalues[nu] = eig.eigenvalues[src];
        let mut v = eig.eigenvectors.column(src).into_owned();
        let norm = v.norm();
        v /= C64::new(norm, 0.0);

        let mut pivot = 0;
        let mut pivot_mag = v[0].norm();
        for j in 1..LEVELS {
            let mag = v[j].norm();
            if mag > pivot_mag + 1e-12 {
                pivot = j;
                pivot_mag = mag;
            }
        }
        let rot = v[pivot].conj() / pivot_mag;
        v *= rot;
        v[pivot] = C64::new(v[pivot].norm(), 0.0);

        for k in 0..LEVELS {
            magnitudes[k][nu] = v[k].norm();
            phases[k][nu] = if v[k].norm() == 0.0 { 0.0 } else { v[k].arg() };
        }
        eigenvectors.set_column(nu, &v);
    }
    EigenSystem {
        eigenvalues,
        eigenvectors,
        magnitudes,
        phases,
    }
}

/// Relative tolerance below which two transition frequencies count as equal.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Analytic content of the sixteen fixed-basis traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    /// Transition frequencies, ascending.
    pub frequencies: [f64; 6],
    /// `transitions[m] = (mu, nu)` (0-based, `mu < nu`) for frequency `m`.
    pub transitions: [(usize, usize); 6],
    pub a: [[f64; 6]; 16],
    pub b: [[f64; 6]; 16],
    pub c: [f64; 16],
    /// `s_{kl;nu} = r_{k nu} r_{l nu}`.
    pub overlaps: [[f64; 4]; 16],
    /// `Delta_{kl;m}` for the transition assigned to frequency `m`.
    pub phase_differences: [[f64; 6]; 16],
}

/// Build the signal parameters of `h` from its eigensystem.
pub fn signal_model_of(h: &Hamiltonian4) -> Result<SignalModel> {
    let es = eigendecompose(h);
    signal_model_from_eigensystem(&es)
}

pub fn signal_model_from_eigensystem(es: &EigenSystem) -> Result<SignalModel> {
    let lam = es.eigenvalues;
    let mut trans: Vec<(f64, (usize, usize))> = TRANSITION_PAIRS
        .iter()
        .map(|&(mu, nu)| (lam[nu] - lam[mu], (mu, nu)))
        .collect();
    trans.sort_by(|x, y| x.0.total_cmp(&y.0));

    let scale = trans[5].0.abs();
    if scale == 0.0 || trans[0].0 <= DEGENERACY_TOL * scale {
        return Err(TomographyError::DegenerateSpectrum {
            first: trans[0].1,
            second: trans[0].1,
            gap: trans[0].0,
        });
    }
    for w in trans.windows(2) {
        let gap = w[1].0 - w[0].0;
        if gap <= DEGENERACY_TOL * scale {
            return Err(TomographyError::DegenerateSpectrum {
                first: w[0].1,
                second: w[1].1,
                gap,
            });
        }
    }

    let mut frequencies = [0.0; 6];
    let mut transitions = [(0, 0); 6];
    for (m, (w, pair)) in trans.iter().enumerate() {
        frequencies[m] = *w;
        transitions[m] = *pair;
    }

    let r = &es.magnitudes;
    let phi = &es.phases;
    let mut model = SignalModel {
        frequencies,
        transitions,
        a: [[0.0; 6]; 16],
        b: [[0.0; 6]; 16],
        c: [0.0; 16],
        overlaps: [[0.0; 4]; 16],
        phase_differences: [[0.0; 6]; 16],
    };
    for k in 0..LEVELS {
        for l in 0..LEVELS {
            let idx = trace_index(k, l);
            let mut s = [0.0; 4];
            let mut delta = [0.0; 4];
            for nu in 0..LEVELS {
                s[nu] = r[k][nu] * r[l][nu];
                delta[nu] = phi[k][nu] - phi[l][nu];
            }
            model.overlaps[idx] = s;
            model.c[idx] = s.iter().map(|x| x * x).sum();
            for (m, &(mu, nu)) in transitions.iter().enumerate() {
                let big_delta = wrap_pi(delta[mu] - delta[nu]);
                let amp = s[mu] * s[nu];
                model.phase_differences[idx][m] = big_delta;
                model.a[idx][m] = amp * big_delta.cos();
                model.b[idx][m] = amp * big_delta.sin();
            }
        }
    }
    Ok(model)
}

/// `c + 2 sum_m (a_m cos w_m t + b_m sin w_m t)`.
pub fn multisine(frequencies: &[f64], a: &[f64], b: &[f64], c: f64, t: f64) -> f64 {
    let mut acc = 0.0;
    for ((w, am), bm) in frequencies.iter().zip(a).zip(b) {
        let (sn, cs) = (w * t).sin_cos();
        acc += am * cs + bm * sn;
    }
    c + 2.0 * acc
}

/// Evaluate all sixteen traces at `times`. Values are not clamped.
pub fn evaluate_traces(model: &SignalModel, times: &[f64]) -> Vec<Vec<f64>> {
    (0..TRACES)
        .map(|idx| {
            times
                .iter()
                .map(|&t| {
                    multisine(
                        &model.frequencies,
                        &model.a[idx],
                        &model.b[idx],
                        model.c[idx],
                        t,
                    )
                })
                .collect()
        })
        .collect()
}

/// Traceless eigenvalues from the three transitions out of the lowest level:
/// `lambda~_nu = w_{1 nu} - (w12 + w13 + w14) / 4` with `w11 = 0`.
pub fn tilde_eigenvalues(w12: f64, w13: f64, w14: f64) -> [f64; 4] {
    let shift = (w12 + w13 + w14) / 4.0;
    [-shift, w12 - shift, w13 - shift, w14 - shift]
}

/// Assemble `<l|H~|k> = sum_nu lambda~_nu s_{kl;nu} exp(i Delta_{kl;1 nu})`.
///
/// `delta_1nu[idx][nu]` holds `Delta_{kl;1 nu}`; the `nu = 0` entry is
/// ignored (it is zero by definition). The result is Hermitized.
pub fn assemble_htilde(
    lambda_tilde: &[f64; 4],
    s: &[[f64; 4]; 16],
    delta_1nu: &[[f64; 4]; 16],
) -> Hamiltonian4 {
    let mut m = Matrix4c::zeros();
    for k in 0..LEVELS {
        for l in 0..LEVELS {
            let idx = trace_index(k, l);
            let mut acc = C64::new(0.0, 0.0);
            for nu in 0..LEVELS {
                let phase = if nu == 0 { 0.0 } else { delta_1nu[idx][nu] };
                acc += C64::from_polar(lambda_tilde[nu] * s[idx][nu], phase);
            }
            m[(l, k)] = acc;
        }
    }
    Hamiltonian4::hermitize(&m)
}

/// The three basis-state phases `delta_12, delta_13, delta_14` of the
/// diagonal gauge `D = diag(1, e^{i d12}, e^{i d13}, e^{i d14})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugePhases {
    pub delta12: f64,
    pub delta13: f64,
    pub delta14: f64,
}

impl Default for GaugePhases {
    fn default() -> Self {
        Self::identity()
    }
}

impl GaugePhases {
    pub fn new(delta12: f64, delta13: f64, delta14: f64) -> Self {
        Self {
            delta12: wrap_tau(delta12),
            delta13: wrap_tau(delta13),
            delta14: wrap_tau(delta14),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_array(d: [f64; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.delta12, self.delta13, self.delta14]
    }

    /// Per-level phases `(0, d12, d13, d14)`.
    pub fn level_phases(&self) -> [f64; 4] {
        [0.0, self.delta12, self.delta13, self.delta14]
    }

    pub fn matrix(&self) -> Matrix4c {
        let p = self.level_phases();
        Matrix4c::from_fn(|r, c| {
            if r == c {
                C64::from_polar(1.0, p[r])
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }
}

/// `D^dag H D`.
pub fn apply_gauge(h: &Hamiltonian4, g: &GaugePhases) -> Hamiltonian4 {
    let p = g.level_phases();
    let m = Matrix4c::from_fn(|l, k| h.m[(l, k)] * C64::from_polar(1.0, p[k] - p[l]));
    Hamiltonian4::hermitize(&m)
}
