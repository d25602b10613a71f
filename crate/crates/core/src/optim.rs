//! BFGS quasi-Newton minimization with a strong-Wolfe line search using
//! cubic interpolation, and central finite-difference gradients.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsOptions {
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when `|f_new - f| <= rel_f_tol * max(|f|, 1)`.
    pub rel_f_tol: f64,
    /// Stop when a step moves no coordinate by more than this.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Infinity norm of the first trial step.
    pub initial_step: f64,
    /// Central-difference step per coordinate (last entry reused if short).
    pub fd_steps: Vec<f64>,
    /// Sufficient-decrease and curvature constants.
    pub c1: f64,
    pub c2: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-7,
            rel_f_tol: 1e-12,
            step_tol: 1e-14,
            max_iter: 200,
            initial_step: 1e-3,
            fd_steps: vec![1e-6],
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Central differences with per-coordinate steps. Non-finite neighbours fall
/// back to a one-sided difference.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], steps: &[f64]) -> Vec<f64> {
    let fx = f(x);
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = *steps.get(i).or(steps.last()).unwrap_or(&1e-6);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => 0.0,
        };
    }
    g
}

struct Problem<'a, F: Fn(&[f64]) -> f64> {
    f: &'a F,
    steps: &'a [f64],
    evaluations: usize,
}

impl<F: Fn(&[f64]) -> f64> Problem<'_, F> {
    fn value(&mut self, x: &DVector<f64>) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x.as_slice());
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn gradient(&mut self, x: &DVector<f64>) -> DVector<f64> {
        self.evaluations += 2 * x.len() + 1;
        DVector::from_vec(central_gradient(self.f, x.as_slice(), self.steps))
    }
}

struct Point {
    a: f64,
    f: f64,
    d: Option<f64>,
    g: Option<DVector<f64>>,
}

/// Minimizer of the cubic through `(a0, f0, d0)` and `(a1, f1, d1)`, or the
/// quadratic through `(a0, f0, d0)` and `(a1, f1)` when `d1` is unknown.
fn interpolate(lo: &Point, hi: &Point) -> Option<f64> {
    let (a0, f0, d0) = (lo.a, lo.f, lo.d?);
    let (a1, f1) = (hi.a, hi.f);
    if !f1.is_finite() {
        return None;
    }
    match hi.d {
        Some(d1) => {
            let t1 = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
            let disc = t1 * t1 - d0 * d1;
            if disc < 0.0 {
                return None;
            }
            let t2 = (a1 - a0).signum() * disc.sqrt();
            let den = d1 - d0 + 2.0 * t2;
            if den == 0.0 {
                return None;
            }
            Some(a1 - (a1 - a0) * (d1 + t2 - t1) / den)
        }
        None => {
            let w = a1 - a0;
            let den = 2.0 * (f1 - f0 - d0 * w);
            if den <= 0.0 {
                return None;
            }
            Some(a0 - d0 * w * w / den)
        }
    }
}

fn safeguarded(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.a.min(hi.a), lo.a.max(hi.a));
    let w = b - a;
    match interpolate(lo, hi) {
        Some(t) if t.is_finite() && t > a + 0.1 * w && t < b - 0.1 * w => t,
        _ => 0.5 * (a + b),
    }
}

enum Search {
    Found(f64, f64, DVector<f64>),
    Failed,
}

fn line_search<F: Fn(&[f64]) -> f64>(
    prob: &mut Problem<F>,
    x: &DVector<f64>,
    fx: f64,
    gx: &DVector<f64>,
    p: &DVector<f64>,
    alpha0: f64,
    opts: &BfgsOptions,
) -> Search {
    let dphi0 = gx.dot(p);
    if !(dphi0 < 0.0) {
        return Search::Failed;
    }
    let armijo = |a: f64, fa: f64| fa <= fx + opts.c1 * a * dphi0;
    let curvature = |d: f64| d.abs() <= -opts.c2 * dphi0;

    let mut prev = Point {
        a: 0.0,
        f: fx,
        d: Some(dphi0),
        g: Some(gx.clone()),
    };
    let mut a = alpha0;
    let mut bracket: Option<(Point, Point)> = None;
    for i in 0..30 {
        let xa = x + p * a;
        let fa = prob.value(&xa);
        if !armijo(a, fa) || (i > 0 && fa >= prev.f) {
            bracket = Some((
                prev,
                Point {
                    a,
                    f: fa,
                    d: None,
                    g: None,
                },
            ));
            break;
        }
        let ga = prob.gradient(&xa);
        let da = ga.dot(p);
        if curvature(da) {
            return Search::Found(a, fa, ga);
        }
        let cur = Point {
            a,
            f: fa,
            d: Some(da),
            g: Some(ga),
        };
        if da >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        if i == 29 {
            // Still descending after repeated expansion: take the last point.
            return Search::Found(cur.a, cur.f, cur.g.expect("gradient evaluated"));
        }
        prev = cur;
        a *= 2.0;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Search::Failed;
    };

    for _ in 0..40 {
        if (hi.a - lo.a).abs() <= 1e-16 * lo.a.abs().max(1e-300) {
            break;
        }
        let aj = safeguarded(&lo, &hi);
        let xj = x + p * aj;
        let fj = prob.value(&xj);
        if !armijo(aj, fj) || fj >= lo.f {
            hi = Point {
                a: aj,
                f: fj,
                d: None,
                g: None,
            };
            continue;
        }
        let gj = prob.gradient(&xj);
        let dj = gj.dot(p);
        if curvature(dj) {
            return Search::Found(aj, fj, gj);
        }
        let cur = Point {
            a: aj,
            f: fj,
            d: Some(dj),
            g: Some(gj),
        };
        if dj * (hi.a - lo.a) >= 0.0 {
            hi = std::mem::replace(&mut lo, cur);
        } else {
            lo = cur;
        }
    }
    // Accept the best sufficient-decrease point found, if any.
    match (lo.a > 0.0, lo.g) {
        (true, Some(g)) => Search::Found(lo.a, lo.f, g),
        _ => Search::Failed,
    }
}

/// Minimize `f` from `x0`. Non-finite values are treated as `+inf`.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult {
    let n = x0.len();
    let mut prob = Problem {
        f,
        steps: &opts.fd_steps,
        evaluations: 0,
    };
    let mut x = DVector::from_column_slice(x0);
    let mut fx = prob.value(&x);
    let result = |x: &DVector<f64>, f: f64, g: &DVector<f64>, it: usize, ev: usize, conv: bool| BfgsResult {
        x: x.as_slice().to_vec(),
        f,
        grad_inf_norm: g.amax(),
        iterations: it,
        evaluations: ev,
        converged: conv,
    };
    if n == 0 {
        return result(&x, fx, &DVector::zeros(0), 0, prob.evaluations, true);
    }
    let mut g = prob.gradient(&x);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut reset_once = false;

    for it in 0..opts.max_iter {
        if g.amax() < opts.grad_tol {
            return result(&x, fx, &g, it, prob.evaluations, true);
        }
        let mut p = -(&hinv * &g);
        if p.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            p = -g.clone();
        }
        let alpha0 = if fresh {
            opts.initial_step / p.amax().max(f64::MIN_POSITIVE)
        } else {
            1.0
        };
        match line_search(&mut prob, &x, fx, &g, &p, alpha0, opts) {
            Search::Failed => {
                if reset_once || fresh {
                    let conv = g.amax() < opts.grad_tol;
                    return result(&x, fx, &g, it, prob.evaluations, conv);
                }
                hinv = DMatrix::identity(n, n);
                fresh = true;
                reset_once = true;
            }
            Search::Found(a, f_new, g_new) => {
                let s = &p * a;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                if fresh && sy > 0.0 {
                    hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                }
                if sy > 1e-12 * s.norm() * y.norm() {
                    let rho = 1.0 / sy;
                    let eye = DMatrix::<f64>::identity(n, n);
                    let left = &eye - (&s * y.transpose()) * rho;
                    let right = &eye - (&y * s.transpose()) * rho;
                    hinv = &left * &hinv * &right + (&s * s.transpose()) * rho;
                }
                fresh = false;
                let df = (fx - f_new).abs();
                let small_step = s.amax() <= opts.step_tol;
                x += &s;
                fx = f_new;
                g = g_new;
                if df <= opts.rel_f_tol * fx.abs().max(1.0) || small_step {
                    return result(&x, fx, &g, it + 1, prob.evaluations, true);
                }
            }
        }
    }
    let conv = g.amax() < opts.grad_tol;
    result(&x, fx, &g, opts.max_iter, prob.evaluations, conv)
}
