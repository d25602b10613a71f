//! Unitary propagation by a scaled-and-squared Taylor series. This route is
//! independent of the eigendecomposition and serves both the simulator and
//! the cross-checks of the analytic signal model.

use crate::model::{Hamiltonian4, Matrix4c, C64, LEVELS};

const TAYLOR_DEGREE: usize = 18;

/// Matrix exponential of a general complex 4x4 matrix.
pub fn expm(a: &Matrix4c) -> Matrix4c {
    let norm1 = (0..LEVELS)
        .map(|c| (0..LEVELS).map(|r| a[(r, c)].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scaled = norm1;
    while scaled > 0.25 {
        scaled *= 0.5;
        squarings += 1;
    }
    let b = a * C64::new(0.5f64.powi(squarings as i32), 0.0);

    let mut result = Matrix4c::identity();
    let mut term = Matrix4c::identity();
    for j in 1..=TAYLOR_DEGREE {
        term = term * b * C64::new(1.0 / j as f64, 0.0);
        result += term;
    }
    for _ in 0..squarings {
        result = result * result;
    }
    result
}

/// `U(t) = exp(-i H t)`.
pub fn evolution_operator(h: &Hamiltonian4, t: f64) -> Matrix4c {
    expm(&(h.matrix() * C64::new(0.0, -t)))
}

/// `p[k][l] = |<l| U(t) |k>|^2`.
pub fn transition_probabilities(h: &Hamiltonian4, t: f64) -> [[f64; 4]; 4] {
    let u = evolution_operator(h, t);
    let mut p = [[0.0; 4]; 4];
    for (k, row) in p.iter_mut().enumerate() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = u[(l, k)].norm_sqr();
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::eigendecompose;

    #[test]
    fn exponential_of_diagonal() {
        let h = Hamiltonian4::diagonal([0.0, 1.0, -2.0, 30.0]);
        let u = evolution_operator(&h, 0.7);
        for k in 0..4 {
            let expect = C64::from_polar(1.0, -h.entry(k, k).re * 0.7);
            assert!((u[(k, k)] - expect).norm() < 1e-13);
        }
    }

    #[test]
    fn matches_spectral_exponential() {
        let re = [
            [0.5, 1.2, -0.4, 0.0],
            [1.2, -3.0, 0.3, 0.8],
            [-0.4, 0.3, 2.0, -1.1],
            [0.0, 0.8, -1.1, 6.0],
        ];
        let im = [
            [0.0, 0.4, 0.0, 0.9],
            [-0.4, 0.0, -0.7, 0.1],
            [0.0, 0.7, 0.0, 0.2],
            [-0.9, -0.1, -0.2, 0.0],
        ];
        let h = Hamiltonian4::from_parts(re, im).unwrap();
        let es = eigendecompose(&h);
        for &t in &[0.0, 0.01, 1.0, 17.3, 400.0] {
            let u = evolution_operator(&h, t);
            let mut v = Matrix4c::zeros();
            for nu in 0..4 {
                let x = es.eigenvectors.column(nu);
                v += (x * x.adjoint()) * C64::from_polar(1.0, -es.eigenvalues[nu] * t);
            }
            assert!((u - v).norm() < 1e-9, "t={t}");
            let unit = u.adjoint() * u;
            assert!((unit - Matrix4c::identity()).norm() < 1e-10);
        }
    }
}
