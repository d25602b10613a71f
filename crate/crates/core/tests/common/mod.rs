#![allow(dead_code)]

use hamtomo::model::{GaugePhases, Hamiltonian4, Matrix4c, C64};
use nalgebra::Matrix4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unitary from Gram-Schmidt on a random complex matrix.
pub fn random_unitary(rng: &mut ChaCha8Rng) -> Matrix4c {
    let mut m: Matrix4c =
        Matrix4::from_fn(|_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    for j in 0..4 {
        for i in 0..j {
            let proj = m.column(i).dotc(&m.column(j));
            let ci = m.column(i).clone_owned();
            m.column_mut(j).axpy(-proj, &ci, C64::new(1.0, 0.0));
        }
        let n = m.column(j).norm();
        m.column_mut(j).unscale_mut(n);
    }
    m
}

/// Traceless Hermitian matrix whose six gaps are distinct and at least
/// `min_gap` apart from each other and from zero.
pub fn generic_hamiltonian(rng: &mut ChaCha8Rng, min_gap: f64) -> Hamiltonian4 {
    loop {
        let mut lam: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        lam.sort_by(f64::total_cmp);
        let mut gaps: Vec<f64> = (0..4)
            .flat_map(|i| (i + 1..4).map(move |j| (i, j)))
            .map(|(i, j)| lam[j] - lam[i])
            .collect();
        gaps.sort_by(f64::total_cmp);
        if gaps[0] < min_gap || gaps.windows(2).any(|w| w[1] - w[0] < min_gap) {
            continue;
        }
        let u = random_unitary(rng);
        let d = Matrix4c::from_diagonal(&nalgebra::Vector4::from_fn(|i, _| C64::new(lam[i], 0.0)));
        let h = Hamiltonian4::hermitize(&(u * d * u.adjoint()));
        return h.traceless();
    }
}

pub fn random_gauge(rng: &mut ChaCha8Rng) -> GaugePhases {
    GaugePhases::new(
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    )
}
