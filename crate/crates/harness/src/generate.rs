//! Random test systems: eigenvalues drawn so every transition frequency lies
//! in a band, conjugated by a Haar-random unitary.

use hamtomo::model::{Hamiltonian4, Matrix4c, C64, TRANSITION_PAIRS};
use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

pub const MAX_DRAWS: usize = 100_000;

/// Frequencies closer than this count as a near-degenerate pair.
pub const NEAR_DEGENERATE_GAP: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorOptions {
    /// Every transition frequency lies in `[band.0, band.1]`.
    pub band: (f64, f64),
    /// Minimum distance between any two transition frequencies.
    pub min_separation: f64,
    /// Require at least one pair of frequencies closer than
    /// `NEAR_DEGENERATE_GAP`, allowing separations down to
    /// `1e-3 * min_separation`.
    pub near_degenerate: bool,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            band: (0.3, 7.0),
            min_separation: 1e-3,
            near_degenerate: false,
        }
    }
}

impl GeneratorOptions {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.band;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
            return Err(HarnessError::Config(format!("invalid frequency band ({lo}, {hi})")));
        }
        // Three consecutive gaps of at least `lo` must fit below `hi`.
        if 3.0 * lo >= hi {
            return Err(HarnessError::Config(format!(
                "band ({lo}, {hi}) cannot hold four levels"
            )));
        }
        if !(self.min_separation.is_finite() && self.min_separation > 0.0) {
            return Err(HarnessError::Config(format!(
                "min_separation must be positive, got {}",
                self.min_separation
            )));
        }
        Ok(())
    }
}

/// Sorted transition frequencies of ascending eigenvalues.
pub fn frequencies_of(lam: &[f64; 4]) -> [f64; 6] {
    let mut w: [f64; 6] = std::array::from_fn(|i| {
        let (mu, nu) = TRANSITION_PAIRS[i];
        lam[nu] - lam[mu]
    });
    w.sort_by(f64::total_cmp);
    w
}

/// Smallest distance between two transition frequencies.
pub fn min_frequency_separation(w: &[f64; 6]) -> f64 {
    w.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min)
}

fn acceptable(lam: &[f64; 4], opts: &GeneratorOptions) -> bool {
    let w = frequencies_of(lam);
    if w[0] < opts.band.0 || w[5] > opts.band.1 {
        return false;
    }
    let sep = min_frequency_separation(&w);
    if opts.near_degenerate {
        sep < NEAR_DEGENERATE_GAP && sep >= 1e-3 * opts.min_separation
    } else {
        sep >= opts.min_separation
    }
}

/// Haar-random unitary: QR of a complex Gaussian matrix with the phases of
/// `diag(R)` moved into `Q`.
pub fn haar_unitary(rng: &mut ChaCha8Rng) -> Matrix4c {
    let z: Matrix4c = Matrix4::from_fn(|_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) / std::f64::consts::SQRT_2
    });
    let qr = z.qr();
    let (q, r) = (qr.q(), qr.r());
    let phases = Vector4::from_fn(|i, _| {
        let d = r[(i, i)];
        if d.norm() == 0.0 {
            C64::new(1.0, 0.0)
        } else {
            d / d.norm()
        }
    });
    q * Matrix4c::from_diagonal(&phases)
}

/// Traceless Hermitian matrix with eigenvalues `lam` in a random basis.
pub fn rotate_spectrum(lam: &[f64; 4], rng: &mut ChaCha8Rng) -> Hamiltonian4 {
    let u = haar_unitary(rng);
    let d = Matrix4c::from_diagonal(&Vector4::from_fn(|i, _| C64::new(lam[i], 0.0)));
    Hamiltonian4::hermitize(&(u * d * u.adjoint())).traceless()
}

/// Draw a random system from `seed`.
pub fn generate_system(seed: u64, opts: &GeneratorOptions) -> Result<Hamiltonian4> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = opts.band.1;
    for _ in 0..MAX_DRAWS {
        let mut lam = [0.0, rng.random_range(0.0..hi), rng.random_range(0.0..hi), rng.random_range(0.0..hi)];
        lam.sort_by(f64::total_cmp);
        if acceptable(&lam, opts) {
            return Ok(rotate_spectrum(&lam, &mut rng));
        }
    }
    Err(HarnessError::Config(format!(
        "no acceptable spectrum in {MAX_DRAWS} draws for {opts:?}"
    )))
}

/// System with prescribed consecutive eigenvalue gaps in a random basis.
pub fn system_with_gaps(gaps: [f64; 3], seed: u64) -> Hamiltonian4 {
    let lam = [0.0, gaps[0], gaps[0] + gaps[1], gaps[0] + gaps[1] + gaps[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rotate_spectrum(&lam, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hamtomo::model::eigendecompose;

    fn spectrum_frequencies(h: &Hamiltonian4) -> [f64; 6] {
        frequencies_of(&eigendecompose(h).eigenvalues)
    }

    #[test]
    fn systems_lie_in_band() {
        let opts = GeneratorOptions::default();
        for seed in 0..50 {
            let h = generate_system(seed, &opts).unwrap();
            assert!(h.trace().abs() < 1e-12);
            let w = spectrum_frequencies(&h);
            assert!(w[0] >= 0.3 - 1e-9 && w[5] <= 7.0 + 1e-9, "{w:?}");
            assert!(min_frequency_separation(&w) >= 1e-3 - 1e-9);
            let m = h.matrix();
            assert!((m - m.adjoint()).norm() < 1e-14);
        }
    }

    #[test]
    fn near_degenerate_mode_has_close_pair() {
        let opts = GeneratorOptions {
            near_degenerate: true,
            ..Default::default()
        };
        for seed in 0..10 {
            let w = spectrum_frequencies(&generate_system(seed, &opts).unwrap());
            assert!(min_frequency_separation(&w) < NEAR_DEGENERATE_GAP);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let opts = GeneratorOptions::default();
        assert_eq!(generate_system(5, &opts).unwrap(), generate_system(5, &opts).unwrap());
        assert_ne!(generate_system(5, &opts).unwrap(), generate_system(6, &opts).unwrap());
    }

    #[test]
    fn haar_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let u = haar_unitary(&mut rng);
            assert!((u.adjoint() * u - Matrix4c::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn prescribed_gaps_are_kept() {
        let h = system_with_gaps([0.4322, 0.4236, 5.0046], 3);
        let w = spectrum_frequencies(&h);
        let want = [0.4236, 0.4322, 0.8558, 5.0046, 5.4282, 5.8604];
        for i in 0..6 {
            assert!((w[i] - want[i]).abs() < 1e-10, "{w:?}");
        }
    }

    #[test]
    fn impossible_band_is_rejected() {
        let opts = GeneratorOptions {
            band: (3.0, 7.0),
            ..Default::default()
        };
        assert!(generate_system(0, &opts).is_err());
    }
}
