//! Shared fixtures for the unit tests: a small hand-checked reference
//! configuration and a generator of random stable-ish configurations.

use crate::model::{CavitySpec, MechanicalMode, SystemConfig};
use rand::Rng;

/// Two-mode reference configuration used across modules. All derived
/// matrix entries for it are checked by hand in `model::tests`.
pub(crate) fn two_mode_reference() -> SystemConfig {
    SystemConfig {
        modes: vec![
            MechanicalMode { omega: 1.0, gamma: 4.0e-5, nbar: 100.0, coupling_g: 0.16, gain_cd: 0.8 },
            MechanicalMode { omega: 0.9, gamma: 3.0e-5, nbar: 100.0, coupling_g: 0.1, gain_cd: 0.8 },
        ],
        cavity: CavitySpec { kappa: 3.0, omega_fb: 3.5, eta: 1.0, detuning: 0.0 },
    }
}

/// Random configuration with increasing frequencies and moderate rates.
/// Not guaranteed stable; callers filter on the stability margin.
pub(crate) fn random_config(rng: &mut impl Rng, n: usize) -> SystemConfig {
    let kappa = rng.gen_range(3.0..20.0);
    let mut omega = 0.0;
    let modes = (0..n)
        .map(|_| {
            omega += rng.gen_range(0.2..0.8);
            MechanicalMode {
                omega,
                gamma: rng.gen_range(1e-6..1e-3),
                nbar: rng.gen_range(0.0..500.0),
                coupling_g: rng.gen_range(0.01..0.2),
                gain_cd: rng.gen_range(0.1..1.0),
            }
        })
        .collect();
    SystemConfig {
        modes,
        cavity: CavitySpec {
            kappa,
            omega_fb: rng.gen_range(kappa..2.0 * kappa),
            eta: 1.0,
            detuning: 0.0,
        },
    }
}

/// Random configuration tuned into the closed-form validity window:
/// pairwise frequency gaps at least `gap_over_rate` times every on-site
/// damping rate, and thermal decay rates at most `rate_over_gamma` times
/// smaller than the on-site damping.
pub(crate) fn random_separated_config(
    rng: &mut impl Rng,
    n: usize,
    gap_over_rate: f64,
    rate_over_gamma: f64,
) -> SystemConfig {
    let kappa = rng.gen_range(10.0..40.0);
    // Pick the frequency ladder first, then size the couplings so every
    // on-site rate stays well below the smallest gap.
    let base = rng.gen_range(0.8..1.2);
    let mut omegas = vec![base];
    let mut min_gap = f64::INFINITY;
    for _ in 1..n {
        let gap = rng.gen_range(0.1..0.3);
        min_gap = min_gap.min(gap);
        omegas.push(omegas.last().unwrap() + gap);
    }
    if n == 1 {
        min_gap = 1.0;
    }
    let target = min_gap / (gap_over_rate * rng.gen_range(1.0..3.0));
    let modes = omegas
        .iter()
        .map(|&omega| {
            let gain_cd = rng.gen_range(0.3..1.0);
            let weight = rng.gen_range(0.5..1.0);
            let coupling_g = target * weight * kappa / (gain_cd * omega);
            MechanicalMode {
                omega,
                gamma: target * weight / rate_over_gamma * rng.gen_range(0.1..1.0),
                nbar: rng.gen_range(10.0..1000.0),
                coupling_g,
                gain_cd,
            }
        })
        .collect();
    SystemConfig {
        modes,
        cavity: CavitySpec {
            kappa,
            omega_fb: rng.gen_range(kappa..2.0 * kappa),
            eta: 1.0,
            detuning: 0.0,
        },
    }
}
