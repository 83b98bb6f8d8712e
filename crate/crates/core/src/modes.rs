//! Bright/dark collective-mode analysis.
//!
//! A single feedback loop reads one collective quadrature — the uniform
//! "bright" combination of all mechanical modes — and damps it; the
//! orthogonal complement ("dark" combinations) is invisible to the loop and
//! is cooled only indirectly, through frequency differences that rotate dark
//! excitations into the bright mode. This module builds the orthonormal
//! collective basis, the collective frequencies and intermode couplings, and
//! the transformed damping matrix that makes the rank-one structure explicit.

use crate::error::{Error, Result};
use crate::model::SystemConfig;
use nalgebra::DMatrix;

/// Tolerance for basis orthonormality, zero-sum rows, and the off-bright
/// entries of the transformed damping matrix.
pub const BASIS_TOL: f64 = 1e-12;

/// Orthonormal collective basis. Row `k` holds the coefficients of
/// collective mode `k` in the physical basis; row 0 is the bright mode
/// `(1/sqrt(N), ..., 1/sqrt(N))`, rows 1.. are dark modes summing to zero.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    /// `N x N` coefficient matrix; `alpha[(k, j)]` weights physical mode `j`
    /// in collective mode `k`.
    pub alpha: DMatrix<f64>,
}

impl ModeBasis {
    pub fn n_modes(&self) -> usize {
        self.alpha.nrows()
    }
}

/// Deterministic orthonormal basis containing the uniform bright row.
///
/// Seeds modified Gram-Schmidt with the bright vector followed by the
/// coordinate directions `e_2, ..., e_N`; each new row is re-orthogonalized
/// twice (sufficient for 1e-12 orthonormality at N = 64) and its sign is
/// fixed so the first nonzero coefficient is positive. For N = 2 this yields
/// the dark row `(1, -1)/sqrt(2)`; for N = 3 the dark rows
/// `(1, -2, 1)/sqrt(6)` and `(1, 0, -1)/sqrt(2)`.
pub fn gram_schmidt_basis(n: usize) -> Result<ModeBasis> {
    if n == 0 {
        return Err(Error::InvalidParameter("basis needs at least one mode".into()));
    }
    let mut alpha = DMatrix::<f64>::zeros(n, n);
    let bright = 1.0 / (n as f64).sqrt();
    for j in 0..n {
        alpha[(0, j)] = bright;
    }
    for k in 1..n {
        // Seed: coordinate direction e_k (0-indexed column k).
        let mut row = vec![0.0; n];
        row[k] = 1.0;
        // Two passes of modified Gram-Schmidt against all previous rows.
        for _ in 0..2 {
            for prev in 0..k {
                let dot: f64 = (0..n).map(|j| row[j] * alpha[(prev, j)]).sum();
                for j in 0..n {
                    row[j] -= dot * alpha[(prev, j)];
                }
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        debug_assert!(norm > 1e-8, "seed e_{k} degenerated during orthogonalization");
        let first_nonzero = row.iter().copied().find(|x| x.abs() > 1e-14 * norm).unwrap_or(1.0);
        let scale = if first_nonzero < 0.0 { -1.0 / norm } else { 1.0 / norm };
        for j in 0..n {
            alpha[(k, j)] = row[j] * scale;
        }
    }
    Ok(ModeBasis { alpha })
}

/// Block-diagonal `2N x 2N` version of the basis acting on interleaved
/// phase-space vectors: positions and momenta transform with the same
/// coefficients, `T[(2k, 2j)] = T[(2k+1, 2j+1)] = alpha[(k, j)]`.
pub fn transform_matrix(basis: &ModeBasis) -> DMatrix<f64> {
    let n = basis.n_modes();
    let mut t = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for k in 0..n {
        for j in 0..n {
            t[(2 * k, 2 * j)] = basis.alpha[(k, j)];
            t[(2 * k + 1, 2 * j + 1)] = basis.alpha[(k, j)];
        }
    }
    t
}

/// Covariance matrix expressed in the collective basis: `T V T^T`.
pub fn transform_covariance(basis: &ModeBasis, covariance: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = transform_matrix(basis);
    if covariance.nrows() != t.nrows() || covariance.ncols() != t.ncols() {
        return Err(Error::InvalidParameter(format!(
            "covariance is {}x{} but the basis describes {} modes",
            covariance.nrows(),
            covariance.ncols(),
            basis.n_modes()
        )));
    }
    Ok(&t * covariance * t.transpose())
}

/// Collective frequencies and intermode couplings.
#[derive(Debug, Clone)]
pub struct CollectiveSpectrum {
    /// `Omega[k] = sum_j alpha[(k,j)]^2 omega_j`; `Omega[0]` is the
    /// arithmetic mean of the physical frequencies.
    pub omega: Vec<f64>,
    /// Symmetric coupling matrix `g[(k,k')] = sum_j alpha[(k,j)] alpha[(k',j)] omega_j`;
    /// its diagonal equals `Omega`. Off-diagonal entries are the rates at
    /// which frequency spread rotates dark excitations into other collective
    /// modes — all zero when the physical frequencies are degenerate.
    pub couplings: DMatrix<f64>,
}

/// Contract the basis with a frequency vector to get the collective
/// frequencies and the full coupling map.
pub fn collective_spectrum(basis: &ModeBasis, frequencies: &[f64]) -> Result<CollectiveSpectrum> {
    let n = basis.n_modes();
    if frequencies.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} frequencies supplied for a {n}-mode basis",
            frequencies.len()
        )));
    }
    let mut couplings = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        for kp in k..n {
            let sum: f64 = frequencies
                .iter()
                .enumerate()
                .map(|(j, &w)| basis.alpha[(k, j)] * basis.alpha[(kp, j)] * w)
                .sum();
            couplings[(k, kp)] = sum;
            couplings[(kp, k)] = sum;
        }
    }
    let omega = (0..n).map(|k| couplings[(k, k)]).collect();
    Ok(CollectiveSpectrum { omega, couplings })
}

/// Feedback damping in the collective basis.
#[derive(Debug, Clone)]
pub struct TransformedDamping {
    /// `A Phi A^T` where `Phi` is the feedback part of the damping matrix;
    /// equals `N Gamma` at the bright-bright entry and vanishes elsewhere.
    pub matrix: DMatrix<f64>,
    /// The single nonzero rate `N Gamma` acting on the bright momentum.
    /// (It enters the drift with a minus sign, as damping.)
    pub bright_rate: f64,
    /// The uniform per-pair feedback rate `Gamma`.
    pub uniform_rate: f64,
}

/// Transform the feedback part of the damping matrix,
/// `Phi[(j,k)] = gain_j G_k omega_k / kappa`, into the collective basis.
///
/// The clean bright/dark picture requires every entry of `Phi` to be the
/// same rate `Gamma` (uniform gains and uniform `G_k omega_k`); then
/// `A Phi A^T = N Gamma` on the bright diagonal and zero elsewhere, which is
/// asserted to 1e-12 before returning. Configurations with unequal rates are
/// rejected — analyze those through the exact drift matrix instead.
pub fn transformed_damping(basis: &ModeBasis, config: &SystemConfig) -> Result<TransformedDamping> {
    let n = config.n_modes();
    if basis.n_modes() != n {
        return Err(Error::InvalidParameter(format!(
            "basis describes {} modes but the configuration has {n}",
            basis.n_modes()
        )));
    }
    let kappa = config.cavity.kappa;
    let mut phi = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            phi[(j, k)] =
                config.modes[j].gain_cd * config.modes[k].coupling_g * config.modes[k].omega
                    / kappa;
        }
    }
    let rate = phi[(0, 0)];
    let tol = BASIS_TOL * rate.abs().max(1.0);
    for j in 0..n {
        for k in 0..n {
            if (phi[(j, k)] - rate).abs() > tol {
                return Err(Error::UnequalRates(format!(
                    "feedback rate for (mode {j}, mode {k}) is {:.6e} but (0, 0) is {:.6e}; \
                     the bright/dark decomposition needs one uniform rate",
                    phi[(j, k)],
                    rate
                )));
            }
        }
    }
    let transformed = &basis.alpha * phi * basis.alpha.transpose();
    let bright_rate = transformed[(0, 0)];
    let assert_tol = BASIS_TOL * bright_rate.abs().max(1.0);
    for k in 0..n {
        for kp in 0..n {
            if (k, kp) != (0, 0) {
                debug_assert!(
                    transformed[(k, kp)].abs() <= assert_tol,
                    "off-bright damping leak at ({k}, {kp}): {:.3e}",
                    transformed[(k, kp)]
                );
            }
        }
    }
    Ok(TransformedDamping { matrix: transformed, bright_rate, uniform_rate: rate })
}

/// Residual of the weighted-energy identity
/// `sum_j omega_j (<q_j^2> + <p_j^2>) = sum_{k,k'} g_kk' (<Q_k Q_k'> + <P_k P_k'>)`.
///
/// The identity holds for any covariance because the basis is orthogonal;
/// the returned residual is floating-point noise and should be at most
/// `1e-10` times the weighted energy itself.
pub fn energy_form_identity_check(
    basis: &ModeBasis,
    frequencies: &[f64],
    covariance: &DMatrix<f64>,
) -> Result<f64> {
    let n = basis.n_modes();
    if frequencies.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} frequencies supplied for a {n}-mode basis",
            frequencies.len()
        )));
    }
    if covariance.nrows() != 2 * n || covariance.ncols() != 2 * n {
        return Err(Error::InvalidParameter(format!(
            "covariance is {}x{} but the basis describes {n} modes",
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    let lhs: f64 = (0..n)
        .map(|j| frequencies[j] * (covariance[(2 * j, 2 * j)] + covariance[(2 * j + 1, 2 * j + 1)]))
        .sum();
    let spectrum = collective_spectrum(basis, frequencies)?;
    let collective = transform_covariance(basis, covariance)?;
    let mut rhs = 0.0;
    for k in 0..n {
        for kp in 0..n {
            rhs += spectrum.couplings[(k, kp)]
                * (collective[(2 * k, 2 * kp)] + collective[(2 * k + 1, 2 * kp + 1)]);
        }
    }
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::solve_for_config;
    use crate::model::{CavitySpec, MechanicalMode};
    use crate::testutil::random_config;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_config(n: usize, omega: impl Fn(usize) -> f64) -> SystemConfig {
        // Uniform feedback rate: equal gains and equal G_k omega_k.
        let kappa = 5.0;
        let modes = (0..n)
            .map(|j| MechanicalMode {
                omega: omega(j),
                gamma: 1.0e-6,
                nbar: 50.0,
                coupling_g: 0.1 / omega(j),
                gain_cd: 0.5,
            })
            .collect();
        SystemConfig {
            modes,
            cavity: CavitySpec { kappa, omega_fb: 8.0, eta: 1.0, detuning: 0.0 },
        }
    }

    #[test]
    fn basis_matches_hand_values_for_small_n() {
        let b1 = gram_schmidt_basis(1).unwrap();
        assert_eq!(b1.alpha[(0, 0)], 1.0);

        let b2 = gram_schmidt_basis(2).unwrap();
        let s2 = 1.0 / 2.0_f64.sqrt();
        assert_relative_eq!(b2.alpha[(0, 0)], s2, max_relative = 1e-15);
        assert_relative_eq!(b2.alpha[(0, 1)], s2, max_relative = 1e-15);
        assert_relative_eq!(b2.alpha[(1, 0)], s2, max_relative = 1e-15);
        assert_relative_eq!(b2.alpha[(1, 1)], -s2, max_relative = 1e-15);

        let b3 = gram_schmidt_basis(3).unwrap();
        let s6 = 1.0 / 6.0_f64.sqrt();
        let expected = [
            [1.0 / 3.0_f64.sqrt(); 3],
            [s6, -2.0 * s6, s6],
            [s2, 0.0, -s2],
        ];
        for (k, row) in expected.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                assert!(
                    (b3.alpha[(k, j)] - want).abs() < 1e-14,
                    "alpha[({k},{j})] = {} != {want}",
                    b3.alpha[(k, j)],
                );
            }
        }
    }

    #[test]
    fn basis_is_orthonormal_with_zero_sum_dark_rows_up_to_64() {
        for n in 1..=64 {
            let basis = gram_schmidt_basis(n).unwrap();
            let gram = &basis.alpha * basis.alpha.transpose();
            for k in 0..n {
                for kp in 0..n {
                    let expect = if k == kp { 1.0 } else { 0.0 };
                    assert!(
                        (gram[(k, kp)] - expect).abs() <= BASIS_TOL,
                        "gram[({k},{kp})] = {} at n={n}",
                        gram[(k, kp)]
                    );
                }
            }
            for k in 1..n {
                let sum: f64 = (0..n).map(|j| basis.alpha[(k, j)]).sum();
                assert!(sum.abs() <= BASIS_TOL, "dark row {k} sums to {sum} at n={n}");
            }
        }
    }

    #[test]
    fn spectrum_matches_three_mode_hand_values() {
        let basis = gram_schmidt_basis(3).unwrap();
        let (w1, w2, w3) = (1.0, 0.95, 0.9);
        let spec = collective_spectrum(&basis, &[w1, w2, w3]).unwrap();
        assert_relative_eq!(spec.omega[0], (w1 + w2 + w3) / 3.0, max_relative = 1e-14);
        assert_relative_eq!(spec.omega[1], (w1 + 4.0 * w2 + w3) / 6.0, max_relative = 1e-14);
        assert_relative_eq!(spec.omega[2], (w1 + w3) / 2.0, max_relative = 1e-14);
        let s = |x: f64| x.sqrt();
        assert_relative_eq!(
            spec.couplings[(0, 1)],
            (w1 - 2.0 * w2 + w3) / (3.0 * s(2.0)),
            max_relative = 1e-12
        );
        assert_relative_eq!(spec.couplings[(0, 2)], (w1 - w3) / s(6.0), max_relative = 1e-12);
        assert_relative_eq!(spec.couplings[(1, 2)], (w1 - w3) / (2.0 * s(3.0)), max_relative = 1e-12);
    }

    #[test]
    fn spectrum_two_mode_bright_dark_coupling() {
        let basis = gram_schmidt_basis(2).unwrap();
        let spec = collective_spectrum(&basis, &[1.0, 0.9]).unwrap();
        assert_relative_eq!(spec.couplings[(0, 1)], 0.05, max_relative = 1e-12);
        assert_relative_eq!(spec.omega[0], 0.95, max_relative = 1e-14);
    }

    #[test]
    fn degenerate_frequencies_decouple_the_spectrum() {
        let basis = gram_schmidt_basis(5).unwrap();
        let spec = collective_spectrum(&basis, &[2.0; 5]).unwrap();
        for k in 0..5 {
            assert_relative_eq!(spec.omega[k], 2.0, max_relative = 1e-13);
            for kp in 0..5 {
                if k != kp {
                    assert!(spec.couplings[(k, kp)].abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn linear_dispersion_couplings_reduce_to_index_contraction() {
        // omega_j = wbar + j * delta gives
        // g_kk' = wbar delta_kk' + delta * sum_j j alpha_kj alpha_k'j.
        let n = 6;
        let (wbar, delta) = (3.0, 0.07);
        let basis = gram_schmidt_basis(n).unwrap();
        let freqs: Vec<f64> = (0..n).map(|j| wbar + j as f64 * delta).collect();
        let spec = collective_spectrum(&basis, &freqs).unwrap();
        for k in 0..n {
            for kp in 0..n {
                let contraction: f64 =
                    (0..n).map(|j| j as f64 * basis.alpha[(k, j)] * basis.alpha[(kp, j)]).sum();
                let expect = if k == kp { wbar + delta * contraction } else { delta * contraction };
                assert!(
                    (spec.couplings[(k, kp)] - expect).abs() < 1e-12,
                    "coupling ({k},{kp})"
                );
            }
        }
    }

    #[test]
    fn transformed_damping_concentrates_on_bright_mode() {
        for n in 2..=6 {
            let cfg = uniform_config(n, |_| 1.0);
            let basis = gram_schmidt_basis(n).unwrap();
            let td = transformed_damping(&basis, &cfg).unwrap();
            let gamma = 0.5 * 0.1 / 5.0;
            assert_relative_eq!(td.uniform_rate, gamma, max_relative = 1e-12);
            assert_relative_eq!(td.bright_rate, n as f64 * gamma, max_relative = 1e-12);
            for k in 0..n {
                for kp in 0..n {
                    if (k, kp) != (0, 0) {
                        assert!(td.matrix[(k, kp)].abs() <= BASIS_TOL * td.bright_rate.max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn transformed_damping_rejects_unequal_rates() {
        let mut cfg = uniform_config(3, |_| 1.0);
        cfg.modes[1].gain_cd *= 1.5;
        let basis = gram_schmidt_basis(3).unwrap();
        match transformed_damping(&basis, &cfg) {
            Err(crate::Error::UnequalRates(_)) => {}
            other => panic!("expected UnequalRates, got {other:?}"),
        }
    }

    #[test]
    fn energy_identity_holds_for_exact_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut checked = 0;
        while checked < 5 {
            let cfg = random_config(&mut rng, 4);
            let Ok(sol) = solve_for_config(&cfg) else { continue };
            let basis = gram_schmidt_basis(4).unwrap();
            let freqs = cfg.omegas();
            let residual = energy_form_identity_check(&basis, &freqs, &sol.covariance).unwrap();
            let total: f64 = (0..4)
                .map(|j| {
                    freqs[j]
                        * (sol.covariance[(2 * j, 2 * j)] + sol.covariance[(2 * j + 1, 2 * j + 1)])
                })
                .sum();
            assert!(residual <= 1e-10 * total, "residual {residual:.3e} vs total {total:.3e}");
            checked += 1;
        }
    }

    #[test]
    fn dark_modes_stay_thermal_when_frequencies_are_degenerate() {
        // All frequencies equal: the dark sector decouples from the loop
        // entirely and each dark mode thermalizes at nbar + 1/2, while the
        // bright mode is cold. Tiny gamma keeps the dark sector stable.
        let n = 4;
        let cfg = uniform_config(n, |_| 1.0);
        let sol = solve_for_config(&cfg).unwrap();
        let basis = gram_schmidt_basis(n).unwrap();
        let collective = transform_covariance(&basis, &sol.covariance).unwrap();
        for k in 1..n {
            let energy = 0.5 * (collective[(2 * k, 2 * k)] + collective[(2 * k + 1, 2 * k + 1)]);
            assert_relative_eq!(energy, 50.5, max_relative = 1e-6);
        }
        let bright = 0.5 * (collective[(0, 0)] + collective[(1, 1)]);
        assert!(bright < 5.0, "bright mode should be cold, got {bright}");
    }
}
