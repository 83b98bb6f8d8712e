//! Closed-form steady-state estimates.
//!
//! For well-separated mechanical frequencies the stationary second moments
//! admit explicit expressions: the momentum variance of each mode is its
//! independent-feedback value plus pairwise cross-talk corrections weighted
//! by inverse squared frequency gaps, and the position variance differs from
//! it by an explicit equipartition-violation sum. On a near-uniform frequency
//! ladder the per-mode energy collapses further to a nearest-neighbor form
//! with an overall `1/(4 dw^2)` prefactor.
//!
//! All routines here are algebraic in the configuration; they never solve a
//! linear system. Use [`crate::lyapunov`] for the exact covariance, and this
//! module to understand and predict it. The closed forms lose validity when
//! frequency gaps become comparable to the damping rates; in that regime they
//! return [`Error::DegenerateFrequencies`] instead of a wrong number.

use crate::error::{Error, Result};
use crate::model::{damping_matrix, SystemConfig};
use nalgebra::DMatrix;

/// Multiple of `max(Gamma_ii) * max(omega)` below which a squared-frequency
/// gap `|omega_i^2 - omega_j^2|` counts as degenerate and the closed forms
/// are refused.
pub const DEGENERACY_FACTOR: f64 = 10.0;

/// Pair heating coefficient: the symmetric combination of thermal decay and
/// back-action noise that controls how strongly modes `i` and `j` heat each
/// other through the shared feedback loop,
/// `L_ij = (g_j/g_i)(2 nbar_i + 1) gamma_i + (g_i/g_j)(2 nbar_j + 1) gamma_j
///         + (g_j G_i - g_i G_j)^2 / (kappa g_i g_j)`
/// with `g_k` the feedback gains. Symmetric under `i <-> j`; vanishing third
/// term when the gain-to-coupling ratios match.
pub fn lambda_coefficient(config: &SystemConfig, i: usize, j: usize) -> Result<f64> {
    let n = config.n_modes();
    if i >= n || j >= n {
        return Err(Error::InvalidParameter(format!(
            "mode index out of range: ({i}, {j}) with {n} modes"
        )));
    }
    if i == j {
        return Err(Error::InvalidParameter(
            "pair coefficient requires two distinct modes".into(),
        ));
    }
    for k in [i, j] {
        if config.modes[k].gain_cd <= 0.0 {
            return Err(Error::ZeroGain { mode: k });
        }
    }
    let (mi, mj) = (&config.modes[i], &config.modes[j]);
    let (gi, gj) = (mi.gain_cd, mj.gain_cd);
    let thermal_i = (gj / gi) * (2.0 * mi.nbar + 1.0) * mi.gamma;
    let thermal_j = (gi / gj) * (2.0 * mj.nbar + 1.0) * mj.gamma;
    let mismatch = gj * mi.coupling_g - gi * mj.coupling_g;
    // Parenthesized so the swapped call rounds identically: the pair
    // coefficient is symmetric bit-for-bit, not just mathematically.
    Ok(thermal_i + thermal_j + mismatch * mismatch / (config.cavity.kappa * (gi * gj)))
}

/// Independent-feedback estimate of a single mode's stationary variance,
/// ignoring every other mode: thermal noise divided by the total damping
/// plus the measurement back-action floor,
/// `(nbar_i + 1/2) gamma_i / Gamma_ii + G_i^2 / (2 Gamma_ii kappa)`.
pub fn independent_baseline(config: &SystemConfig, i: usize) -> Result<f64> {
    let n = config.n_modes();
    if i >= n {
        return Err(Error::InvalidParameter(format!(
            "mode index out of range: {i} with {n} modes"
        )));
    }
    let gamma = damping_matrix(config);
    baseline_from(config, &gamma, i)
}

fn baseline_from(config: &SystemConfig, gamma: &DMatrix<f64>, i: usize) -> Result<f64> {
    let rate = gamma[(i, i)];
    if rate <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "mode {i} has no damping (Gamma_ii = {rate}); no stationary variance exists"
        )));
    }
    let m = &config.modes[i];
    Ok((m.nbar + 0.5) * m.gamma / rate
        + m.coupling_g * m.coupling_g / (2.0 * rate * config.cavity.kappa))
}

/// Smallest pairwise squared-frequency gap and the degeneracy threshold the
/// closed forms compare it against.
fn degeneracy_check(config: &SystemConfig, gamma: &DMatrix<f64>) -> Result<()> {
    let n = config.n_modes();
    if n < 2 {
        return Ok(());
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (config.modes[i].omega * config.modes[i].omega
                - config.modes[j].omega * config.modes[j].omega)
                .abs();
            min_gap = min_gap.min(gap);
        }
    }
    let max_rate = (0..n).map(|i| gamma[(i, i)]).fold(0.0_f64, f64::max);
    let max_omega = config.omegas().iter().copied().fold(0.0_f64, f64::max);
    let threshold = DEGENERACY_FACTOR * max_rate * max_omega;
    if min_gap < threshold {
        return Err(Error::DegenerateFrequencies { min_gap, threshold });
    }
    Ok(())
}

/// Closed-form stationary momentum variance `<p_i^2>` of mode `i`:
/// the independent baseline plus pairwise and three-mode cross-talk terms
/// suppressed by the squared-frequency gaps. Requires all feedback gains
/// positive and frequencies non-degenerate.
pub fn variance_p(config: &SystemConfig, i: usize) -> Result<f64> {
    let gamma = damping_matrix(config);
    variance_p_from(config, &gamma, i)
}

/// Closed-form stationary position variance `<q_i^2>`: the momentum variance
/// plus the equipartition-violation sum `sum_j G_ij L_ij / (2 (w_i^2 - w_j^2))`.
pub fn variance_q(config: &SystemConfig, i: usize) -> Result<f64> {
    let gamma = damping_matrix(config);
    Ok(variance_p_from(config, &gamma, i)? + equipartition_gap_from(config, &gamma, i)?)
}

/// The closed-form prediction for `<q_i^2> - <p_i^2>`. Zero only when mode
/// `i` is decoupled from the rest; a driven-damped multimode steady state
/// generally does not equipartition.
pub fn equipartition_gap(config: &SystemConfig, i: usize) -> Result<f64> {
    let gamma = damping_matrix(config);
    equipartition_gap_from(config, &gamma, i)
}

fn variance_p_from(config: &SystemConfig, gamma: &DMatrix<f64>, i: usize) -> Result<f64> {
    let n = config.n_modes();
    if i >= n {
        return Err(Error::InvalidParameter(format!(
            "mode index out of range: {i} with {n} modes"
        )));
    }
    degeneracy_check(config, gamma)?;
    let omega = config.omegas();
    let w2 = |k: usize| omega[k] * omega[k];
    let mut total = baseline_from(config, gamma, i)?;
    let rate_i = gamma[(i, i)];
    for j in 0..n {
        if j == i {
            continue;
        }
        let gap_ij = w2(i) - w2(j);
        let pair = (w2(i) * gamma[(j, j)] + w2(j) * rate_i) * lambda_coefficient(config, i, j)?
            / (gap_ij * gap_ij);
        let mut triple = 0.0;
        for k in 0..n {
            if k == i || k == j {
                continue;
            }
            triple += (w2(i) * gamma[(j, k)] * lambda_coefficient(config, i, k)? / (w2(i) - w2(k))
                - w2(j) * gamma[(i, k)] * lambda_coefficient(config, j, k)? / (w2(j) - w2(k)))
                / gap_ij;
        }
        total += gamma[(i, j)] / (2.0 * rate_i) * (pair + triple);
    }
    Ok(total)
}

fn equipartition_gap_from(config: &SystemConfig, gamma: &DMatrix<f64>, i: usize) -> Result<f64> {
    let n = config.n_modes();
    if i >= n {
        return Err(Error::InvalidParameter(format!(
            "mode index out of range: {i} with {n} modes"
        )));
    }
    degeneracy_check(config, gamma)?;
    let omega = config.omegas();
    let w2 = |k: usize| omega[k] * omega[k];
    let mut gap = 0.0;
    for j in 0..n {
        if j == i {
            continue;
        }
        gap += gamma[(i, j)] * lambda_coefficient(config, i, j)? / (2.0 * (w2(i) - w2(j)));
    }
    Ok(gap)
}

/// Mean spacing of the frequency ladder in configuration order, with
/// warnings when the ladder is visibly non-uniform or not narrowband.
/// Returns `None` for a single mode (no spacing is defined, and none is
/// needed: the nearest-neighbor sums are empty).
fn ladder_spacing(config: &SystemConfig) -> Result<Option<f64>> {
    let omega = config.omegas();
    let n = omega.len();
    if n < 2 {
        return Ok(None);
    }
    let gaps: Vec<f64> = omega.windows(2).map(|w| w[1] - w[0]).collect();
    let spacing = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if spacing <= 0.0 {
        return Err(Error::NotLinearDispersion(format!(
            "mean frequency spacing {spacing:.3e} is not positive; order modes by increasing frequency"
        )));
    }
    let max_dev = gaps.iter().map(|g| (g - spacing).abs()).fold(0.0_f64, f64::max);
    if max_dev >= 0.01 * spacing {
        log::warn!(
            "frequency ladder is not uniform (max spacing deviation {:.2}% of mean); \
             the nearest-neighbor energy formula degrades accordingly",
            100.0 * max_dev / spacing
        );
    }
    let mean_omega = omega.iter().sum::<f64>() / n as f64;
    if mean_omega / spacing <= 10.0 {
        log::warn!(
            "frequency ladder is not narrowband (mean frequency / spacing = {:.2}); \
             the nearest-neighbor energy formula assumes a dense ladder",
            mean_omega / spacing
        );
    }
    Ok(Some(spacing))
}

/// Nearest-neighbor estimate of the stationary energy of mode `i` on a
/// near-uniform frequency ladder `w_j ~ w + j dw`:
/// `E_i = nbar_i gamma_i / Gamma_ii + correction / (4 dw^2)`, where the
/// correction couples each mode only to its immediate frequency neighbors.
/// Unlike [`variance_p`], the cost and the size of the correction do not
/// grow with the number of modes.
pub fn energy_linear_dispersion(config: &SystemConfig, i: usize) -> Result<f64> {
    let gamma = damping_matrix(config);
    let n = config.n_modes();
    if i >= n {
        return Err(Error::InvalidParameter(format!(
            "mode index out of range: {i} with {n} modes"
        )));
    }
    let rate_i = gamma[(i, i)];
    if rate_i <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "mode {i} has no damping (Gamma_ii = {rate_i}); no stationary energy exists"
        )));
    }
    let m = &config.modes[i];
    let lower = m.nbar * m.gamma / rate_i;
    match ladder_spacing(config)? {
        None => Ok(lower),
        Some(spacing) => {
            Ok(lower + neighbor_sum(config, &gamma, i) / (4.0 * spacing * spacing))
        }
    }
}

/// The neighbor correction of [`energy_linear_dispersion`], i.e. everything
/// above the single-mode floor `nbar_i gamma_i / Gamma_ii`.
pub fn neighbor_correction(config: &SystemConfig, i: usize) -> Result<f64> {
    let gamma = damping_matrix(config);
    let n = config.n_modes();
    if i >= n {
        return Err(Error::InvalidParameter(format!(
            "mode index out of range: {i} with {n} modes"
        )));
    }
    match ladder_spacing(config)? {
        None => Ok(0.0),
        Some(spacing) => Ok(neighbor_sum(config, &gamma, i) / (4.0 * spacing * spacing)),
    }
}

/// Equal-gain simplification of the pair coefficient used inside the
/// nearest-neighbor energy: thermal terms only.
fn lambda_thermal(config: &SystemConfig, i: usize, j: usize) -> f64 {
    let (mi, mj) = (&config.modes[i], &config.modes[j]);
    (2.0 * mi.nbar + 1.0) * mi.gamma + (2.0 * mj.nbar + 1.0) * mj.gamma
}

/// Dimensionless nearest-neighbor sum of the ladder energy formula; the
/// caller supplies the `1/(4 dw^2)` prefactor.
fn neighbor_sum(config: &SystemConfig, gamma: &DMatrix<f64>, i: usize) -> f64 {
    let n = config.n_modes();
    let rate_i = gamma[(i, i)];
    let neighbors = |c: usize| -> Vec<usize> {
        let mut out = Vec::new();
        if c >= 1 {
            out.push(c - 1);
        }
        if c + 1 < n {
            out.push(c + 1);
        }
        out
    };
    let mut sum = 0.0;
    for j in neighbors(i) {
        let mut inner = 0.0;
        let mut ks: Vec<usize> = neighbors(i).into_iter().chain(neighbors(j)).collect();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            if k == i || k == j {
                continue;
            }
            let d = |a: usize, b: usize| (a as isize - b as isize) as f64;
            inner += (gamma[(j, k)] * lambda_thermal(config, i, k) / (d(i, j) * d(i, k))
                - gamma[(i, k)] * lambda_thermal(config, j, k) / (d(i, j) * d(j, k)))
                / rate_i;
        }
        sum += gamma[(i, j)] / 2.0
            * ((1.0 + gamma[(j, j)] / rate_i) * lambda_thermal(config, i, j) + inner);
    }
    sum
}

/// Per-mode closed-form estimates.
#[derive(Debug, Clone)]
pub struct ModeEstimate {
    /// Stationary momentum variance `<p_i^2>`.
    pub var_p: f64,
    /// Stationary position variance `<q_i^2>`.
    pub var_q: f64,
    /// Stationary energy `(<q_i^2> + <p_i^2>) / 2`.
    pub energy: f64,
    /// `energy - 1/2`: mean phonon number above the ground state.
    pub occupancy: f64,
    /// Independent-feedback estimate ignoring all other modes.
    pub baseline: f64,
    /// Nearest-neighbor heating correction on a uniform frequency ladder,
    /// `None` when no positive mean spacing exists.
    pub neighbor_correction: Option<f64>,
}

/// Closed-form estimates for every mode.
#[derive(Debug, Clone)]
pub struct AnalyticReport {
    pub modes: Vec<ModeEstimate>,
}

/// Evaluate all closed forms for all modes in one pass.
///
/// Fails with [`Error::DegenerateFrequencies`] outside the validity window;
/// callers that need those regimes must use the exact solver in
/// [`crate::lyapunov`].
pub fn analytic_report(config: &SystemConfig) -> Result<AnalyticReport> {
    config.validate()?;
    let gamma = damping_matrix(config);
    degeneracy_check(config, &gamma)?;
    // A ladder that is not ordered by increasing frequency merely has no
    // nearest-neighbor estimate; the exact-gap closed forms still apply.
    let spacing = match ladder_spacing(config) {
        Ok(s) => s,
        Err(Error::NotLinearDispersion(_)) => None,
        Err(e) => return Err(e),
    };
    let n = config.n_modes();
    let mut modes = Vec::with_capacity(n);
    for i in 0..n {
        let var_p = variance_p_from(config, &gamma, i)?;
        let var_q = var_p + equipartition_gap_from(config, &gamma, i)?;
        let energy = 0.5 * (var_p + var_q);
        modes.push(ModeEstimate {
            var_p,
            var_q,
            energy,
            occupancy: energy - 0.5,
            baseline: baseline_from(config, &gamma, i)?,
            neighbor_correction: spacing
                .map(|s| neighbor_sum(config, &gamma, i) / (4.0 * s * s)),
        });
    }
    Ok(AnalyticReport { modes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{solve_componentwise, solve_for_config, stability_margin};
    use crate::model::{drift_matrix, CavitySpec, MechanicalMode};
    use crate::testutil::{random_separated_config, two_mode_reference};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_coefficient_frozen_value() {
        // g = (0.8, 0.8), G = (0.16, 0.1), kappa = 3, nbar = 100,
        // gamma = (4e-5, 3e-5):
        //   201*4e-5 + 201*3e-5 + (0.8*0.06)^2/(3*0.64) = 0.01407 + 0.0012.
        let cfg = two_mode_reference();
        let lambda = lambda_coefficient(&cfg, 0, 1).unwrap();
        assert_relative_eq!(lambda, 0.01527, max_relative = 1e-12);
    }

    #[test]
    fn pair_coefficient_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=5 {
            for _ in 0..20 {
                let cfg = crate::testutil::random_config(&mut rng, n);
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let a = lambda_coefficient(&cfg, i, j).unwrap();
                        let b = lambda_coefficient(&cfg, j, i).unwrap();
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn pair_coefficient_equal_gain_equal_coupling() {
        let mut cfg = two_mode_reference();
        cfg.modes[1].coupling_g = cfg.modes[0].coupling_g;
        let lambda = lambda_coefficient(&cfg, 0, 1).unwrap();
        assert_relative_eq!(lambda, 201.0 * 4.0e-5 + 201.0 * 3.0e-5, max_relative = 1e-14);
    }

    #[test]
    fn pair_coefficient_rejects_zero_gain() {
        let mut cfg = two_mode_reference();
        cfg.modes[1].gain_cd = 0.0;
        match lambda_coefficient(&cfg, 0, 1) {
            Err(crate::Error::ZeroGain { mode }) => assert_eq!(mode, 1),
            other => panic!("expected ZeroGain, got {other:?}"),
        }
    }

    #[test]
    fn single_mode_reduces_to_baseline() {
        let cfg = SystemConfig {
            modes: vec![MechanicalMode {
                omega: 1.0,
                gamma: 4.0e-5,
                nbar: 100.0,
                coupling_g: 0.16,
                gain_cd: 0.8,
            }],
            cavity: CavitySpec { kappa: 3.0, omega_fb: 3.5, eta: 1.0, detuning: 0.0 },
        };
        let base = independent_baseline(&cfg, 0).unwrap();
        assert_eq!(variance_p(&cfg, 0).unwrap(), base);
        assert_eq!(variance_q(&cfg, 0).unwrap(), base);
        // Hand value: Gamma = 4e-5 + 0.8*0.16/3.
        let rate = 4.0e-5 + 0.8 * 0.16 / 3.0;
        let expect = 100.5 * 4.0e-5 / rate + 0.16 * 0.16 / (2.0 * rate * 3.0);
        assert_relative_eq!(base, expect, max_relative = 1e-15);
    }

    #[test]
    fn baseline_pure_backaction_when_gamma_zero() {
        let cfg = SystemConfig {
            modes: vec![MechanicalMode {
                omega: 1.0,
                gamma: 0.0,
                nbar: 0.0,
                coupling_g: 0.16,
                gain_cd: 0.8,
            }],
            cavity: CavitySpec { kappa: 3.0, omega_fb: 3.5, eta: 1.0, detuning: 0.0 },
        };
        let rate = 0.8 * 0.16 / 3.0;
        assert_relative_eq!(
            independent_baseline(&cfg, 0).unwrap(),
            0.16 * 0.16 / (2.0 * rate * 3.0),
            max_relative = 1e-15
        );
    }

    #[test]
    fn equipartition_gap_is_internal_identity() {
        // Reference pair, pulled apart in frequency so the closed forms
        // accept it (the stock reference gap 0.19 sits under the
        // rejection threshold of about 0.43 on purpose).
        let mut cfg = two_mode_reference();
        cfg.modes[1].omega = 0.6;
        let gap = variance_q(&cfg, 0).unwrap() - variance_p(&cfg, 0).unwrap();
        assert_relative_eq!(gap, equipartition_gap(&cfg, 0).unwrap(), max_relative = 1e-12);
        // Witness that it is nonzero: equipartition genuinely fails.
        assert!(gap.abs() > 0.0);
    }

    #[test]
    fn degenerate_frequencies_are_rejected() {
        let mut cfg = two_mode_reference();
        cfg.modes[1].omega = cfg.modes[0].omega + 1e-6;
        match variance_p(&cfg, 0) {
            Err(crate::Error::DegenerateFrequencies { min_gap, threshold }) => {
                assert!(min_gap < threshold);
            }
            other => panic!("expected DegenerateFrequencies, got {other:?}"),
        }
    }

    #[test]
    fn matches_exact_solver_in_validity_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        for n in 2..=4 {
            for _ in 0..8 {
                let cfg = random_separated_config(&mut rng, n, 25.0, 150.0);
                if stability_margin(&drift_matrix(&cfg)).unwrap() >= -1e-9 {
                    continue;
                }
                let sol = solve_for_config(&cfg).unwrap();
                for i in 0..n {
                    let vp = variance_p(&cfg, i).unwrap();
                    let vq = variance_q(&cfg, i).unwrap();
                    let exact_q = sol.covariance[(2 * i, 2 * i)];
                    let exact_p = sol.covariance[(2 * i + 1, 2 * i + 1)];
                    assert!(
                        (vp - exact_p).abs() <= 0.05 * exact_p.abs(),
                        "var_p off by {:.2}% (n={n}, mode {i})",
                        100.0 * (vp - exact_p).abs() / exact_p
                    );
                    assert!(
                        (vq - exact_q).abs() <= 0.05 * exact_q.abs(),
                        "var_q off by {:.2}% (n={n}, mode {i})",
                        100.0 * (vq - exact_q).abs() / exact_q
                    );
                }
                checked += 1;
            }
        }
        assert!(checked >= 10, "too few stable configs exercised: {checked}");
    }

    #[test]
    fn equipartition_gap_matches_exact_solver_tightly() {
        // In the deep validity window (gamma three orders below Gamma, gaps
        // three orders above) the gap formula tracks the exact solver to
        // better than 1e-6 relative. The exact gap comes out of the
        // structured solver, whose position-sector reconstruction preserves
        // the tiny q-p difference without catastrophic cancellation.
        let cfg = SystemConfig {
            modes: vec![
                MechanicalMode {
                    omega: 1.0,
                    gamma: 1.0e-10,
                    nbar: 1.0e9,
                    coupling_g: 0.03,
                    gain_cd: 1.0,
                },
                MechanicalMode {
                    omega: 2.0,
                    gamma: 1.3e-10,
                    nbar: 8.0e8,
                    coupling_g: 0.045,
                    gain_cd: 0.9,
                },
                MechanicalMode {
                    omega: 3.2,
                    gamma: 0.8e-10,
                    nbar: 1.2e9,
                    coupling_g: 0.06,
                    gain_cd: 1.1,
                },
            ],
            cavity: CavitySpec { kappa: 30.0, omega_fb: 40.0, eta: 1.0, detuning: 0.0 },
        };
        let sol = solve_for_config(&cfg).unwrap();
        for i in 0..3 {
            let exact = sol.covariance[(2 * i, 2 * i)] - sol.covariance[(2 * i + 1, 2 * i + 1)];
            let formula = equipartition_gap(&cfg, i).unwrap();
            assert!(
                (formula - exact).abs() <= 1e-6 * exact.abs(),
                "mode {i}: formula {formula:.9e} vs exact {exact:.9e}"
            );
        }
        // The same moments, extracted from the component-wise reference
        // solver's cross sector, agree too.
        let moments = solve_componentwise(&cfg).unwrap();
        let gamma = damping_matrix(&cfg);
        for i in 0..3 {
            let mut sum = 0.0;
            for k in 0..3 {
                sum += gamma[(i, k)] * moments.cross[(i, k)];
            }
            // The component moments are doubled (cross = 2 V_qp), so halve.
            let exact = -sum / (2.0 * cfg.modes[i].omega);
            let formula = equipartition_gap(&cfg, i).unwrap();
            assert!(
                (formula - exact).abs() <= 1e-6 * exact.abs(),
                "mode {i}: formula {formula:.9e} vs cross-sector {exact:.9e}"
            );
        }
    }

    fn uniform_ladder(n: usize, base: f64, spacing: f64) -> SystemConfig {
        let modes = (0..n)
            .map(|j| MechanicalMode {
                omega: base + j as f64 * spacing,
                gamma: 2.0e-6,
                nbar: 200.0,
                coupling_g: 0.02,
                gain_cd: 0.6,
            })
            .collect();
        SystemConfig {
            modes,
            cavity: CavitySpec { kappa: 10.0, omega_fb: 15.0, eta: 1.0, detuning: 0.0 },
        }
    }

    #[test]
    fn ladder_energy_approaches_floor_for_wide_spacing() {
        // The correction carries an explicit 1/(4 dw^2) prefactor, so widening
        // the ladder must shrink it quadratically and the energy must drop to
        // the single-loop floor.
        let narrow = uniform_ladder(4, 10.0, 0.05);
        let wide = uniform_ladder(4, 10.0, 0.5);
        let floor = |cfg: &SystemConfig, i: usize| {
            let gamma = damping_matrix(cfg);
            cfg.modes[i].nbar * cfg.modes[i].gamma / gamma[(i, i)]
        };
        let narrow_corr = energy_linear_dispersion(&narrow, 1).unwrap() - floor(&narrow, 1);
        let wide_corr = energy_linear_dispersion(&wide, 1).unwrap() - floor(&wide, 1);
        assert!(wide_corr < narrow_corr / 10.0);
        assert!(wide_corr > 0.0);
    }

    #[test]
    fn ladder_correction_prefactor_is_quadratic_in_spacing() {
        // neighbor_sum is independent of the spacing argument, so halving the
        // spacing must exactly quadruple the assembled correction.
        let cfg = uniform_ladder(5, 10.0, 0.2);
        let gamma = damping_matrix(&cfg);
        let s = neighbor_sum(&cfg, &gamma, 2);
        let at = |dw: f64| s / (4.0 * dw * dw);
        assert_relative_eq!(at(0.1), 4.0 * at(0.2), max_relative = 1e-15);
    }

    #[test]
    fn ladder_energy_tracks_exact_solver_on_a_chain() {
        // 8-mode uniform chain with Gamma_ii about spacing/20: the
        // nearest-neighbor formula should land within 10% of the exact
        // energy for every mode.
        let spacing = 0.1;
        let modes: Vec<MechanicalMode> = (0..8)
            .map(|j| MechanicalMode {
                omega: 4.0 + j as f64 * spacing,
                gamma: 5.0e-7,
                nbar: 300.0,
                coupling_g: 0.05 * 10.0 / (0.8 * (4.0 + j as f64 * spacing)) * spacing / 20.0,
                gain_cd: 0.8,
            })
            .collect();
        let cfg = SystemConfig {
            modes,
            cavity: CavitySpec { kappa: 10.0, omega_fb: 15.0, eta: 1.0, detuning: 0.0 },
        };
        let gamma = damping_matrix(&cfg);
        for i in 0..8 {
            assert!(gamma[(i, i)] <= spacing / 10.0);
        }
        let sol = solve_for_config(&cfg).unwrap();
        for i in 0..8 {
            let exact =
                0.5 * (sol.covariance[(2 * i, 2 * i)] + sol.covariance[(2 * i + 1, 2 * i + 1)]);
            let approx_e = energy_linear_dispersion(&cfg, i).unwrap();
            assert!(
                (approx_e - exact).abs() <= 0.10 * exact,
                "mode {i}: ladder {approx_e:.6e} vs exact {exact:.6e}"
            );
        }
    }

    #[test]
    fn ladder_requires_positive_mean_spacing() {
        let mut cfg = uniform_ladder(3, 10.0, 0.2);
        cfg.modes.reverse();
        match energy_linear_dispersion(&cfg, 0) {
            Err(crate::Error::NotLinearDispersion(_)) => {}
            other => panic!("expected NotLinearDispersion, got {other:?}"),
        }
    }

    #[test]
    fn report_collects_all_estimates() {
        let mut cfg = two_mode_reference();
        cfg.modes[1].omega = 0.6;
        let report = analytic_report(&cfg).unwrap();
        assert_eq!(report.modes.len(), 2);
        for (i, m) in report.modes.iter().enumerate() {
            assert_relative_eq!(m.var_p, variance_p(&cfg, i).unwrap(), max_relative = 1e-15);
            assert_relative_eq!(m.var_q, variance_q(&cfg, i).unwrap(), max_relative = 1e-15);
            assert_relative_eq!(m.energy, 0.5 * (m.var_p + m.var_q), max_relative = 1e-15);
            assert_relative_eq!(m.occupancy, m.energy - 0.5, max_relative = 1e-12);
            assert!(m.baseline > 0.0);
        }
        // Frozen arithmetic for the baseline of mode 0:
        // (100.5 * 4e-5) / 0.0427067 + 0.16^2 / (2 * 0.0427067 * 3)
        //   = 0.0941 + 0.0999 approximately.
        let rate = 4.0e-5 + 0.8 * 0.16 / 3.0;
        assert_relative_eq!(
            report.modes[0].baseline,
            100.5 * 4.0e-5 / rate + 0.0256 / (2.0 * rate * 3.0),
            max_relative = 1e-14
        );
        assert!((report.modes[0].baseline - 0.194).abs() < 0.001);
    }
}
