//! System description and the matrices of the reduced linear model.
//!
//! A set of N mechanical modes couples to one overdamped cavity quadrature;
//! a cold-damping feedback loop filters the measured phase quadrature and
//! feeds it back as a force. After adiabatic elimination of cavity and
//! filter, the mechanics obey a linear Langevin system
//!
//! ```text
//!   dq_j/dt = omega_j p_j
//!   dp_j/dt = -omega_j q_j - sum_k Gamma_jk p_k + noise
//! ```
//!
//! with a non-symmetric damping matrix `Gamma` and a momentum-sector
//! diffusion matrix built from thermal noise plus rank-one optical
//! back-action. Those two matrices, together with the drift they induce,
//! are what every solver in this crate consumes.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One mechanical resonator. Frequencies and rates are expressed in units of
/// the first mode's resonance frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanicalMode {
    /// Resonance frequency `omega_j` (> 0).
    pub omega: f64,
    /// Intrinsic damping rate `gamma_j` (>= 0).
    pub gamma: f64,
    /// Thermal bath occupancy `nbar_j` (>= 0).
    pub nbar: f64,
    /// Effective optomechanical coupling `G_j`, already enhanced by the
    /// intracavity amplitude.
    pub coupling_g: f64,
    /// Cold-damping feedback gain `g_cd_j` (>= 0).
    pub gain_cd: f64,
}

/// Cavity and feedback-loop parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CavitySpec {
    /// Cavity linewidth `kappa` (> 0). The reduced model assumes
    /// `kappa >> omega_j`.
    pub kappa: f64,
    /// Feedback filter cutoff `omega_fb` (> 0), intended `omega_fb >~ kappa`.
    pub omega_fb: f64,
    /// Detection efficiency `eta` in (0, 1].
    pub eta: f64,
    /// Cavity detuning. Only the resonant case `detuning = 0` is supported
    /// by the linear-response machinery; the validator rejects anything else.
    pub detuning: f64,
}

impl Default for CavitySpec {
    fn default() -> Self {
        CavitySpec { kappa: 1.0, omega_fb: 1.0, eta: 1.0, detuning: 0.0 }
    }
}

/// Full system: the mechanical modes plus the shared cavity/feedback loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub modes: Vec<MechanicalMode>,
    pub cavity: CavitySpec,
}

impl SystemConfig {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.omega).collect()
    }

    fn max_omega(&self) -> f64 {
        self.modes.iter().map(|m| m.omega).fold(0.0, f64::max)
    }

    /// Checks every field against its stated range and returns regime
    /// warnings. Errors are hard failures; warnings flag configs that are
    /// legal but outside the regime where the reduced model is accurate.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.modes.is_empty() {
            return Err(Error::Validation("at least one mechanical mode is required".into()));
        }
        for (j, m) in self.modes.iter().enumerate() {
            let all = [m.omega, m.gamma, m.nbar, m.coupling_g, m.gain_cd];
            if all.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("mode {j}: non-finite parameter")));
            }
            if m.omega <= 0.0 {
                return Err(Error::Validation(format!("mode {j}: omega must be > 0")));
            }
            if m.gamma < 0.0 {
                return Err(Error::Validation(format!("mode {j}: gamma must be >= 0")));
            }
            if m.nbar < 0.0 {
                return Err(Error::Validation(format!("mode {j}: nbar must be >= 0")));
            }
            if m.gain_cd < 0.0 {
                return Err(Error::Validation(format!("mode {j}: gain_cd must be >= 0")));
            }
        }
        let c = &self.cavity;
        if ![c.kappa, c.omega_fb, c.eta, c.detuning].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("cavity: non-finite parameter".into()));
        }
        if c.kappa <= 0.0 {
            return Err(Error::Validation("cavity: kappa must be > 0".into()));
        }
        if c.omega_fb <= 0.0 {
            return Err(Error::Validation("cavity: omega_fb must be > 0".into()));
        }
        if !(c.eta > 0.0 && c.eta <= 1.0) {
            return Err(Error::Validation("cavity: eta must lie in (0, 1]".into()));
        }
        if c.detuning != 0.0 {
            return Err(Error::Validation(
                "cavity: nonzero detuning is not supported; set detuning = 0".into(),
            ));
        }

        let mut warnings = Vec::new();
        let w_max = self.max_omega();
        if c.kappa < 3.0 * w_max {
            warnings.push(format!(
                "kappa = {} is below 3*max(omega) = {}; the adiabatic elimination \
                 of the cavity degrades outside kappa >> omega",
                c.kappa,
                3.0 * w_max
            ));
        }
        if c.omega_fb < c.kappa {
            warnings.push(format!(
                "omega_fb = {} is below kappa = {}; the feedback filter is slower \
                 than the cavity and the derivative estimate degrades",
                c.omega_fb, c.kappa
            ));
        }
        Ok(warnings)
    }
}

/// Feedback damping matrix `Gamma` (N x N, generally non-symmetric):
///
/// ```text
///   Gamma_jj = gamma_j + g_cd_j G_j omega_j / kappa
///   Gamma_jk = g_cd_j G_k omega_k / kappa        (j != k)
/// ```
///
/// The feedback part is the rank-one outer product `g_cd (G o omega)^T / kappa`;
/// only the intrinsic rates sit purely on the diagonal.
pub fn damping_matrix(config: &SystemConfig) -> DMatrix<f64> {
    let n = config.n_modes();
    let kappa = config.cavity.kappa;
    DMatrix::from_fn(n, n, |j, k| {
        let fb = config.modes[j].gain_cd * config.modes[k].coupling_g * config.modes[k].omega
            / kappa;
        if j == k {
            config.modes[j].gamma + fb
        } else {
            fb
        }
    })
}

/// Drift matrix `M` (2N x 2N) of the reduced model in the ordering
/// `(q_1, p_1, ..., q_N, p_N)`:
/// row `q_j` holds `+omega_j` in column `p_j`; row `p_j` holds `-omega_j`
/// in column `q_j` and `-Gamma_jk` in every column `p_k`.
pub fn drift_matrix(config: &SystemConfig) -> DMatrix<f64> {
    let n = config.n_modes();
    let gamma = damping_matrix(config);
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..n {
        m[(2 * j, 2 * j + 1)] = config.modes[j].omega;
        m[(2 * j + 1, 2 * j)] = -config.modes[j].omega;
        for k in 0..n {
            m[(2 * j + 1, 2 * k + 1)] = -gamma[(j, k)];
        }
    }
    m
}

/// Diffusion matrix `D` (2N x 2N). Only momentum-momentum entries are
/// nonzero: a diagonal thermal part plus the rank-one optical back-action
/// shared through the common cavity field,
///
/// ```text
///   D[p_i, p_j] = (2 nbar_i + 1) gamma_i delta_ij + G_i G_j / kappa .
/// ```
pub fn diffusion_matrix(config: &SystemConfig) -> DMatrix<f64> {
    let n = config.n_modes();
    let kappa = config.cavity.kappa;
    let mut d = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let mut v = config.modes[i].coupling_g * config.modes[j].coupling_g / kappa;
            if i == j {
                v += (2.0 * config.modes[i].nbar + 1.0) * config.modes[i].gamma;
            }
            d[(2 * i + 1, 2 * j + 1)] = v;
        }
    }
    d
}

/// The `(M, D)` pair consumed by the covariance solvers. `diffusion` is
/// symmetric positive semidefinite and lives entirely in the momentum sector.
#[derive(Debug, Clone)]
pub struct DriftDiffusionPair {
    pub drift: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
}

impl DriftDiffusionPair {
    /// Builds both matrices after validating the config. Warnings are
    /// dropped here; call [`SystemConfig::validate`] directly to see them.
    pub fn from_config(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        Ok(DriftDiffusionPair {
            drift: drift_matrix(config),
            diffusion: diffusion_matrix(config),
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }
}

/// Laser drive and bare optomechanical couplings, used only to derive the
/// classical intracavity working point and the effective couplings `G_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalDrive {
    /// Single-photon couplings `g_om_j` (one per mode).
    pub g_om: Vec<f64>,
    /// Drive amplitude `epsilon` (>= 0).
    pub epsilon: f64,
    /// Bare cavity detuning before the static radiation-pressure shift.
    pub detuning0: f64,
}

/// Classical working point of the driven cavity.
#[derive(Debug, Clone, PartialEq)]
pub struct CavitySteadyState {
    /// Intracavity amplitude `|<A>|`.
    pub amplitude: f64,
    /// Intracavity photon number `|<A>|^2`.
    pub photon_number: f64,
    /// Self-consistent detuning `Delta = Delta_0 - sum_j g_om_j^2/omega_j |<A>|^2`.
    pub effective_detuning: f64,
    /// Static displacements `<Q_j> = (g_om_j/omega_j) |<A>|^2`.
    pub mean_shifts: Vec<f64>,
    /// Number of distinct non-negative real roots of the photon-number
    /// cubic; > 1 flags a bistable drive.
    pub root_multiplicity: usize,
}

const FIXED_POINT_MAX_ITERS: usize = 10_000;
const FIXED_POINT_REL_TOL: f64 = 1e-12;

/// Solves the self-consistent intracavity photon number
/// `u = epsilon^2 / (kappa^2 + Delta(u)^2)` with `Delta(u) = Delta_0 - S u`,
/// `S = sum_j g_om_j^2 / omega_j`, by damped fixed-point iteration from
/// `u = 0`. Starting at zero and damping by 1/2 lands on the smallest
/// non-negative root when the drive is bistable; `root_multiplicity` in the
/// result reports how many roots the cubic has.
pub fn intracavity_steady_state(
    drive: &PhysicalDrive,
    config: &SystemConfig,
) -> Result<CavitySteadyState> {
    if drive.g_om.len() != config.n_modes() {
        return Err(Error::InvalidParameter(format!(
            "drive lists {} couplings for {} modes",
            drive.g_om.len(),
            config.n_modes()
        )));
    }
    if !drive.epsilon.is_finite() || drive.epsilon < 0.0 {
        return Err(Error::InvalidParameter("drive epsilon must be finite and >= 0".into()));
    }
    if !drive.detuning0.is_finite() || drive.g_om.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidParameter("drive parameters must be finite".into()));
    }

    let kappa = config.cavity.kappa;
    let s: f64 = drive
        .g_om
        .iter()
        .zip(&config.modes)
        .map(|(g, m)| g * g / m.omega)
        .sum();
    let eps2 = drive.epsilon * drive.epsilon;
    let phi = |u: f64| {
        let delta = drive.detuning0 - s * u;
        eps2 / (kappa * kappa + delta * delta)
    };

    let mut u = 0.0_f64;
    let mut converged = false;
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let next = 0.5 * u + 0.5 * phi(u);
        let scale = next.abs().max(1e-300);
        if (next - u).abs() <= FIXED_POINT_REL_TOL * scale {
            u = next;
            converged = true;
            break;
        }
        u = next;
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: FIXED_POINT_MAX_ITERS });
    }
    // Polish with undamped iterations while they still shrink the defect;
    // near a contracting root this lands on the fixed point to machine
    // precision instead of stalling at the damped tolerance.
    let mut defect = (phi(u) - u).abs();
    for _ in 0..64 {
        if defect == 0.0 {
            break;
        }
        let next = phi(u);
        let next_defect = (phi(next) - next).abs();
        if next_defect < defect {
            u = next;
            defect = next_defect;
        } else {
            break;
        }
    }

    let effective_detuning = drive.detuning0 - s * u;
    let mean_shifts = drive
        .g_om
        .iter()
        .zip(&config.modes)
        .map(|(g, m)| g / m.omega * u)
        .collect();
    Ok(CavitySteadyState {
        amplitude: u.sqrt(),
        photon_number: u,
        effective_detuning,
        mean_shifts,
        root_multiplicity: photon_cubic_roots(s, drive.detuning0, kappa, eps2).len(),
    })
}

/// Drive-enhanced couplings `G_j = sqrt(2) g_om_j |<A>|`.
pub fn effective_couplings(drive: &PhysicalDrive, amplitude: f64) -> Vec<f64> {
    drive.g_om.iter().map(|g| std::f64::consts::SQRT_2 * g * amplitude).collect()
}

/// Distinct non-negative real roots of
/// `S^2 u^3 - 2 Delta_0 S u^2 + (kappa^2 + Delta_0^2) u - eps^2 = 0`,
/// ascending. Used only to report multiplicity.
fn photon_cubic_roots(s: f64, detuning0: f64, kappa: f64, eps2: f64) -> Vec<f64> {
    let a = s * s;
    let c = kappa * kappa + detuning0 * detuning0;
    let mut roots = if a == 0.0 {
        // Linear: c u = eps^2 with c > 0.
        vec![eps2 / c]
    } else {
        let b = -2.0 * detuning0 * s;
        real_cubic_roots(a, b, c, -eps2)
    };
    roots.retain(|r| *r >= -1e-12);
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // Merge roots that coincide to solver precision.
    let mut distinct: Vec<f64> = Vec::new();
    for r in roots {
        let r = r.max(0.0);
        match distinct.last() {
            Some(last) if (r - last).abs() <= 1e-7 * r.abs().max(1.0) => {}
            _ => distinct.push(r),
        }
    }
    distinct
}

/// Real roots of `a x^3 + b x^2 + c x + d = 0` with `a != 0`, via the
/// trigonometric/Cardano split on the depressed cubic.
fn real_cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let b = b / a;
    let c = c / a;
    let d = d / a;
    // x = t - b/3 turns the cubic into t^3 + p t + q.
    let shift = b / 3.0;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
    let mut roots = Vec::new();
    if disc > 0.0 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        roots.push(u + v - shift);
    } else if disc == 0.0 {
        if q == 0.0 {
            roots.push(-shift);
        } else {
            let u = (-q / 2.0).cbrt();
            roots.push(2.0 * u - shift);
            roots.push(-u - shift);
        }
    } else {
        // Three real roots.
        let r = (-p / 3.0).sqrt();
        let theta = (3.0 * q / (2.0 * p) / r).clamp(-1.0, 1.0).acos() / 3.0;
        for k in 0..3 {
            let t = 2.0 * r * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
            roots.push(t - shift);
        }
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::two_mode_reference;
    use approx::assert_relative_eq;

    fn single_mode(gamma: f64) -> SystemConfig {
        SystemConfig {
            modes: vec![MechanicalMode {
                omega: 1.0,
                gamma,
                nbar: 100.0,
                coupling_g: 0.16,
                gain_cd: 0.8,
            }],
            cavity: CavitySpec { kappa: 3.0, omega_fb: 3.5, eta: 1.0, detuning: 0.0 },
        }
    }

    #[test]
    fn damping_matrix_single_mode_diagonal() {
        let g = damping_matrix(&single_mode(1.0e-5));
        assert_relative_eq!(g[(0, 0)], 1.0e-5 + 0.8 * 0.16 * 1.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn damping_matrix_two_mode_cross_rates() {
        let g = damping_matrix(&two_mode_reference());
        assert_relative_eq!(g[(0, 1)], 0.8 * 0.1 * 0.9 / 3.0, max_relative = 1e-15); // 0.024
        assert_relative_eq!(g[(1, 0)], 0.8 * 0.16 * 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(g[(0, 0)], 4.0e-5 + 0.8 * 0.16 * 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(g[(1, 1)], 3.0e-5 + 0.8 * 0.1 * 0.9 / 3.0, max_relative = 1e-15);
        // The matrix is genuinely non-symmetric.
        assert!((g[(0, 1)] - g[(1, 0)]).abs() > 1e-3);
    }

    #[test]
    fn drift_matrix_layout() {
        let cfg = two_mode_reference();
        let m = drift_matrix(&cfg);
        let gamma = damping_matrix(&cfg);
        assert_eq!(m.nrows(), 4);
        assert_relative_eq!(m[(0, 1)], 1.0);
        assert_relative_eq!(m[(2, 3)], 0.9);
        assert_relative_eq!(m[(1, 0)], -1.0);
        assert_relative_eq!(m[(3, 2)], -0.9);
        assert_relative_eq!(m[(1, 3)], -0.024, max_relative = 1e-15);
        for j in 0..2 {
            for k in 0..2 {
                assert_relative_eq!(m[(2 * j + 1, 2 * k + 1)], -gamma[(j, k)]);
            }
        }
        // q-rows carry nothing except the omega entry.
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m[(0, 3)], 0.0);
        assert_eq!(m[(2, 0)], 0.0);
    }

    #[test]
    fn diffusion_matrix_momentum_sector_only() {
        let cfg = two_mode_reference();
        let d = diffusion_matrix(&cfg);
        assert_relative_eq!(
            d[(1, 1)],
            (2.0 * 100.0 + 1.0) * 4.0e-5 + 0.16 * 0.16 / 3.0,
            max_relative = 1e-15
        ); // 0.0105433...
        assert_relative_eq!(d[(1, 3)], 0.16 * 0.1 / 3.0, max_relative = 1e-15); // 0.005333...
        assert_relative_eq!(d[(3, 1)], d[(1, 3)]);
        for i in 0..4 {
            assert_eq!(d[(0, i)], 0.0);
            assert_eq!(d[(2, i)], 0.0);
            assert_eq!(d[(i, 0)], 0.0);
            assert_eq!(d[(i, 2)], 0.0);
        }
        // Symmetric positive semidefinite.
        assert_eq!(d, d.transpose());
        let eig = d.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|l| *l >= -1e-15));
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = two_mode_reference();
        cfg.modes[1].omega = -0.9;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));

        let mut cfg = two_mode_reference();
        cfg.cavity.eta = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));

        let mut cfg = two_mode_reference();
        cfg.cavity.detuning = 0.3;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));

        let mut cfg = two_mode_reference();
        cfg.modes[0].gamma = f64::NAN;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));

        let cfg = SystemConfig { modes: vec![], cavity: CavitySpec::default() };
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn validation_warns_outside_fast_cavity_regime() {
        let ok = two_mode_reference().validate().unwrap();
        assert!(ok.is_empty(), "reference config should not warn: {ok:?}");

        let mut slow_cavity = two_mode_reference();
        slow_cavity.cavity.kappa = 1.5;
        slow_cavity.cavity.omega_fb = 1.5;
        let warnings = slow_cavity.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("kappa"));

        let mut slow_filter = two_mode_reference();
        slow_filter.cavity.omega_fb = 3.0 - 1e-9;
        let warnings = slow_filter.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("omega_fb"));
    }

    #[test]
    fn steady_state_undriven_cavity_is_exact() {
        let cfg = two_mode_reference();
        let drive = PhysicalDrive { g_om: vec![0.0, 0.0], epsilon: 10.0, detuning0: 0.0 };
        let ss = intracavity_steady_state(&drive, &cfg).unwrap();
        assert_relative_eq!(ss.amplitude * cfg.cavity.kappa, 10.0, max_relative = 1e-14);
        assert_eq!(ss.effective_detuning, 0.0);
        assert_eq!(ss.mean_shifts, vec![0.0, 0.0]);
        assert_eq!(ss.root_multiplicity, 1);
    }

    #[test]
    fn steady_state_matches_brute_force_root() {
        // Detuning chosen so the self-consistent detuning vanishes at the
        // fixed point; then |A| = eps/kappa exactly.
        let mut cfg = two_mode_reference();
        cfg.modes[0].omega = 1.0;
        cfg.modes[1].omega = 1.1;
        let (eps, kappa): (f64, f64) = (10.0, 3.0);
        let s = 0.01f64.powi(2) * (1.0 / 1.0 + 1.0 / 1.1);
        let u_expected = (eps / kappa).powi(2);
        let drive =
            PhysicalDrive { g_om: vec![0.01, 0.01], epsilon: eps, detuning0: s * u_expected };
        let ss = intracavity_steady_state(&drive, &cfg).unwrap();

        // Independent oracle: scan the cubic u (kappa^2 + Delta(u)^2) = eps^2
        // for a sign change and bisect.
        let f = |u: f64| {
            let delta = drive.detuning0 - s * u;
            u * (kappa * kappa + delta * delta) - eps * eps
        };
        let mut lo = 0.0;
        let mut hi = 2.0 * u_expected;
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let u_scan = 0.5 * (lo + hi);
        assert_relative_eq!(ss.photon_number, u_scan, max_relative = 1e-10);
        assert_relative_eq!(ss.photon_number, u_expected, max_relative = 1e-10);
        assert_relative_eq!(ss.effective_detuning, 0.0, epsilon = 1e-10);
        assert_relative_eq!(ss.mean_shifts[0], 0.01 / 1.0 * u_expected, max_relative = 1e-10);
        assert_eq!(ss.root_multiplicity, 1);
    }

    #[test]
    fn steady_state_reports_bistability() {
        // Strong drive and large static shift push the cubic into the
        // three-root regime; the solver must land on the smallest root.
        let cfg = single_mode(1.0e-5);
        let drive = PhysicalDrive { g_om: vec![0.5], epsilon: 25.0, detuning0: 12.0 };
        let s = 0.25;
        let ss = intracavity_steady_state(&drive, &cfg).unwrap();
        assert_eq!(ss.root_multiplicity, 3);
        let roots = photon_cubic_roots(s, 12.0, 3.0, 625.0);
        assert_eq!(roots.len(), 3);
        assert_relative_eq!(ss.photon_number, roots[0], max_relative = 1e-9);
        // Each reported root actually solves the cubic.
        for r in &roots {
            let delta = 12.0 - s * r;
            assert_relative_eq!(r * (9.0 + delta * delta), 625.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn effective_couplings_scale() {
        let drive = PhysicalDrive { g_om: vec![0.01, 0.02], epsilon: 1.0, detuning0: 0.0 };
        let g = effective_couplings(&drive, 8.0);
        assert_relative_eq!(g[0], std::f64::consts::SQRT_2 * 0.08, max_relative = 1e-15);
        assert_relative_eq!(g[1], std::f64::consts::SQRT_2 * 0.16, max_relative = 1e-15);
    }

    #[test]
    fn cubic_roots_cover_all_cases() {
        // (x-1)(x-2)(x-3) = x^3 - 6x^2 + 11x - 6
        let mut r = real_cubic_roots(1.0, -6.0, 11.0, -6.0);
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(r.len(), 3);
        assert_relative_eq!(r[0], 1.0, max_relative = 1e-9);
        assert_relative_eq!(r[1], 2.0, max_relative = 1e-9);
        assert_relative_eq!(r[2], 3.0, max_relative = 1e-9);
        // One real root.
        let r = real_cubic_roots(1.0, 0.0, 1.0, -1.0);
        assert_eq!(r.len(), 1);
        let x = r[0];
        assert_relative_eq!(x * x * x + x - 1.0, 0.0, epsilon = 1e-12);
    }
}
