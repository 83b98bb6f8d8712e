//! Exact steady-state covariance of the reduced linear model.
//!
//! For a stable drift `M` and diffusion `D` the stationary covariance `V`
//! solves the algebraic Lyapunov equation `M V + V M^T = -D`. This module
//! solves the vectorized form of that equation with a dense LU
//! factorization. Two equivalent assemblies are used:
//!
//! * when the drift has the canonical oscillator layout (every `q_i` row is
//!   exactly `omega_i p_i`), the position-sector equations are eliminated
//!   analytically first, leaving an `N^2 x N^2` system instead of
//!   `N(2N+1) x N(2N+1)`; this is what makes 50-mode solves cheap,
//! * otherwise the full upper-triangle (half-vectorized) system is built.
//!
//! Both paths are direct solves of the same linear system; a step of
//! iterative refinement on the cached factorization pushes the residual to
//! the `1e-10 ||D||` level whenever the drift is comfortably stable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DriftDiffusionPair, SystemConfig};

/// Margins above `-STABILITY_TOL` count as marginally stable: the solve
/// proceeds with a warning, but no residual guarantee is made.
pub const STABILITY_TOL: f64 = 1e-12;

/// Residual bound enforced for comfortably stable drifts:
/// `||M V + V M^T + D||_max <= RESIDUAL_REL * ||D||_max`.
pub const RESIDUAL_REL: f64 = 1e-10;

/// Steady covariance plus the diagnostics every caller wants next to it.
#[derive(Debug, Clone)]
pub struct SteadyCovariance {
    /// Symmetric `2N x 2N` covariance in the `(q_1, p_1, ...)` ordering.
    pub covariance: DMatrix<f64>,
    /// Spectral abscissa of the drift (most positive eigenvalue real part).
    pub margin: f64,
    /// `||M V + V M^T + D||_max` of the returned solution.
    pub residual: f64,
}

/// Per-mode marginals read off a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeOccupancy {
    pub var_q: f64,
    pub var_p: f64,
    /// `(var_q + var_p) / 2`; equals `nbar + 1/2` for a thermal mode.
    pub energy: f64,
    /// `energy - 1/2`.
    pub occupancy: f64,
}

/// Largest real part over the drift's eigenvalue spectrum. Negative means
/// every fluctuation decays and a stationary covariance exists.
pub fn stability_margin(drift: &DMatrix<f64>) -> Result<f64> {
    let n = drift.nrows();
    if n == 0 || drift.ncols() != n {
        return Err(Error::InvalidParameter("drift must be square and non-empty".into()));
    }
    if drift.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("drift contains non-finite entries".into()));
    }
    let schur = nalgebra::linalg::Schur::try_new(drift.clone(), f64::EPSILON, 200 * n + 2000)
        .ok_or(Error::EigenFailure)?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Solves `M V + V M^T = -D` for the drift/diffusion pair.
///
/// Errors with [`Error::Unstable`] when the margin is not negative and with
/// [`Error::SingularSystem`] when the factorization fails or a comfortably
/// stable system misses the residual bound. Margins in `[-1e-12, 0)` are
/// solved best-effort with a warning.
pub fn solve_steady_lyapunov(pair: &DriftDiffusionPair) -> Result<SteadyCovariance> {
    let m = &pair.drift;
    let d = &pair.diffusion;
    let n = m.nrows();
    if m.ncols() != n || d.nrows() != n || d.ncols() != n {
        return Err(Error::InvalidParameter(
            "drift and diffusion must be square matrices of equal size".into(),
        ));
    }
    let d_scale = max_abs(d);
    if !d_scale.is_finite() {
        return Err(Error::InvalidParameter("diffusion contains non-finite entries".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (d[(i, j)] - d[(j, i)]).abs() > 1e-12 * d_scale.max(1.0) {
                return Err(Error::InvalidParameter("diffusion must be symmetric".into()));
            }
        }
    }

    let margin = stability_margin(m)?;
    if margin >= 0.0 {
        return Err(Error::Unstable { margin });
    }
    if margin >= -STABILITY_TOL {
        log::warn!(
            "drift is only marginally stable (margin {margin:.3e}); \
             covariance will be ill-conditioned"
        );
    }

    let solver = Factorized::new(m)?;
    let mut v = solver.solve(d)?;
    let bound = RESIDUAL_REL * d_scale;
    let mut residual = lyapunov_residual(m, &v, d);
    // Iterative refinement on the cached factorization: solve for the error
    // term driven by the residual matrix and subtract it.
    for _ in 0..3 {
        if residual <= bound || d_scale == 0.0 {
            break;
        }
        let r = residual_matrix(m, &v, d);
        let correction = solver.solve(&r)?;
        v += correction;
        let refined = lyapunov_residual(m, &v, d);
        if refined >= residual {
            break;
        }
        residual = refined;
    }

    if d_scale > 0.0 && residual > bound {
        // Conditioning scales like 1/|margin|, so only comfortably stable
        // systems are held to the bound; marginal ones were warned above.
        if margin <= -1e-9 {
            return Err(Error::SingularSystem);
        }
        log::warn!(
            "Lyapunov residual {residual:.3e} exceeds {bound:.3e} \
             (margin {margin:.3e}); returning best-effort solution"
        );
    }

    Ok(SteadyCovariance { covariance: v, margin, residual })
}

/// Convenience: validate a config, build its `(M, D)` pair and solve.
pub fn solve_for_config(config: &SystemConfig) -> Result<SteadyCovariance> {
    solve_steady_lyapunov(&DriftDiffusionPair::from_config(config)?)
}

/// Reads per-mode variances, energies and occupancies off the diagonal of a
/// `2N x 2N` covariance.
pub fn mode_report(covariance: &DMatrix<f64>) -> Result<Vec<ModeOccupancy>> {
    let dim = covariance.nrows();
    if dim == 0 || !dim.is_multiple_of(2) || covariance.ncols() != dim {
        return Err(Error::InvalidParameter(
            "covariance must be square with even dimension".into(),
        ));
    }
    Ok((0..dim / 2)
        .map(|i| {
            let var_q = covariance[(2 * i, 2 * i)];
            let var_p = covariance[(2 * i + 1, 2 * i + 1)];
            let energy = 0.5 * (var_q + var_p);
            ModeOccupancy { var_q, var_p, energy, occupancy: energy - 0.5 }
        })
        .collect())
}

/// Second moments in the doubled convention used by the component-wise
/// equations: `momentum[i][j] = <p_i p_j + p_j p_i>` and so on. Relative to a
/// covariance matrix `V`, `momentum = 2 V_pp`, `cross = 2 V_qp`,
/// `position = 2 V_qq`.
#[derive(Debug, Clone)]
pub struct ComponentMoments {
    pub momentum: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub position: DMatrix<f64>,
}

/// Reference solver that assembles the stationary moment equations
/// component by component (no half-vectorization, no elimination) and
/// solves them as one dense system. Exists to cross-check
/// [`solve_steady_lyapunov`]; prefer that function for real work.
pub fn solve_componentwise(config: &SystemConfig) -> Result<ComponentMoments> {
    config.validate()?;
    let n = config.n_modes();
    let omega: Vec<f64> = config.omegas();
    let gamma = crate::model::damping_matrix(config);
    let diffusion = crate::model::diffusion_matrix(config);

    let margin = stability_margin(&crate::model::drift_matrix(config))?;
    if margin >= 0.0 {
        return Err(Error::Unstable { margin });
    }

    // Unknown layout: z_(i<=j) | y_(i,j) | x_(i<=j).
    let t = n * (n + 1) / 2;
    let dim = 2 * t + n * n;
    let sym = |i: usize, j: usize| -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * (2 * n - i + 1) / 2 + (j - i)
    };
    let zcol = sym;
    let ycol = |i: usize, j: usize| t + i * n + j;
    let xcol = |i: usize, j: usize| t + n * n + sym(i, j);

    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let mut row = 0;

    // d<q_i q_j>/dt = 0:  omega_i y_ji + omega_j y_ij = 0.
    for i in 0..n {
        for j in i..n {
            a[(row, ycol(j, i))] += omega[i];
            a[(row, ycol(i, j))] += omega[j];
            row += 1;
        }
    }
    // d<q_i p_j>/dt = 0:  omega_i x_ij - omega_j z_ij - sum_k Gamma_jk y_ik = 0.
    for i in 0..n {
        for j in 0..n {
            a[(row, xcol(i, j))] += omega[i];
            a[(row, zcol(i, j))] -= omega[j];
            for k in 0..n {
                a[(row, ycol(i, k))] -= gamma[(j, k)];
            }
            row += 1;
        }
    }
    // d<p_i p_j>/dt = 0:
    //   omega_i y_ij + omega_j y_ji + sum_k (Gamma_ik x_kj + Gamma_jk x_ik) = D_ij.
    for i in 0..n {
        for j in i..n {
            a[(row, ycol(i, j))] += omega[i];
            a[(row, ycol(j, i))] += omega[j];
            for k in 0..n {
                a[(row, xcol(k, j))] += gamma[(i, k)];
                a[(row, xcol(i, k))] += gamma[(j, k)];
            }
            b[row] = diffusion[(2 * i + 1, 2 * j + 1)];
            row += 1;
        }
    }
    debug_assert_eq!(row, dim);

    let sol = a.lu().solve(&b).ok_or(Error::SingularSystem)?;
    let unpack_sym = |offset: usize| {
        DMatrix::from_fn(n, n, |i, j| 2.0 * sol[offset + sym(i, j)])
    };
    Ok(ComponentMoments {
        position: unpack_sym(0),
        cross: DMatrix::from_fn(n, n, |i, j| 2.0 * sol[ycol(i, j)]),
        momentum: unpack_sym(t + n * n),
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn residual_matrix(m: &DMatrix<f64>, v: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    m * v + v * m.transpose() + d
}

fn lyapunov_residual(m: &DMatrix<f64>, v: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    max_abs(&residual_matrix(m, v, d))
}

/// A factorized vectorized Lyapunov operator: `solve(C)` returns the `V`
/// with `M V + V M^T = -C` for any symmetric `C`, reusing one LU.
enum Factorized {
    Structured(StructuredSolver),
    Generic(GenericSolver),
}

impl Factorized {
    fn new(m: &DMatrix<f64>) -> Result<Self> {
        if let Some(s) = StructuredSolver::detect(m) {
            Ok(Factorized::Structured(s?))
        } else {
            Ok(Factorized::Generic(GenericSolver::new(m)?))
        }
    }

    fn solve(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Factorized::Structured(s) => s.solve(c),
            Factorized::Generic(g) => g.solve(c),
        }
    }
}

/// Half-vectorization over the upper triangle: one equation per entry
/// `(i <= j)` of `M V + V M^T = -C`, one unknown per entry of symmetric `V`.
struct GenericSolver {
    n: usize,
    m: DMatrix<f64>,
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl GenericSolver {
    fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        let size = n * (n + 1) / 2;
        let col = |i: usize, j: usize| -> usize {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            i * (2 * n - i + 1) / 2 + (j - i)
        };
        let mut a = DMatrix::<f64>::zeros(size, size);
        let mut row = 0;
        for i in 0..n {
            for j in i..n {
                for k in 0..n {
                    a[(row, col(k, j))] += m[(i, k)];
                    a[(row, col(i, k))] += m[(j, k)];
                }
                row += 1;
            }
        }
        Ok(GenericSolver { n, m: m.clone(), lu: a.lu() })
    }

    fn solve(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n;
        let _ = &self.m;
        let mut b = DVector::<f64>::zeros(n * (n + 1) / 2);
        let mut row = 0;
        for i in 0..n {
            for j in i..n {
                b[row] = -0.5 * (c[(i, j)] + c[(j, i)]);
                row += 1;
            }
        }
        let sol = self.lu.solve(&b).ok_or(Error::SingularSystem)?;
        let col = |i: usize, j: usize| -> usize {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            i * (2 * n - i + 1) / 2 + (j - i)
        };
        Ok(DMatrix::from_fn(n, n, |i, j| sol[col(i, j)]))
    }
}

/// Fast path for drifts in the canonical mechanical layout. Using the
/// position-sector equations, the cross moments `V(q_j, q_i)` and the
/// lower-triangle `V(q, p)` entries are eliminated exactly, leaving unknowns
/// `x_ij = V(p_i, p_j) (i <= j)` and `y_ij = V(q_i, p_j) (i < j)` only.
struct StructuredSolver {
    n: usize,
    omega: Vec<f64>,
    gamma: DMatrix<f64>,
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl StructuredSolver {
    /// Returns `None` when the drift does not have the exact layout
    /// (callers then fall back to the generic assembly).
    fn detect(m: &DMatrix<f64>) -> Option<Result<Self>> {
        let dim = m.nrows();
        if dim < 2 || !dim.is_multiple_of(2) {
            return None;
        }
        let n = dim / 2;
        let mut omega = Vec::with_capacity(n);
        for i in 0..n {
            let w = m[(2 * i, 2 * i + 1)];
            // Rejects NaN and non-positive entries (and infinities, which the
            // structured factorization cannot use either).
            if !w.is_finite() || w <= 0.0 {
                return None;
            }
            omega.push(w);
        }
        for i in 0..n {
            for j in 0..dim {
                let expect = if j == 2 * i + 1 { omega[i] } else { 0.0 };
                if m[(2 * i, j)] != expect {
                    return None;
                }
            }
            for j in 0..n {
                let expect = if j == i { -omega[i] } else { 0.0 };
                if m[(2 * i + 1, 2 * j)] != expect {
                    return None;
                }
            }
        }
        let gamma = DMatrix::from_fn(n, n, |i, j| -m[(2 * i + 1, 2 * j + 1)]);
        Some(Self::build(n, omega, gamma))
    }

    fn build(n: usize, omega: Vec<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        // Unknowns: x_(i<=j) then y_(i<j).
        let xcount = n * (n + 1) / 2;
        let size = n * n;
        let xcol = |i: usize, j: usize| -> usize {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            i * (2 * n - i + 1) / 2 + (j - i)
        };
        let ycol = |i: usize, j: usize| -> usize {
            debug_assert!(i < j);
            xcount + i * (2 * n - i - 1) / 2 + (j - i - 1)
        };
        // References to y_ab with a > b are rewritten through the position
        // equation omega_b y_ab + omega_a y_ba = -C_qq_ab; the C-dependent
        // part is handled in `solve`.
        let mut a = DMatrix::<f64>::zeros(size, size);
        let mut row = 0;
        {
            let add_y = |r: usize, i: usize, j: usize, coef: f64, a: &mut DMatrix<f64>| {
                use std::cmp::Ordering;
                match i.cmp(&j) {
                    Ordering::Equal => {} // constant, handled in solve()
                    Ordering::Less => a[(r, ycol(i, j))] += coef,
                    Ordering::Greater => a[(r, ycol(j, i))] += -coef * omega[i] / omega[j],
                }
            };
            // Momentum equations (i <= j):
            //   -omega_i y_ij - omega_j y_ji - sum_k (G_ik x_kj + G_jk x_ik) = -C_pp_ij.
            for i in 0..n {
                for j in i..n {
                    add_y(row, i, j, -omega[i], &mut a);
                    add_y(row, j, i, -omega[j], &mut a);
                    for k in 0..n {
                        a[(row, xcol(k, j))] += -gamma[(i, k)];
                        a[(row, xcol(i, k))] += -gamma[(j, k)];
                    }
                    row += 1;
                }
            }
            // Symmetry of V(q_i, q_j)-reconstruction (i < j):
            //   (omega_i^2 - omega_j^2) x_ij - omega_i sum_k G_jk y_ik
            //     + omega_j sum_k G_ik y_jk = omega_j C_qp_ji - omega_i C_qp_ij.
            for i in 0..n {
                for j in (i + 1)..n {
                    a[(row, xcol(i, j))] += omega[i] * omega[i] - omega[j] * omega[j];
                    for k in 0..n {
                        add_y(row, i, k, -omega[i] * gamma[(j, k)], &mut a);
                        add_y(row, j, k, omega[j] * gamma[(i, k)], &mut a);
                    }
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, size);
        Ok(StructuredSolver { n, omega, gamma, lu: a.lu() })
    }

    fn solve(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n;
        let omega = &self.omega;
        let gamma = &self.gamma;
        let xcount = n * (n + 1) / 2;
        let xcol = |i: usize, j: usize| -> usize {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            i * (2 * n - i + 1) / 2 + (j - i)
        };
        let ycol = |i: usize, j: usize| -> usize { xcount + i * (2 * n - i - 1) / 2 + (j - i - 1) };
        // Symmetrized sector accessors of C.
        let cqq = |i: usize, j: usize| 0.5 * (c[(2 * i, 2 * j)] + c[(2 * j, 2 * i)]);
        let cqp = |i: usize, j: usize| 0.5 * (c[(2 * i, 2 * j + 1)] + c[(2 * j + 1, 2 * i)]);
        let cpp = |i: usize, j: usize| 0.5 * (c[(2 * i + 1, 2 * j + 1)] + c[(2 * j + 1, 2 * i + 1)]);
        // Constant part of an eliminated y_ab reference:
        //   y_aa = -C_qq_aa / (2 omega_a),
        //   y_ab (a > b) = -C_qq_ab/omega_b - (omega_a/omega_b) y_ba.
        let yconst = |i: usize, j: usize| -> f64 {
            use std::cmp::Ordering;
            match i.cmp(&j) {
                Ordering::Equal => -cqq(i, i) / (2.0 * omega[i]),
                Ordering::Greater => -cqq(i, j) / omega[j],
                Ordering::Less => 0.0,
            }
        };

        let mut b = DVector::<f64>::zeros(n * n);
        let mut row = 0;
        for i in 0..n {
            for j in i..n {
                let mut rhs = -cpp(i, j);
                rhs -= -omega[i] * yconst(i, j);
                rhs -= -omega[j] * yconst(j, i);
                b[row] = rhs;
                row += 1;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let mut rhs = omega[j] * cqp(j, i) - omega[i] * cqp(i, j);
                for k in 0..n {
                    rhs -= -omega[i] * gamma[(j, k)] * yconst(i, k);
                    rhs -= omega[j] * gamma[(i, k)] * yconst(j, k);
                }
                b[row] = rhs;
                row += 1;
            }
        }

        let sol = self.lu.solve(&b).ok_or(Error::SingularSystem)?;

        // Reassemble the full y matrix, then positions from the qp equations.
        let x = |i: usize, j: usize| sol[xcol(i, j)];
        let mut y = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                use std::cmp::Ordering;
                y[(i, j)] = match i.cmp(&j) {
                    Ordering::Equal => yconst(i, i),
                    Ordering::Less => sol[ycol(i, j)],
                    Ordering::Greater => yconst(i, j) - omega[i] / omega[j] * sol[ycol(j, i)],
                };
            }
        }
        // z_ij from omega_i x_ij - omega_j z_ij - sum_k G_jk y_ik = -C_qp_ij.
        let mut v = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                let mut z = omega[i] * x(i, j) + cqp(i, j);
                for k in 0..n {
                    z -= gamma[(j, k)] * y[(i, k)];
                }
                z /= omega[j];
                v[(2 * i, 2 * j)] = z;
                v[(2 * i, 2 * j + 1)] = y[(i, j)];
                v[(2 * i + 1, 2 * j)] = y[(j, i)];
                v[(2 * i + 1, 2 * j + 1)] = x(i, j);
            }
        }
        // The two z reconstructions agree by the consistency equations; use
        // their mean so the output is exactly symmetric.
        for i in 0..2 * n {
            for j in (i + 1)..2 * n {
                let s = 0.5 * (v[(i, j)] + v[(j, i)]);
                v[(i, j)] = s;
                v[(j, i)] = s;
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        damping_matrix, diffusion_matrix, drift_matrix, CavitySpec, MechanicalMode, SystemConfig,
    };
    use crate::testutil::{random_config, two_mode_reference};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn margin_of_single_damped_oscillator() {
        // Eigenvalues of [[0, w], [-w, -G]] are -G/2 +- i sqrt(w^2 - G^2/4).
        let cfg = SystemConfig {
            modes: vec![MechanicalMode {
                omega: 1.0,
                gamma: 0.04,
                nbar: 0.0,
                coupling_g: 0.0,
                gain_cd: 0.0,
            }],
            cavity: CavitySpec { kappa: 5.0, omega_fb: 5.0, eta: 1.0, detuning: 0.0 },
        };
        let margin = stability_margin(&drift_matrix(&cfg)).unwrap();
        assert_relative_eq!(margin, -0.02, max_relative = 1e-12);
    }

    #[test]
    fn unstable_drift_is_rejected() {
        // Flip the damping sign by hand: anti-damped oscillator.
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        m[(1, 0)] = -1.0;
        m[(1, 1)] = 0.03;
        let d = DMatrix::from_diagonal(&nalgebra::dvector![0.0, 1e-3]);
        let pair = DriftDiffusionPair { drift: m, diffusion: d };
        match solve_steady_lyapunov(&pair) {
            Err(Error::Unstable { margin }) => assert!(margin > 0.0),
            other => panic!("expected Unstable, got {other:?}"),
        }
    }

    #[test]
    fn marginally_stable_drift_still_solves() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        m[(1, 0)] = -1.0;
        m[(1, 1)] = -1.0e-13;
        let pair = DriftDiffusionPair { drift: m, diffusion: DMatrix::zeros(2, 2) };
        let sol = solve_steady_lyapunov(&pair).unwrap();
        assert!(sol.margin < 0.0 && sol.margin > -1e-12);
        assert_eq!(max_abs(&sol.covariance), 0.0);
    }

    #[test]
    fn single_mode_closed_form_covariance() {
        // Hand solve of M V + V M^T = -D for one mode:
        // V = diag(d/(2 Gamma), d/(2 Gamma)) with d the momentum diffusion.
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
        let d = (2.0 * 100.0 + 1.0) * 4.0e-5 + 0.16 * 0.16 / 3.0;
        let gamma = 4.0e-5 + 0.8 * 0.16 * 1.0 / 3.0;
        let sol = solve_for_config(&cfg).unwrap();
        let expect = d / (2.0 * gamma);
        assert_relative_eq!(sol.covariance[(0, 0)], expect, max_relative = 1e-12);
        assert_relative_eq!(sol.covariance[(1, 1)], expect, max_relative = 1e-12);
        assert!(sol.covariance[(0, 1)].abs() < 1e-14 * expect);

        let report = mode_report(&sol.covariance).unwrap();
        assert_relative_eq!(report[0].energy, expect, max_relative = 1e-12);
        assert_relative_eq!(report[0].occupancy, expect - 0.5, max_relative = 1e-12);
    }

    #[test]
    fn residual_meets_bound_on_reference_config() {
        let cfg = two_mode_reference();
        let pair = DriftDiffusionPair::from_config(&cfg).unwrap();
        let sol = solve_steady_lyapunov(&pair).unwrap();
        assert!(sol.residual <= RESIDUAL_REL * max_abs(&pair.diffusion));
        // A stationary covariance of a stable linear system driven by
        // positive-semidefinite noise must itself be positive semidefinite.
        let eigs = sol.covariance.clone().symmetric_eigenvalues();
        let scale = max_abs(&sol.covariance);
        for ev in eigs.iter() {
            assert!(*ev >= -1e-12 * scale, "negative eigenvalue {ev:.3e}");
        }
        for i in 0..4 {
            assert!(sol.covariance[(i, i)] > 0.0);
        }
    }

    #[test]
    fn structured_and_generic_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=5 {
            for _ in 0..8 {
                let cfg = random_config(&mut rng, n);
                let pair = DriftDiffusionPair::from_config(&cfg).unwrap();
                if stability_margin(&pair.drift).unwrap() >= -1e-9 {
                    continue;
                }
                let fast = StructuredSolver::detect(&pair.drift)
                    .expect("config drift must match the structured layout")
                    .unwrap()
                    .solve(&pair.diffusion)
                    .unwrap();
                let slow = GenericSolver::new(&pair.drift)
                    .unwrap()
                    .solve(&pair.diffusion)
                    .unwrap();
                let scale = max_abs(&slow);
                assert!(
                    max_abs(&(&fast - &slow)) <= 1e-9 * scale,
                    "paths disagree for n={n}: {:.3e} vs scale {scale:.3e}",
                    max_abs(&(&fast - &slow)),
                );
            }
        }
    }

    #[test]
    fn detection_rejects_non_canonical_drift() {
        // A generic stable matrix must take the generic path and still solve.
        let m = nalgebra::dmatrix![
            -0.5, 0.3, 0.0;
            -0.2, -0.4, 0.1;
            0.0, -0.3, -0.6
        ];
        assert!(StructuredSolver::detect(&m).is_none());
        let d = DMatrix::from_diagonal(&nalgebra::dvector![0.2, 0.1, 0.3]);
        let pair = DriftDiffusionPair { drift: m.clone(), diffusion: d.clone() };
        let sol = solve_steady_lyapunov(&pair).unwrap();
        assert!(lyapunov_residual(&m, &sol.covariance, &d) <= RESIDUAL_REL * 0.3);
    }

    #[test]
    fn agrees_with_time_integration_oracle() {
        // Independent oracle: integrate dV/dt = M V + V M^T + D with RK4
        // from V(0) = 0 until stationary; compare entrywise.
        let cfg = two_mode_reference();
        let pair = DriftDiffusionPair::from_config(&cfg).unwrap();
        let m = &pair.drift;
        let d = &pair.diffusion;
        let deriv = |v: &DMatrix<f64>| m * v + v * m.transpose() + d;
        let mut v = DMatrix::<f64>::zeros(4, 4);
        let dt = 0.02;
        let steps = (4000.0 / dt) as usize; // ~80 damping times at Gamma ~ 0.02
        for _ in 0..steps {
            let k1 = deriv(&v);
            let k2 = deriv(&(&v + 0.5 * dt * &k1));
            let k3 = deriv(&(&v + 0.5 * dt * &k2));
            let k4 = deriv(&(&v + dt * &k3));
            v += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let sol = solve_for_config(&cfg).unwrap();
        let scale = max_abs(&sol.covariance);
        assert!(
            max_abs(&(&v - &sol.covariance)) <= 1e-6 * scale,
            "time integration deviates by {:.3e} (scale {scale:.3e})",
            max_abs(&(&v - &sol.covariance))
        );
    }

    #[test]
    fn componentwise_matches_lyapunov() {
        for cfg in [two_mode_reference(), {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            random_config(&mut rng, 3)
        }] {
            let moments = solve_componentwise(&cfg).unwrap();
            let sol = solve_for_config(&cfg).unwrap();
            let n = cfg.n_modes();
            let scale = max_abs(&sol.covariance);
            for i in 0..n {
                for j in 0..n {
                    let v = &sol.covariance;
                    assert_relative_eq!(
                        moments.momentum[(i, j)],
                        2.0 * v[(2 * i + 1, 2 * j + 1)],
                        epsilon = 1e-8 * scale
                    );
                    assert_relative_eq!(
                        moments.cross[(i, j)],
                        2.0 * v[(2 * i, 2 * j + 1)],
                        epsilon = 1e-8 * scale
                    );
                    assert_relative_eq!(
                        moments.position[(i, j)],
                        2.0 * v[(2 * i, 2 * j)],
                        epsilon = 1e-8 * scale
                    );
                }
            }
        }
    }

    #[test]
    fn componentwise_structural_identities() {
        let cfg = two_mode_reference();
        let m = solve_componentwise(&cfg).unwrap();
        let omega = cfg.omegas();
        let scale = max_abs(&m.momentum);
        let n = cfg.n_modes();
        for i in 0..n {
            assert!(m.cross[(i, i)].abs() <= 1e-12 * scale);
            for j in 0..n {
                // Momentum/position symmetry and the cross-moment pairing.
                assert_relative_eq!(m.momentum[(i, j)], m.momentum[(j, i)]);
                assert_relative_eq!(m.position[(i, j)], m.position[(j, i)]);
                let pair = omega[j] * m.cross[(i, j)] + omega[i] * m.cross[(j, i)];
                assert!(pair.abs() <= 1e-12 * scale);
            }
        }
        // Single mode: momentum moment equals the diffusion over the total rate.
        let single = SystemConfig { modes: vec![cfg.modes[0].clone()], cavity: cfg.cavity };
        let m1 = solve_componentwise(&single).unwrap();
        let d = (2.0 * 100.0 + 1.0) * 4.0e-5 + 0.16 * 0.16 / 3.0;
        let gamma = 4.0e-5 + 0.8 * 0.16 / 3.0;
        assert_relative_eq!(m1.momentum[(0, 0)], d / gamma, max_relative = 1e-10);
    }

    #[test]
    fn independent_modes_reach_their_own_balance() {
        // Zeroing the off-diagonal damping by hand must reproduce the
        // independent-mode energy d_ii / (2 Gamma_ii) even though the
        // diffusion keeps its cross-correlations.
        let cfg = two_mode_reference();
        let n = cfg.n_modes();
        let gamma = damping_matrix(&cfg);
        let mut drift = drift_matrix(&cfg);
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    drift[(2 * i + 1, 2 * k + 1)] = 0.0;
                }
            }
        }
        let pair = DriftDiffusionPair { drift, diffusion: diffusion_matrix(&cfg) };
        let sol = solve_steady_lyapunov(&pair).unwrap();
        let report = mode_report(&sol.covariance).unwrap();
        for i in 0..n {
            let mode = &cfg.modes[i];
            let expect = (mode.nbar + 0.5) * mode.gamma / gamma[(i, i)]
                + mode.coupling_g * mode.coupling_g / (2.0 * gamma[(i, i)] * cfg.cavity.kappa);
            assert_relative_eq!(report[i].energy, expect, max_relative = 1e-10);
        }
    }
}
