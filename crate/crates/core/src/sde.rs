//! Stochastic trajectory simulation.
//!
//! Two integrators are provided. The *full* scheme evolves the mechanical
//! quadratures together with both cavity quadratures and the feedback
//! low-pass filter state, reproducing the complete measurement chain:
//! intracavity phase readout, detection inefficiency, and the derivative
//! feedback kernel realized exactly by one auxiliary filter state. The
//! *Markovian* scheme evolves only the mechanical quadratures under the
//! reduced damping matrix and its white-noise model — the same drift and
//! diffusion pair the exact covariance solver uses, so ensembles of it must
//! converge to [`crate::lyapunov::solve_steady_lyapunov`].
//!
//! Both schemes take a fourth-order Runge-Kutta step on the deterministic
//! drift and then add the Gaussian noise increments for the elapsed step;
//! for additive noise this is weakly convergent and its step-size bias is
//! O(dt^2) in second moments (checked by the dt-halving test).
//!
//! # Noise normalization
//!
//! Optical vacuum inputs carry symmetrized correlators
//! `<u(t) u(t')> = (1/2) d(t-t')`, so a term `sqrt(2 kappa) u` in a drift
//! equation becomes the per-step increment `sqrt(kappa dt) xi` with `xi` a
//! standard normal. Thermal noise on momentum has correlator
//! `(2 nbar + 1) gamma d(t-t')`, giving `sqrt((2 nbar + 1) gamma dt) xi`.
//! The measured phase quadrature is `y_est = y - (y_in + sqrt(1/eta - 1)
//! y_v)/sqrt(2 kappa)`; the same `y_in` draw must enter the cavity update
//! and the estimator within a step, which is how the feedback loop partially
//! cancels its own fed-back shot noise at low frequency.

use crate::error::{Error, Result};
use crate::lyapunov::{mode_report, solve_steady_lyapunov, ModeOccupancy};
use crate::model::{damping_matrix, DriftDiffusionPair, SystemConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Mechanics + cavity quadratures + feedback filter state.
    Full,
    /// Mechanics only, under the reduced damping matrix.
    Markovian,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Full => write!(f, "full"),
            Scheme::Markovian => write!(f, "markovian"),
        }
    }
}

/// Simulation plan: step size, duration, scheme, ensemble size, seeding,
/// and how often to record samples.
#[derive(Debug, Clone)]
pub struct SimPlan {
    pub dt: f64,
    pub t_final: f64,
    pub scheme: Scheme,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Steps between recorded samples (1 = record every step).
    pub record_stride: usize,
}

/// Largest rate in the problem; the full scheme must resolve it.
pub fn max_rate(config: &SystemConfig) -> f64 {
    let max_omega = config.omegas().iter().copied().fold(0.0_f64, f64::max);
    max_omega.max(config.cavity.kappa).max(config.cavity.omega_fb)
}

/// Step-size ceiling for the full scheme: a tenth of the shortest timescale.
pub fn full_scheme_dt_bound(config: &SystemConfig) -> f64 {
    0.1 / max_rate(config)
}

impl SimPlan {
    /// Check the plan against a configuration.
    ///
    /// The full scheme integrates the cavity decay `kappa` and the filter
    /// bandwidth `omega_fb` explicitly, so its `dt` must satisfy
    /// `dt <= 0.1 / max(omega_j, kappa, omega_fb)`. The Markovian scheme has
    /// no such stiff rates; its accuracy is governed by `dt * omega` alone.
    pub fn validate(&self, config: &SystemConfig) -> Result<()> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.t_final.is_finite() || self.t_final < self.dt {
            return Err(Error::InvalidParameter(format!(
                "t_final must be at least one step, got {} with dt {}",
                self.t_final, self.dt
            )));
        }
        if self.n_trajectories == 0 {
            return Err(Error::InvalidParameter("need at least one trajectory".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidParameter("record_stride must be at least 1".into()));
        }
        if self.scheme == Scheme::Full {
            let bound = full_scheme_dt_bound(config);
            if self.dt > bound {
                return Err(Error::InvalidParameter(format!(
                    "full-scheme dt {} exceeds 0.1/max(omega, kappa, omega_fb) = {:.6}",
                    self.dt, bound
                )));
            }
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        ((self.t_final / self.dt).round() as usize).max(1)
    }
}

/// Mechanical phase-space point.
#[derive(Debug, Clone)]
pub struct MarkovState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

/// Mechanics plus cavity amplitude/phase quadratures and the feedback
/// filter state `z(t) = omega_fb Int e^(-omega_fb (t-s)) y_est(s) ds`.
#[derive(Debug, Clone)]
pub struct FullState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Draw a thermal mechanical state: every quadrature is an independent
/// Gaussian with mean zero and variance `nbar_i + 1/2`.
pub fn sample_thermal_initial(nbar: &[f64], rng: &mut impl Rng) -> MarkovState {
    let mut draw = |n: f64| -> f64 {
        let xi: f64 = rng.sample(StandardNormal);
        (n + 0.5).sqrt() * xi
    };
    let q: Vec<f64> = nbar.iter().map(|&n| draw(n)).collect();
    let p: Vec<f64> = nbar.iter().map(|&n| draw(n)).collect();
    MarkovState { q, p }
}

impl FullState {
    /// Thermal mechanics; cavity and filter start at their zero mean.
    pub fn thermal(nbar: &[f64], rng: &mut impl Rng) -> Self {
        let mech = sample_thermal_initial(nbar, rng);
        FullState { q: mech.q, p: mech.p, x: 0.0, y: 0.0, z: 0.0 }
    }
}

/// Reusable Markovian integrator with preallocated scratch space.
pub struct MarkovStepper {
    n: usize,
    dt: f64,
    omega: Vec<f64>,
    /// Row-major damping matrix.
    gamma: Vec<f64>,
    thermal_scale: Vec<f64>,
    backaction_scale: Vec<f64>,
    // RK4 scratch: four slope pairs plus the staging point.
    kq: [Vec<f64>; 4],
    kp: [Vec<f64>; 4],
    sq: Vec<f64>,
    sp: Vec<f64>,
}

impl MarkovStepper {
    pub fn new(config: &SystemConfig, dt: f64) -> Result<Self> {
        config.validate()?;
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let n = config.n_modes();
        let g = damping_matrix(config);
        let gamma = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect();
        let kappa = config.cavity.kappa;
        Ok(MarkovStepper {
            n,
            dt,
            omega: config.omegas(),
            gamma,
            thermal_scale: config
                .modes
                .iter()
                .map(|m| ((2.0 * m.nbar + 1.0) * m.gamma * dt).sqrt())
                .collect(),
            backaction_scale: config
                .modes
                .iter()
                .map(|m| m.coupling_g * (dt / kappa).sqrt())
                .collect(),
            kq: std::array::from_fn(|_| vec![0.0; n]),
            kp: std::array::from_fn(|_| vec![0.0; n]),
            sq: vec![0.0; n],
            sp: vec![0.0; n],
        })
    }

    /// One RK4 drift step plus additive noise increments. The back-action
    /// noise is rank one: a single shared standard normal scaled by
    /// `G_j sqrt(dt / kappa)` hits every momentum, reproducing the
    /// `G_i G_j / kappa` diffusion block.
    pub fn step(&mut self, state: &mut MarkovState, rng: &mut impl Rng) {
        let n = self.n;
        let dt = self.dt;
        markov_drift(&self.omega, &self.gamma, &state.q, &state.p, &mut self.kq[0], &mut self.kp[0]);
        for stage in 1..4 {
            let h = if stage == 3 { dt } else { 0.5 * dt };
            for j in 0..n {
                self.sq[j] = state.q[j] + h * self.kq[stage - 1][j];
                self.sp[j] = state.p[j] + h * self.kp[stage - 1][j];
            }
            markov_drift(
                &self.omega,
                &self.gamma,
                &self.sq,
                &self.sp,
                &mut self.kq[stage],
                &mut self.kp[stage],
            );
        }
        for j in 0..n {
            state.q[j] +=
                dt / 6.0 * (self.kq[0][j] + 2.0 * self.kq[1][j] + 2.0 * self.kq[2][j] + self.kq[3][j]);
            state.p[j] +=
                dt / 6.0 * (self.kp[0][j] + 2.0 * self.kp[1][j] + 2.0 * self.kp[2][j] + self.kp[3][j]);
        }
        let shared: f64 = rng.sample(StandardNormal);
        for j in 0..n {
            let xi: f64 = rng.sample(StandardNormal);
            state.p[j] += self.thermal_scale[j] * xi + self.backaction_scale[j] * shared;
        }
    }
}

/// `dq = omega p`, `dp = -omega q - Gamma p` with `Gamma` row-major.
fn markov_drift(omega: &[f64], gamma: &[f64], q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
    let n = omega.len();
    for j in 0..n {
        dq[j] = omega[j] * p[j];
        let mut damp = 0.0;
        for k in 0..n {
            damp += gamma[j * n + k] * p[k];
        }
        dp[j] = -omega[j] * q[j] - damp;
    }
}

/// Reusable full-model integrator with preallocated scratch space.
pub struct FullStepper {
    n: usize,
    dt: f64,
    omega: Vec<f64>,
    gamma_bare: Vec<f64>,
    coupling: Vec<f64>,
    gain_wfb: Vec<f64>,
    kappa: f64,
    omega_fb: f64,
    thermal_scale: Vec<f64>,
    /// `g_j omega_fb sqrt(dt / (4 kappa))` on each momentum.
    feedthrough_scale: Vec<f64>,
    /// `sqrt(kappa dt)` on each cavity quadrature.
    cavity_scale: f64,
    /// `-omega_fb sqrt(dt / (4 kappa))` on the filter state.
    filter_scale: f64,
    /// `sqrt(1/eta - 1)` weight of the detection vacuum port.
    vacuum_weight: f64,
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
    packed: Vec<f64>,
}

impl FullStepper {
    pub fn new(config: &SystemConfig, dt: f64) -> Result<Self> {
        config.validate()?;
        let bound = full_scheme_dt_bound(config);
        if !dt.is_finite() || dt <= 0.0 || dt > bound {
            return Err(Error::InvalidParameter(format!(
                "full-scheme dt must lie in (0, {bound:.6}], got {dt}"
            )));
        }
        let n = config.n_modes();
        let kappa = config.cavity.kappa;
        let omega_fb = config.cavity.omega_fb;
        let eta = config.cavity.eta;
        let dim = 2 * n + 3;
        Ok(FullStepper {
            n,
            dt,
            omega: config.omegas(),
            gamma_bare: config.modes.iter().map(|m| m.gamma).collect(),
            coupling: config.modes.iter().map(|m| m.coupling_g).collect(),
            gain_wfb: config.modes.iter().map(|m| m.gain_cd * omega_fb).collect(),
            kappa,
            omega_fb,
            thermal_scale: config
                .modes
                .iter()
                .map(|m| ((2.0 * m.nbar + 1.0) * m.gamma * dt).sqrt())
                .collect(),
            feedthrough_scale: config
                .modes
                .iter()
                .map(|m| m.gain_cd * omega_fb * (dt / (4.0 * kappa)).sqrt())
                .collect(),
            cavity_scale: (kappa * dt).sqrt(),
            filter_scale: -omega_fb * (dt / (4.0 * kappa)).sqrt(),
            vacuum_weight: (1.0 / eta - 1.0).max(0.0).sqrt(),
            k: std::array::from_fn(|_| vec![0.0; dim]),
            stage: vec![0.0; dim],
            packed: vec![0.0; dim],
        })
    }

    /// One RK4 drift step plus noise. The same phase-noise draw `xi_y`
    /// enters the cavity update and (with the vacuum-port draw) the
    /// feedthrough on the momenta and the filter state.
    pub fn step(&mut self, state: &mut FullState, rng: &mut impl Rng) {
        let n = self.n;
        let dt = self.dt;
        let dim = 2 * n + 3;
        for j in 0..n {
            self.packed[2 * j] = state.q[j];
            self.packed[2 * j + 1] = state.p[j];
        }
        self.packed[2 * n] = state.x;
        self.packed[2 * n + 1] = state.y;
        self.packed[2 * n + 2] = state.z;
        full_drift(
            &self.omega,
            &self.gamma_bare,
            &self.coupling,
            &self.gain_wfb,
            self.kappa,
            self.omega_fb,
            &self.packed,
            &mut self.k[0],
        );
        for stage_i in 1..4 {
            let h = if stage_i == 3 { dt } else { 0.5 * dt };
            for d in 0..dim {
                self.stage[d] = self.packed[d] + h * self.k[stage_i - 1][d];
            }
            full_drift(
                &self.omega,
                &self.gamma_bare,
                &self.coupling,
                &self.gain_wfb,
                self.kappa,
                self.omega_fb,
                &self.stage,
                &mut self.k[stage_i],
            );
        }
        let xi_y: f64 = rng.sample(StandardNormal);
        let xi_x: f64 = rng.sample(StandardNormal);
        let xi_v: f64 = if self.vacuum_weight > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        let meas = xi_y + self.vacuum_weight * xi_v;
        let rk = |k: &[Vec<f64>; 4], d: usize| {
            dt / 6.0 * (k[0][d] + 2.0 * k[1][d] + 2.0 * k[2][d] + k[3][d])
        };
        for j in 0..n {
            state.q[j] += rk(&self.k, 2 * j);
            let xi: f64 = rng.sample(StandardNormal);
            state.p[j] += rk(&self.k, 2 * j + 1)
                + self.thermal_scale[j] * xi
                + self.feedthrough_scale[j] * meas;
        }
        state.x += rk(&self.k, 2 * n) + self.cavity_scale * xi_x;
        state.y += rk(&self.k, 2 * n + 1) + self.cavity_scale * xi_y;
        state.z += rk(&self.k, 2 * n + 2) + self.filter_scale * meas;
    }
}

/// Deterministic drift of the packed state `(q, p, ..., x, y, z)`:
/// `dq = omega p`, `dp = -omega q - gamma p + G x - g omega_fb (y - z)`,
/// `dx = -kappa x`, `dy = -kappa y + sum G q`, `dz = omega_fb (y - z)`.
#[allow(clippy::too_many_arguments)]
fn full_drift(
    omega: &[f64],
    gamma_bare: &[f64],
    coupling: &[f64],
    gain_wfb: &[f64],
    kappa: f64,
    omega_fb: f64,
    u: &[f64],
    du: &mut [f64],
) {
    let n = omega.len();
    let (x, y, z) = (u[2 * n], u[2 * n + 1], u[2 * n + 2]);
    let mut readout = 0.0;
    for j in 0..n {
        let (q, p) = (u[2 * j], u[2 * j + 1]);
        du[2 * j] = omega[j] * p;
        du[2 * j + 1] = -omega[j] * q - gamma_bare[j] * p + coupling[j] * x - gain_wfb[j] * (y - z);
        readout += coupling[j] * q;
    }
    du[2 * n] = -kappa * x;
    du[2 * n + 1] = -kappa * y + readout;
    du[2 * n + 2] = omega_fb * (y - z);
}

/// Exact linear theory of the full scheme: drift and diffusion of the
/// extended state `(q_1, p_1, ..., q_N, p_N, x, y, z)`.
///
/// The stationary covariance of this pair (via
/// [`crate::lyapunov::solve_steady_lyapunov`]) is what full-scheme
/// ensembles converge to; it differs from the reduced-model covariance by
/// the finite cavity/feedback bandwidth and by the fed-back measurement
/// noise, whose white component `g_i g_j omega_fb^2 / (4 kappa eta)` the
/// reduced model drops.
pub fn full_drift_diffusion(config: &SystemConfig) -> Result<DriftDiffusionPair> {
    config.validate()?;
    let n = config.n_modes();
    let dim = 2 * n + 3;
    let kappa = config.cavity.kappa;
    let wfb = config.cavity.omega_fb;
    let eta = config.cavity.eta;
    let (ix, iy, iz) = (2 * n, 2 * n + 1, 2 * n + 2);
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    let mut d = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..n {
        let mode = &config.modes[j];
        m[(2 * j, 2 * j + 1)] = mode.omega;
        m[(2 * j + 1, 2 * j)] = -mode.omega;
        m[(2 * j + 1, 2 * j + 1)] = -mode.gamma;
        m[(2 * j + 1, ix)] = mode.coupling_g;
        m[(2 * j + 1, iy)] = -mode.gain_cd * wfb;
        m[(2 * j + 1, iz)] = mode.gain_cd * wfb;
        m[(iy, 2 * j)] = mode.coupling_g;
    }
    m[(ix, ix)] = -kappa;
    m[(iy, iy)] = -kappa;
    m[(iz, iy)] = wfb;
    m[(iz, iz)] = -wfb;
    for i in 0..n {
        let gi = config.modes[i].gain_cd;
        d[(2 * i + 1, 2 * i + 1)] += (2.0 * config.modes[i].nbar + 1.0) * config.modes[i].gamma;
        for j in 0..n {
            let gj = config.modes[j].gain_cd;
            d[(2 * i + 1, 2 * j + 1)] += gi * gj * wfb * wfb / (4.0 * kappa * eta);
        }
        d[(2 * i + 1, iy)] = gi * wfb / 2.0;
        d[(iy, 2 * i + 1)] = gi * wfb / 2.0;
        d[(2 * i + 1, iz)] = -gi * wfb * wfb / (4.0 * kappa * eta);
        d[(iz, 2 * i + 1)] = d[(2 * i + 1, iz)];
    }
    d[(ix, ix)] = kappa;
    d[(iy, iy)] = kappa;
    d[(iy, iz)] = -wfb / 2.0;
    d[(iz, iy)] = -wfb / 2.0;
    d[(iz, iz)] = wfb * wfb / (4.0 * kappa * eta);
    Ok(DriftDiffusionPair { drift: m, diffusion: d })
}

/// Stationary per-mode occupancies of the exact full-scheme theory.
pub fn full_scheme_steady_occupancy(config: &SystemConfig) -> Result<Vec<ModeOccupancy>> {
    let pair = full_drift_diffusion(config)?;
    let sol = solve_steady_lyapunov(&pair)?;
    let n = config.n_modes();
    let mech = sol.covariance.view((0, 0), (2 * n, 2 * n)).into_owned();
    mode_report(&mech)
}

/// Ensemble statistics on the recording grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    /// Recorded times, starting at 0.
    pub times: Vec<f64>,
    /// `mean_energy[t][i]`: ensemble mean of `(q_i^2 + p_i^2)/2`.
    pub mean_energy: Vec<Vec<f64>>,
    /// Standard error of each `mean_energy` entry (0 for one trajectory).
    pub stderr: Vec<Vec<f64>>,
    /// Per-mode occupancy estimate: each trajectory's energy averaged over
    /// the last 20% of the run, ensemble-averaged, minus 1/2.
    pub final_occupancy: Vec<f64>,
    /// Standard error of `final_occupancy`.
    pub final_occupancy_stderr: Vec<f64>,
}

/// Deterministic per-trajectory random stream: one base seed, one ChaCha
/// stream per trajectory index.
pub fn make_trajectory_rng(seed: u64, trajectory: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory);
    rng
}

struct TrajectoryRecord {
    /// Flattened `[record][mode]` energies.
    energies: Vec<f64>,
    /// Energy averaged over records with `t >= 0.8 t_final`, per mode.
    tail_mean: Vec<f64>,
}

fn check_finite(sum: f64, trajectory: usize, t: f64) -> Result<()> {
    if sum.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { trajectory, t })
    }
}

fn run_one(
    config: &SystemConfig,
    plan: &SimPlan,
    trajectory: usize,
    record_times: &[f64],
) -> Result<TrajectoryRecord> {
    let n = config.n_modes();
    let nbar: Vec<f64> = config.modes.iter().map(|m| m.nbar).collect();
    let mut rng = make_trajectory_rng(plan.seed, trajectory as u64);
    let n_steps = plan.n_steps();
    let n_records = record_times.len();
    let mut energies = Vec::with_capacity(n_records * n);
    let tail_from = 0.8 * plan.t_final - 1e-9 * plan.t_final;
    let mut tail_count = 0usize;
    let mut tail_sum = vec![0.0; n];

    let record =
        |q: &[f64], p: &[f64], t: f64, energies: &mut Vec<f64>, tail_sum: &mut [f64], tail_count: &mut usize| -> Result<()> {
            let mut total = 0.0;
            for j in 0..n {
                let e = 0.5 * (q[j] * q[j] + p[j] * p[j]);
                energies.push(e);
                total += e;
            }
            check_finite(total, trajectory, t)?;
            if t >= tail_from {
                for j in 0..n {
                    tail_sum[j] += energies[energies.len() - n + j];
                }
                *tail_count += 1;
            }
            Ok(())
        };

    match plan.scheme {
        Scheme::Markovian => {
            let mut stepper = MarkovStepper::new(config, plan.dt)?;
            let mut state = sample_thermal_initial(&nbar, &mut rng);
            record(&state.q, &state.p, 0.0, &mut energies, &mut tail_sum, &mut tail_count)?;
            for step in 1..=n_steps {
                stepper.step(&mut state, &mut rng);
                if step % plan.record_stride == 0 {
                    let t = step as f64 * plan.dt;
                    record(&state.q, &state.p, t, &mut energies, &mut tail_sum, &mut tail_count)?;
                }
            }
        }
        Scheme::Full => {
            let mut stepper = FullStepper::new(config, plan.dt)?;
            let mut state = FullState::thermal(&nbar, &mut rng);
            record(&state.q, &state.p, 0.0, &mut energies, &mut tail_sum, &mut tail_count)?;
            for step in 1..=n_steps {
                stepper.step(&mut state, &mut rng);
                if step % plan.record_stride == 0 {
                    let t = step as f64 * plan.dt;
                    record(&state.q, &state.p, t, &mut energies, &mut tail_sum, &mut tail_count)?;
                }
            }
        }
    }
    debug_assert_eq!(energies.len(), n_records * n);
    let tail_mean = if tail_count > 0 {
        tail_sum.iter().map(|s| s / tail_count as f64).collect()
    } else {
        // Degenerate recording grid: fall back to the last sample.
        energies[energies.len() - n..].to_vec()
    };
    Ok(TrajectoryRecord { energies, tail_mean })
}

/// Run `plan.n_trajectories` independent trajectories and aggregate.
///
/// Trajectories are integrated in parallel but every trajectory owns the
/// random stream derived from `(seed, index)` and the reduction runs in
/// index order, so the result is bitwise identical for any thread count.
pub fn run_ensemble(config: &SystemConfig, plan: &SimPlan) -> Result<EnsembleStats> {
    config.validate()?;
    plan.validate(config)?;
    let n = config.n_modes();
    let n_steps = plan.n_steps();
    let record_times: Vec<f64> = std::iter::once(0.0)
        .chain(
            (1..=n_steps)
                .filter(|s| s % plan.record_stride == 0)
                .map(|s| s as f64 * plan.dt),
        )
        .collect();

    let records: Vec<TrajectoryRecord> = (0..plan.n_trajectories)
        .into_par_iter()
        .map(|idx| run_one(config, plan, idx, &record_times))
        .collect::<Result<Vec<_>>>()?;

    let n_records = record_times.len();
    let n_traj = plan.n_trajectories;
    let mut sum = vec![0.0; n_records * n];
    let mut sum_sq = vec![0.0; n_records * n];
    let mut tail_sum = vec![0.0; n];
    let mut tail_sq = vec![0.0; n];
    for rec in &records {
        for (i, &e) in rec.energies.iter().enumerate() {
            sum[i] += e;
            sum_sq[i] += e * e;
        }
        for j in 0..n {
            tail_sum[j] += rec.tail_mean[j];
            tail_sq[j] += rec.tail_mean[j] * rec.tail_mean[j];
        }
    }
    let stderr_of = |s: f64, sq: f64| -> (f64, f64) {
        let mean = s / n_traj as f64;
        if n_traj < 2 {
            return (mean, 0.0);
        }
        let var = (sq / n_traj as f64 - mean * mean).max(0.0) / (n_traj as f64 - 1.0);
        (mean, var.sqrt())
    };
    let mut mean_energy = Vec::with_capacity(n_records);
    let mut stderr = Vec::with_capacity(n_records);
    for r in 0..n_records {
        let mut row_mean = Vec::with_capacity(n);
        let mut row_err = Vec::with_capacity(n);
        for j in 0..n {
            let (m, e) = stderr_of(sum[r * n + j], sum_sq[r * n + j]);
            row_mean.push(m);
            row_err.push(e);
        }
        mean_energy.push(row_mean);
        stderr.push(row_err);
    }
    let mut final_occupancy = Vec::with_capacity(n);
    let mut final_occupancy_stderr = Vec::with_capacity(n);
    for j in 0..n {
        let (m, e) = stderr_of(tail_sum[j], tail_sq[j]);
        final_occupancy.push(m - 0.5);
        final_occupancy_stderr.push(e);
    }
    Ok(EnsembleStats { times: record_times, mean_energy, stderr, final_occupancy, final_occupancy_stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::solve_for_config;
    use crate::model::{CavitySpec, MechanicalMode, SystemConfig};
    use crate::testutil::two_mode_reference;
    use approx::assert_relative_eq;

    fn feedback_off(n: usize, gamma: f64, nbar: f64) -> SystemConfig {
        let modes = (0..n)
            .map(|j| MechanicalMode {
                omega: 1.0 + 0.3 * j as f64,
                gamma,
                nbar,
                coupling_g: 0.0,
                gain_cd: 0.0,
            })
            .collect();
        SystemConfig {
            modes,
            cavity: CavitySpec { kappa: 3.0, omega_fb: 3.5, eta: 1.0, detuning: 0.0 },
        }
    }

    #[test]
    fn thermal_sampling_moments() {
        let mut rng = make_trajectory_rng(7, 0);
        let n_samples = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_samples {
            let s = sample_thermal_initial(&[100.0], &mut rng);
            sum += s.q[0] + s.p[0];
            sum_sq += s.q[0] * s.q[0] + s.p[0] * s.p[0];
        }
        let var = sum_sq / (2.0 * n_samples as f64);
        let mean = sum / (2.0 * n_samples as f64);
        assert!((var - 100.5).abs() < 0.01 * 100.5, "sample variance {var}");
        assert!(mean.abs() < 3.0 * (100.5 / (2.0 * n_samples as f64)).sqrt());

        // Vacuum: variance one half.
        let mut sum_sq0 = 0.0;
        for _ in 0..n_samples {
            let s = sample_thermal_initial(&[0.0], &mut rng);
            sum_sq0 += s.q[0] * s.q[0] + s.p[0] * s.p[0];
        }
        let var0 = sum_sq0 / (2.0 * n_samples as f64);
        assert!((var0 - 0.5).abs() < 0.01 * 0.5, "vacuum variance {var0}");
    }

    #[test]
    fn rk4_conserves_energy_without_noise_or_damping() {
        // gamma = 0, G = 0, gain = 0: pure harmonic oscillator, every noise
        // amplitude vanishes identically, so only the RK4 drift acts.
        let cfg = feedback_off(1, 0.0, 0.0);
        let mut stepper = MarkovStepper::new(&cfg, 0.05).unwrap();
        let mut state = MarkovState { q: vec![1.0], p: vec![0.0] };
        let mut rng = make_trajectory_rng(1, 0);
        let steps = (20.0 * std::f64::consts::PI / 0.05) as usize; // ten periods
        for _ in 0..steps {
            stepper.step(&mut state, &mut rng);
        }
        let energy = 0.5 * (state.q[0] * state.q[0] + state.p[0] * state.p[0]);
        assert_relative_eq!(energy, 0.5, max_relative = 1e-6);
    }

    #[test]
    fn ou_process_equilibrates_to_thermal_occupancy() {
        // Feedback off: each mode is an independent Ornstein-Uhlenbeck
        // process with stationary energy nbar + 1/2.
        let cfg = feedback_off(2, 0.05, 20.0);
        let plan = SimPlan {
            dt: 0.05,
            t_final: 400.0,
            scheme: Scheme::Markovian,
            n_trajectories: 400,
            seed: 99,
            record_stride: 20,
        };
        let stats = run_ensemble(&cfg, &plan).unwrap();
        for j in 0..2 {
            let occ = stats.final_occupancy[j];
            let err = stats.final_occupancy_stderr[j];
            assert!(
                (occ - 20.0).abs() <= 3.0 * err,
                "mode {j}: occupancy {occ:.3} +- {err:.3} vs 20"
            );
        }
    }

    #[test]
    fn markovian_ensemble_matches_exact_covariance() {
        let cfg = two_mode_reference();
        let plan = SimPlan {
            dt: 0.05,
            t_final: 500.0,
            scheme: Scheme::Markovian,
            n_trajectories: 240,
            seed: 1234,
            record_stride: 50,
        };
        let stats = run_ensemble(&cfg, &plan).unwrap();
        let exact = mode_report(&solve_for_config(&cfg).unwrap().covariance).unwrap();
        for (j, theory) in exact.iter().enumerate() {
            let occ = stats.final_occupancy[j];
            let err = stats.final_occupancy_stderr[j];
            assert!(
                (occ - theory.occupancy).abs() <= 3.0 * err,
                "mode {j}: MC {occ:.4} +- {err:.4} vs exact {:.4}",
                theory.occupancy
            );
        }
    }

    #[test]
    fn full_ensemble_matches_its_exact_theory() {
        let cfg = two_mode_reference();
        let plan = SimPlan {
            dt: 0.025,
            t_final: 900.0,
            scheme: Scheme::Full,
            n_trajectories: 160,
            seed: 77,
            record_stride: 100,
        };
        let stats = run_ensemble(&cfg, &plan).unwrap();
        let exact = full_scheme_steady_occupancy(&cfg).unwrap();
        for (j, theory) in exact.iter().enumerate() {
            let occ = stats.final_occupancy[j];
            let err = stats.final_occupancy_stderr[j];
            assert!(
                (occ - theory.occupancy).abs() <= 3.0 * err,
                "mode {j}: MC {occ:.4} +- {err:.4} vs exact {:.4}",
                theory.occupancy
            );
        }
    }

    #[test]
    fn ensembles_are_bitwise_deterministic_across_thread_counts() {
        let cfg = two_mode_reference();
        let plan = SimPlan {
            dt: 0.05,
            t_final: 20.0,
            scheme: Scheme::Markovian,
            n_trajectories: 16,
            seed: 5,
            record_stride: 10,
        };
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_ensemble(&cfg, &plan).unwrap())
        };
        let a = run_with(1);
        let b = run_with(4);
        assert_eq!(a, b);
        let c = run_with(3);
        assert_eq!(a, c);
    }

    #[test]
    fn halving_dt_leaves_steady_energy_statistically_unchanged() {
        // The two runs draw independent noise paths, so the difference of
        // the estimates carries both stderrs; any genuine step-size bias
        // would have to hide below the 3-sigma combined noise floor.
        let cfg = two_mode_reference();
        let base = SimPlan {
            dt: 0.05,
            t_final: 400.0,
            scheme: Scheme::Markovian,
            n_trajectories: 200,
            seed: 2024,
            record_stride: 40,
        };
        let halved = SimPlan { dt: 0.025, record_stride: 80, ..base.clone() };
        let coarse = run_ensemble(&cfg, &base).unwrap();
        let fine = run_ensemble(&cfg, &halved).unwrap();
        for j in 0..2 {
            let delta = (coarse.final_occupancy[j] - fine.final_occupancy[j]).abs();
            let err = coarse.final_occupancy_stderr[j].hypot(fine.final_occupancy_stderr[j]);
            assert!(delta <= 3.0 * err, "mode {j}: dt shift {delta:.4} vs stderr {err:.4}");
        }
    }

    #[test]
    fn full_scheme_dt_bound_is_enforced() {
        let cfg = two_mode_reference(); // max rate = omega_fb = 3.5
        let plan = SimPlan {
            dt: 0.05,
            t_final: 10.0,
            scheme: Scheme::Full,
            n_trajectories: 1,
            seed: 0,
            record_stride: 1,
        };
        assert!(plan.validate(&cfg).is_err());
        let ok = SimPlan { dt: 0.025, ..plan };
        assert!(ok.validate(&cfg).is_ok());
    }

    #[test]
    fn divergence_reports_nonfinite_with_trajectory() {
        // dt far above the RK4 stability limit for omega = 1: the drift
        // amplifies every step and the state blows up.
        let cfg = feedback_off(1, 0.0, 10.0);
        let plan = SimPlan {
            dt: 4.0,
            t_final: 4000.0,
            scheme: Scheme::Markovian,
            n_trajectories: 2,
            seed: 1,
            record_stride: 10,
        };
        match run_ensemble(&cfg, &plan) {
            Err(Error::NonFinite { trajectory, t }) => {
                assert!(trajectory < 2);
                assert!(t > 0.0);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn full_theory_reduces_to_markovian_when_loop_is_off() {
        // With G = 0 and zero gain the extended model's mechanical block
        // carries thermal physics only, matching the reduced model exactly.
        let cfg = feedback_off(2, 1e-3, 30.0);
        let full = full_scheme_steady_occupancy(&cfg).unwrap();
        let reduced = mode_report(&solve_for_config(&cfg).unwrap().covariance).unwrap();
        for j in 0..2 {
            assert_relative_eq!(full[j].occupancy, reduced[j].occupancy, max_relative = 1e-8);
            assert_relative_eq!(full[j].occupancy, 30.0, max_relative = 1e-6);
        }
    }
}
