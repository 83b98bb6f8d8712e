//! Cold-damping feedback cooling of N mechanical modes coupled to a single
//! lossy cavity mode.
//!
//! The crate computes steady-state phonon occupancies three independent ways
//! and exposes the collective bright/dark mode structure of the feedback:
//!
//! * [`lyapunov`] solves the steady-state covariance of the reduced linear
//!   model exactly,
//! * [`analytic`] evaluates closed-form variance estimates valid for
//!   well-separated mode frequencies,
//! * [`sde`] integrates stochastic trajectories of either the full
//!   cavity+filter model or the reduced Markovian model,
//! * [`modes`] builds the orthonormal collective basis in which a single
//!   bright mode carries all of the feedback damping,
//! * [`cli`] wires everything to a command-line tool with a text config
//!   format and CSV output.
//!
//! State ordering everywhere is `v = (q_1, p_1, q_2, p_2, ..., q_N, p_N)`;
//! quadratures are dimensionless with vacuum variance 1/2, so a thermal mode
//! has `<q^2> = <p^2> = nbar + 1/2` and occupancy `nbar`.

pub mod analytic;
pub mod cli;
pub mod error;
pub mod lyapunov;
pub mod model;
pub mod modes;
pub mod sde;

pub mod book;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
