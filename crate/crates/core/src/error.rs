//! Error type shared by every module in the crate.

/// Everything that can go wrong, from config parsing to solver failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value fails a local precondition (non-finite, wrong sign, wrong length).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A config fails cross-field validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Fixed-point iteration exhausted its budget.
    #[error("fixed-point iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    /// The drift matrix is not strictly stable; no stationary state exists.
    #[error("drift matrix is not stable (spectral abscissa {margin:.6e} >= -1e-12)")]
    Unstable { margin: f64 },

    /// A dense linear solve hit a singular matrix.
    #[error("linear system is singular")]
    SingularSystem,

    /// The eigenvalue (Schur) iteration failed to converge.
    #[error("eigenvalue computation did not converge")]
    EigenFailure,

    /// Mode frequencies too close for the closed-form variances.
    #[error(
        "closed form rejected: min |omega_i^2 - omega_j^2| = {min_gap:.6e} is below \
         the degeneracy threshold {threshold:.6e}; use the exact covariance solve"
    )]
    DegenerateFrequencies { min_gap: f64, threshold: f64 },

    /// The two-mode noise coefficient needs nonzero feedback gains.
    #[error("feedback gain of mode {mode} is zero; the cross-noise coefficient is undefined")]
    ZeroGain { mode: usize },

    /// Frequencies are not an increasing, evenly spaced ramp.
    #[error("frequencies are not a linear dispersion: {0}")]
    NotLinearDispersion(String),

    /// The feedback damping matrix is not uniform, so the single-bright-mode
    /// reduction does not apply.
    #[error("feedback damping is not uniform: {0}")]
    UnequalRates(String),

    /// A trajectory produced a non-finite state value.
    #[error("non-finite state in trajectory {trajectory} at t = {t}")]
    NonFinite { trajectory: usize, t: f64 },

    /// The config file could not be parsed (message carries line/column).
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// The config contains a key the schema does not define.
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    /// A `--grid` argument was malformed.
    #[error("invalid grid spec `{0}`: expected MIN:MAX:POINTS[:log]")]
    GridSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
