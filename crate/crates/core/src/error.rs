use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite output of layer {layer} during {context}")]
    NonFiniteLayer { context: &'static str, layer: usize },

    #[error("{what} out of domain: {detail}")]
    Domain { what: &'static str, detail: String },

    #[error("posterior q(z_s | z_t, x) at s={s}, t={t} is deterministic (sigma_tilde^2 = 0)")]
    DeterministicPosterior { s: f64, t: f64 },

    #[error("alpha(t) = {alpha:.3e} too small; data prediction x_hat = (z - sigma*eps_hat)/alpha is singular")]
    SingularAlpha { alpha: f64 },

    #[error("step size underflow at t={t:.6} (error norm {err:.3e}); problem too stiff for requested tolerances")]
    StepSizeUnderflow { t: f64, err: f64 },

    #[error("inversion failed: {0}")]
    Inversion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
