use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("quadrature did not converge: {what} (estimated relative error {estimate:.3e}, tolerance {tolerance:.1e})")]
    Quadrature {
        what: String,
        estimate: f64,
        tolerance: f64,
    },

    #[error("observation is impossible under the channel: {0}")]
    InconsistentObservation(String),

    #[error("importance sampler degenerate: effective sample size {ess:.1} below {min}")]
    DegenerateSampler { ess: f64, min: f64 },

    #[error("2x2 system is singular (det = {det:.3e})")]
    Singular { det: f64 },

    #[error("optimizer diverged at step {step}: loss {loss:.3e}")]
    Diverged { step: usize, loss: f64 },

    #[error("layer {layer}, half-iteration {half_iter}: {source}")]
    Layer {
        layer: usize,
        half_iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_layer(self, layer: usize, half_iter: usize) -> Self {
        Error::Layer {
            layer,
            half_iter,
            source: Box::new(self),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
