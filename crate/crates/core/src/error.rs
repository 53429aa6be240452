use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called on a graph that was already consumed; re-run the forward pass")]
    StaleGraph,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Arch(#[from] crate::arch::ArchError),

    #[error(transparent)]
    Config(#[from] crate::kv::ConfigError),

    #[error(transparent)]
    Load(#[from] crate::data::LoadError),

    #[error("non-finite gradient for parameter `{param}` at element {index}: {value}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
