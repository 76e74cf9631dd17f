use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Subsystem that raised an error; the CLI prefixes messages with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Tensor,
    Quant,
    Model,
    Dataset,
    Losses,
    Metrics,
    Training,
    Inference,
    Store,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Module::Tensor => "tensor",
            Module::Quant => "quant",
            Module::Model => "model",
            Module::Dataset => "dataset",
            Module::Losses => "losses",
            Module::Metrics => "metrics",
            Module::Training => "training",
            Module::Inference => "inference",
            Module::Store => "store",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("{module}: contract violated: {msg}")]
    Contract { module: Module, msg: String },
    #[error("{module}: configuration error: {msg}")]
    Config { module: Module, msg: String },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("{module}: format error: {msg}")]
    Format { module: Module, msg: String },
    #[error("non-finite gradient for `{param}`")]
    NonFinite { param: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: u8,
        #[source]
        source: Box<Error>,
    },
    #[error("case error at z={z}: {source}")]
    Case {
        z: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(module: Module, msg: impl Into<String>) -> Self {
        Error::Contract { module, msg: msg.into() }
    }

    pub fn config(module: Module, msg: impl Into<String>) -> Self {
        Error::Config { module, msg: msg.into() }
    }

    pub fn format(module: Module, msg: impl Into<String>) -> Self {
        Error::Format { module, msg: msg.into() }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Module tag used when the error is reported by the CLI.
    pub fn module(&self) -> Option<Module> {
        match self {
            Error::Shape(_) | Error::Axis { .. } => Some(Module::Tensor),
            Error::Contract { module, .. }
            | Error::Config { module, .. }
            | Error::Format { module, .. } => Some(*module),
            Error::Index { .. } => Some(Module::Dataset),
            Error::NonFinite { .. } | Error::Stage { .. } => Some(Module::Training),
            Error::Case { .. } => Some(Module::Inference),
            Error::Io(_) | Error::Json(_) => None,
        }
    }
}
