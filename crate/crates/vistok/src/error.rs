use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the pipeline. Variant names follow the
/// contracts of the operations that raise them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus root {0} contains no readable text files")]
    EmptyCorpus(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("cannot lay out empty or whitespace-only text")]
    EmptyText,
    #[error("font error: {0}")]
    Font(String),

    #[error("vocab does not contain token id {0}")]
    Decode(u32),
    #[error("{side} px is not divisible by {patch} px patches")]
    NotDivisible { side: u32, patch: u32 },

    #[error("single-image template cannot hold {0} images")]
    TemplateMismatch(usize),
    #[error("sequence length {got} exceeds context length {limit}")]
    CapacityExceeded { got: usize, limit: usize },

    #[error("corpus has only {have} distinct pages, need {need}")]
    InsufficientCorpus { have: usize, need: usize },
    #[error("document renders to {got} pages, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("document has no facts to ask about")]
    NoFacts,
    #[error("page has empty ground truth")]
    EmptyPage,
    #[error("refusing to export an empty dataset")]
    EmptyDataset,

    #[error("image side {got} px does not match configured {want} px")]
    Shape { got: usize, want: usize },
    #[error("token stream has {slots} image slots but {images} images were supplied")]
    SlotMismatch { slots: usize, images: usize },
    #[error("sequence of {got} rows exceeds context length {limit}")]
    ContextOverflow { got: usize, limit: usize },
    #[error("supervision mask selects no positions")]
    EmptyMask,
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("prediction and gold lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("need at least 2 distinct page-count groups, got {0}")]
    InsufficientGroups(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) => 2,
            Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }
}
