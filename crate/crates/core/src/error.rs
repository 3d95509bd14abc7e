use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty line")]
    EmptyLine,
    #[error("invalid id {id} (vocabulary size {size})")]
    InvalidId { id: usize, size: usize },
    #[error("artist too small to stratify: {artist} has {lines} lines")]
    ArtistTooSmall { artist: String, lines: usize },
    #[error("fractions must sum to 1, got {0}")]
    BadFractions(f64),

    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),
    #[error("signal too short: {len} samples, need at least {n_fft}")]
    SignalTooShort { len: usize, n_fft: usize },
    #[error("invalid frequency range: fmin={fmin}, fmax={fmax}, nyquist={nyquist}")]
    InvalidFrequencyRange { fmin: f64, fmax: f64, nyquist: f64 },
    #[error("cannot group-split: {0}")]
    CannotGroupSplit(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid artist {0}")]
    InvalidArtist(String),
    #[error("unknown conditioning mode {0:?}")]
    UnknownMode(String),
    #[error("audio embeddings required")]
    AudioEmbeddingsRequired,
    #[error("artist {0} has no training examples")]
    MissingArtist(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
