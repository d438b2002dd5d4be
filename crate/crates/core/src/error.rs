//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // -- manifest / split -----------------------------------------------
    #[error("manifest file not found: {0}")]
    ManifestNotFound(PathBuf),
    #[error("manifest has no records (header only?)")]
    EmptyManifest,
    #[error("malformed manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown {field} token {token:?} in manifest row {row}")]
    UnknownToken {
        field: &'static str,
        token: String,
        row: usize,
    },
    #[error("duplicate id {0:?} in manifest")]
    DuplicateId(String),
    #[error("unreadable image for id {id:?}: {path}")]
    UnreadableImage { id: String, path: PathBuf },
    #[error("validation split already populated ({0} records)")]
    ValSplitPopulated(usize),
    #[error("train split too small to reserve at least one record per class (train size {0})")]
    TrainTooSmall(usize),
    #[error("split {0:?} is empty")]
    EmptySplit(&'static str),

    // -- images / preprocessing -----------------------------------------
    #[error("failed to decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("image has zero dimension ({width}x{height})")]
    DegenerateImage { width: u32, height: u32 },

    // -- model ------------------------------------------------------------
    #[error("pretrained weights for {arch}/{init} not found; looked in {dir} (set the weights directory or use random init)")]
    WeightsNotFound {
        arch: String,
        init: String,
        dir: PathBuf,
    },
    #[error("weight artifact {path} is unusable: {reason}")]
    CorruptWeights { path: PathBuf, reason: String },
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },

    // -- schedules / training ---------------------------------------------
    #[error("validation metric is NaN at epoch {0}")]
    NanMetric(usize),
    #[error("early-stop epochs must be observed in increasing order (got {got} after {last})")]
    EpochOrder { got: usize, last: usize },
    #[error("loss became NaN (epoch {epoch}, batch {batch}, lr {lr:e})")]
    NanLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("run config mismatch on resume: {0}")]
    ConfigMismatch(String),
    #[error("run snapshot in {dir} is unusable: {reason}")]
    CorruptSnapshot { dir: PathBuf, reason: String },

    // -- metrics -----------------------------------------------------------
    #[error("no predictions to evaluate")]
    EmptyPredictions,
    #[error("prediction score {score} for id {id:?} is outside [0,1]")]
    ScoreOutOfRange { id: String, score: f64 },
    #[error("metric requires both classes, got only {0:?} predictions")]
    SingleClass(&'static str),
    #[error("bootstrap needs at least {min} resamples (got {got})")]
    TooFewResamples { min: usize, got: usize },

    // -- explain -------------------------------------------------------------
    #[error("no registered target layer for architecture {0}")]
    NoTargetLayer(String),
    #[error("heatmap size {heatmap:?} does not match image size {image:?}")]
    OverlaySizeMismatch {
        heatmap: (usize, usize),
        image: (usize, usize),
    },

    // -- profile ---------------------------------------------------------------
    #[error("no registered op counter for layer kind {0:?}")]
    UnknownLayerKind(String),
    #[error("latency measurement needs n_runs >= {min_runs} and n_warmup >= {min_warmup}")]
    LatencyConfig { min_runs: usize, min_warmup: usize },

    // -- sweep -------------------------------------------------------------------
    #[error("requested top-{k} cells but only {done} completed")]
    NotEnoughCells { k: usize, done: usize },
    #[error("sweep grid axis {0:?} is empty")]
    EmptyAxis(&'static str),
    #[error("validation split mismatch: cell would train on a different split than {0}")]
    SplitHashMismatch(String),

    // -- config / io ----------------------------------------------------------------
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
