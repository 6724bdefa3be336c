use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label space mismatch: head has {head} classes, dataset has {data}")]
    LabelSpace { head: usize, data: usize },
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("invalid task family spec: {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("cannot sample cohort of {k} from pool of {pool}")]
    Cohort { k: usize, pool: usize },
    #[error("cannot split {pool} tasks into {folds} equal folds")]
    Fold { pool: usize, folds: usize },
    #[error("cannot subsample {requested} examples (draw {draw}) from {available} training examples")]
    Subsample {
        requested: usize,
        draw: usize,
        available: usize,
    },
    #[error("fusion of an empty contribution list")]
    EmptyFusion,
    #[error("fusion shape mismatch: {0}")]
    FusionShape(String),
    #[error("stale contribution: claims iteration {claimed}, repository is at {current}")]
    Stale { claimed: u64, current: u64 },
    #[error("duplicate contribution from {0}")]
    Duplicate(String),
    #[error("contributor {0} is not part of this iteration's cohort")]
    NotInCohort(String),
    #[error("update norm {norm} exceeds limit {limit} for contributor {contributor}")]
    NormExceeded {
        contributor: String,
        norm: f64,
        limit: f64,
    },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("iteration {iteration} failed: {source}")]
    Iteration {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("non-finite parameters produced by {0}")]
    NonFinite(String),
    /// Failure reaching or talking to a remote repository.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// The innermost cause, looking through iteration wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Iteration { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
