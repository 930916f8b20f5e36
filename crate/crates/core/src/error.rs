use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage identifiers used to tag failures that surface from
/// [`crate::pipeline::register`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Downsample,
    Normals,
    Features,
    Filtering,
    Coarse,
    Keypoints,
    Local,
    Fusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Downsample => "downsample",
            Stage::Normals => "normals",
            Stage::Features => "features",
            Stage::Filtering => "filtering",
            Stage::Coarse => "coarse",
            Stage::Keypoints => "keypoints",
            Stage::Local => "local",
            Stage::Fusion => "fusion",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("not enough points: need {needed}, have {available}")]
    NotEnoughPoints { needed: usize, available: usize },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("no mutual correspondences survived top-{k} filtering")]
    NoMutualMatches { k: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The pipeline stage a failure originated from, if it was tagged.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
