use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the glyphforge pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("font not found: {}", .0.display())]
    FontNotFound(PathBuf),

    #[error("font has no glyph for {0:?}")]
    MissingGlyph(char),

    #[error("font error: {0}")]
    Font(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("non-finite latent at step {step} (t = {timestep})")]
    Numerical { step: usize, timestep: usize },

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>) -> Self {
        Error::Shape(what.into())
    }

    pub(crate) fn invalid(what: impl Into<String>) -> Self {
        Error::InvalidInput(what.into())
    }

    /// Strips any stage tags and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Tags the error of a pipeline stage with the stage name.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Stage {
            stage,
            source: Box::new(source),
        })
    }
}
