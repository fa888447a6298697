use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants map onto the failure surfaces of the pipeline stages; the CLI
/// turns each variant into a short machine-readable kind plus an exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated a documented precondition (bad shape, out-of-range
    /// timestep, invalid hyperparameter, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Stored bytes or handles (checkpoint, manifest, token grid) failed
    /// validation.
    #[error("corrupt data: {0}")]
    CorruptData(String),

    /// A pipeline stage was invoked before the stage it depends on, e.g. a
    /// missing upstream checkpoint or dataset.
    #[error("dependency not satisfied: {0}")]
    Dependency(String),

    /// Training aborted (empty corpus, non-finite loss, ...).
    #[error("training failed: {0}")]
    Training(String),

    /// Dataset build aborted; partial output was cleaned up.
    #[error("dataset build failed: {0}")]
    Dataset(String),

    /// Configuration file rejected (unknown key, conflicting keys, bad value).
    #[error("config: {0}")]
    Config(String),

    /// Command-line contract violation (bad flag combination, missing path).
    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// A [`Error::CorruptData`] tied to a file on disk.
    pub fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::CorruptData(format!("{}: {}", path.into().display(), detail.into()))
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CorruptData { .. } => "corrupt-data",
            Error::Dependency(_) => "dependency",
            Error::Training(_) => "training",
            Error::Dataset(_) => "dataset-build",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
        }
    }

    /// Process exit code for the CLI: contract violations and unmet stage
    /// dependencies exit 2, runtime failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Dependency(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_and_exit_codes() {
        let e = Error::invalid("x");
        assert_eq!(e.kind(), "invalid-argument");
        assert_eq!(e.exit_code(), 1);

        let e = Error::Dependency("autoencoder checkpoint missing".into());
        assert_eq!(e.kind(), "dependency");
        assert_eq!(e.exit_code(), 2);

        let e = Error::Usage("--input is required".into());
        assert_eq!(e.exit_code(), 2);

        let e = Error::corrupt("/tmp/x.ckpt", "bad magic");
        assert_eq!(e.kind(), "corrupt-data");
        assert!(e.to_string().contains("bad magic"));
    }
}
