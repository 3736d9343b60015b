use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] speaker_align::Error),
    #[error("unsupported dump version {0} (this build reads version 1)")]
    DumpVersion(u64),
    #[error("dump shape mismatch: {0}")]
    DumpShape(String),
    #[error("truncated payload for layer {layer} head {head}: {got} of {expected} bytes")]
    DumpTruncated {
        layer: usize,
        head: usize,
        got: u64,
        expected: u64,
    },
    #[error("non-finite value in payload for layer {layer} head {head} at ({row}, {col})")]
    DumpValue {
        layer: usize,
        head: usize,
        row: usize,
        col: usize,
    },
    #[error("invalid dump manifest: {0}")]
    DumpManifest(String),
    #[error("invalid heatmap data: {0}")]
    Heatmap(String),
    #[error("{0}")]
    Verify(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code printed as `error[CODE]`.
    pub fn code(&self) -> &'static str {
        use speaker_align::Error as E;
        match self {
            Self::Usage(_) => "E_USAGE",
            Self::Io { .. } => "E_IO",
            Self::Core(E::Scene(_)) => "E_SCENE",
            Self::Core(E::Embedding(_)) => "E_EMBEDDING",
            Self::Core(E::Io(_)) => "E_IO",
            Self::Core(E::Json(_)) => "E_JSON",
            Self::Core(E::Contract(_)) => "E_CONFIG",
            Self::Core(_) => "E_ANALYSIS",
            Self::DumpVersion(_) => "E_DUMP_VERSION",
            Self::DumpShape(_) => "E_DUMP_SHAPE",
            Self::DumpTruncated { .. } => "E_DUMP_TRUNCATED",
            Self::DumpValue { .. } => "E_DUMP_VALUE",
            Self::DumpManifest(_) => "E_DUMP_MANIFEST",
            Self::Heatmap(_) => "E_HEATMAP",
            Self::Verify(_) => "E_VERIFY",
            Self::Csv(_) => "E_CSV",
            Self::Json(_) => "E_JSON",
        }
    }

    /// `error[CODE]: message` on a single line.
    pub fn diagnostic(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.code(), msg)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
