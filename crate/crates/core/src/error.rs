use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DagamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DagamError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("non-smooth point: {0}")]
    NonSmooth(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("load error in {}{}: {msg}", path.display(), line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Load {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DagamError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        DagamError::Dimension(msg.into())
    }

    pub(crate) fn load(
        path: impl Into<PathBuf>,
        line: Option<usize>,
        msg: impl Into<String>,
    ) -> Self {
        DagamError::Load {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DagamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DagamError::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
