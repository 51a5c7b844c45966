use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("infeasible protocol: attribute `{attribute}`: {message}")]
    Infeasible { attribute: String, message: String },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("export error: {0}")]
    Export(String),
    #[error("non-finite loss at epoch {epoch}, step {step}{}", diagnostics.as_ref().map(|p| format!(" (diagnostics written to {})", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostics: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor container error: {0}")]
    Container(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Data(_) => "data",
            Error::Schema { .. } => "schema",
            Error::ProtocolViolation(_) => "protocol_violation",
            Error::Infeasible { .. } => "infeasible",
            Error::Numerical(_) => "numerical",
            Error::Pipeline(_) => "pipeline",
            Error::Metric(_) => "metric",
            Error::Export(_) => "export",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Container(_) => "container",
        }
    }
}
