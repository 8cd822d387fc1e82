use serde::Serialize;
use thiserror::Error;
use wavescale_core::Error as CoreError;

pub type Result<T> = core::result::Result<T, CliError>;

/// One schema violation in a configuration document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    /// Dotted path into the document, `.` for the root.
    pub path: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {}", summarize(.0))]
    Config(Vec<FieldError>),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn summarize(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(|f| format!("{}: {}", f.path, f.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Machine-readable error record written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config(vec![FieldError {
            path: path.into(),
            message: message.into(),
        }])
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Data(_) | CliError::Io { .. } => "data",
            CliError::Numerical(_) => "numerical",
        };
        ErrorRecord {
            kind,
            exit_code: self.exit_code(),
            message: self.to_string(),
            fields: match self {
                CliError::Config(f) => f.clone(),
                _ => Vec::new(),
            },
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::BandlimitTooSmall { .. }
            | CoreError::BandlimitTooLarge { .. }
            | CoreError::InvalidFrame(_)
            | CoreError::InvalidQuantiles(_)
            | CoreError::InvalidLossSpec(_)
            | CoreError::InvalidConfig(_)
            | CoreError::InvalidSpec(_) => CliError::config(".", message),
            CoreError::NonFiniteGradient { .. } | CoreError::NonFiniteLoss { .. } => CliError::Numerical(message),
            CoreError::InvalidGrid(_)
            | CoreError::GridMismatch { .. }
            | CoreError::ShapeMismatch(_)
            | CoreError::InvalidIndex(_)
            | CoreError::SeriesTooShort { .. }
            | CoreError::NonFinite { .. }
            | CoreError::MissingModel(_)
            | CoreError::MissingLevel(_) => CliError::Data(message),
        }
    }
}
