use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] fslab::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    /// 0 success, 1 config, 2 data or I/O, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use fslab::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io(_) | CliError::Json(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Data(_) | E::Io(_) | E::Shape { .. } | E::UndefinedRatio(_) => 2,
                E::Numeric { .. }
                | E::DegenerateVector(_)
                | E::DoubleBackward
                | E::NonScalarLoss(_)
                | E::DegenerateBatch
                | E::NonFiniteLoss { .. } => 3,
            },
        }
    }
}
