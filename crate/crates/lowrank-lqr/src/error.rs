use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("system generation failed after {attempts} attempts")]
    Generation { attempts: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no data in buffer")]
    EmptyBuffer,

    #[error("confidence radii undefined at k={k}: denominator {denom} <= 0")]
    RadiiUndefined { k: u64, denom: f64 },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv parse: {0}")]
    CsvParse(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DimensionMismatch(_) | Error::Json(_) => 2,
            Error::Io(_) | Error::CsvParse(_) => 4,
            _ => 3,
        }
    }
}
