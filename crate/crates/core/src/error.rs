use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at row {row}: {msg}")]
    DataRow { row: usize, msg: String },

    #[error("matrix of size {0} exceeds the dense limit of {1} rows")]
    DenseLimit(usize, usize),

    #[error("matrix is not positive definite: eigenvalue {value:.3e} at index {index}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("archive mismatch: {0}")]
    ArchiveMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::DataRow { .. } | Error::Csv(_) => 2,
            Error::NotPositiveDefinite { .. } | Error::Numerical(_) | Error::DenseLimit(..) => 3,
            Error::ArchiveMismatch(_) => 1,
            Error::Io(_) | Error::Serde(_) => 2,
        }
    }
}
