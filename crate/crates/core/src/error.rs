use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("undefined SNR reference: signal block is all zero")]
    UndefinedSnrReference,

    #[error("homography rank deficient")]
    HomographyRankDeficient,

    #[error("grid has {size} points, above the dense NNLS cap of {cap}; use cmf_solve_cd instead")]
    NnlsCapExceeded { size: usize, cap: usize },

    #[error("empty prior: use cmf_solve_cd")]
    EmptyPrior,

    #[error("marginal mass mismatch: {0} vs {1}")]
    MassMismatch(f64, f64),

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
