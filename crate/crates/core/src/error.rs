use thiserror::Error;

pub type Result<T, E = FairbidError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FairbidError {
    #[error("value {value} outside support [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("density vanishes at v = {at}; virtual valuation undefined")]
    Singularity { at: f64 },

    #[error("distribution is not strictly regular: virtual valuation decreases near v = {at}")]
    Regularity { at: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("quadrature did not converge after {panels} panels (last estimate {estimate})")]
    Quadrature { estimate: f64, panels: usize },

    #[error("Jacobian block for type {type_index} is not strictly diagonally dominant at row {row} (coverage too small?)")]
    Degenerate { row: usize, type_index: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("unknown keyword {0:?}")]
    UnknownKeyword(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("revenue ratio undefined: unconstrained revenue is zero")]
    UndefinedKappa,
}

impl FairbidError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FairbidError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
