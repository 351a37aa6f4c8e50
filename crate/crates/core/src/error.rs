use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a physical formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed tabular input. `row` is 1-based and counts data rows only.
    #[error("format error in {source_name} at row {row}: {message}")]
    Format {
        source_name: String,
        row: usize,
        message: String,
    },

    #[error("grid bin {bin} at {energy_ev:.6e} eV lies outside the table range [{min_ev:.6e}, {max_ev:.6e}] eV")]
    OutOfRange {
        bin: usize,
        energy_ev: f64,
        min_ev: f64,
        max_ev: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular preconditioner: dictionary row {row} ({label}) is identically zero")]
    SingularPreconditioner { row: usize, label: String },

    #[error("TOF grid too short: resolution kernel needs i0 >= {min_i0}, grid has i0 = {i0}")]
    GridTooShort { i0: usize, min_i0: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    /// A mean of zero paired with a positive count makes the likelihood infinite.
    #[error("infinite likelihood at pixel {pixel}, bin {bin}: mean {mean} with count {count}")]
    InfiniteLikelihood {
        pixel: usize,
        bin: usize,
        mean: f64,
        count: f64,
    },

    #[error("division by zero at pixel {pixel}, bin {bin}")]
    ZeroDivision { pixel: usize, bin: usize },

    #[error("solver failure after {iteration} iterations: {message}; iterate = {iterate:?}")]
    Solver {
        iteration: usize,
        message: String,
        iterate: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    Fingerprint {
        what: String,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that stem from bad numerics rather than bad inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Solver { .. }
                | Error::InfiniteLikelihood { .. }
                | Error::ZeroDivision { .. }
                | Error::SingularPreconditioner { .. }
                | Error::Degenerate(_)
                | Error::Domain(_)
        )
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}
