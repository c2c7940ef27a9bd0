use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("size guard: {what} would need {needed} items, limit is {limit}")]
    TooLarge {
        what: String,
        needed: u128,
        limit: u128,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("parse error in {source_name} at line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Dimension {
        context: context.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

pub(crate) fn check_shape(
    context: &str,
    m: &nalgebra::DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(dim_err(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}
