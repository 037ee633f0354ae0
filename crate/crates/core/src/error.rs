use std::fmt;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{} missing cell(s): {}", .0.len(), MissingList(.0))]
    MissingCells(Vec<String>),

    #[error("fixed-effect design is rank deficient; collinear column(s): {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("cleaning removed every record of group level `{0}`")]
    EmptyGroupLevel(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

struct MissingList<'a>(&'a [String]);

impl fmt::Display for MissingList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 20;
        for (i, key) in self.0.iter().take(SHOWN).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(key)?;
        }
        if self.0.len() > SHOWN {
            write!(f, ", ... ({} more)", self.0.len() - SHOWN)?;
        }
        Ok(())
    }
}
