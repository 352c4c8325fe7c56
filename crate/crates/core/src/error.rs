use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },

    #[error("validation failed for {} record(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<String>),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("negligible probability mass ({mass:e}) in truncation region")]
    NegligibleMass { mass: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("too few complete cases in arm {arm}: have {have}, need {need}; supply hyperparameters explicitly")]
    TooFewCompleteCases { arm: u8, have: usize, need: usize },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn summarize(items: &[String]) -> String {
    const SHOWN: usize = 5;
    let mut s = items.iter().take(SHOWN).cloned().collect::<Vec<_>>().join("; ");
    if items.len() > SHOWN {
        s.push_str(&format!("; ... and {} more", items.len() - SHOWN));
    }
    s
}

impl Error {
    /// True for failures caused by bad input data or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedRow { .. }
                | Error::Validation(_)
                | Error::Domain(_)
                | Error::TooFewCompleteCases { .. }
                | Error::Config(_)
                | Error::Csv(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NegligibleMass { .. } | Error::Factorization(_) => true,
            Error::Iteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
