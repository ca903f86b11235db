use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite Fourier coefficient at n = {0}")]
    NonFinite(i64),

    #[error("grid size {grid_size} too small, need at least {required}")]
    InsufficientGrid { grid_size: usize, required: usize },

    #[error("{0} is not a dyadic integer")]
    NotDyadic(u64),

    #[error("states have different ambient cutoffs ({0} vs {1})")]
    AmbientMismatch(usize, usize),

    #[error("sample index {index} out of range for {n_samples} samples")]
    IndexOutOfRange { index: usize, n_samples: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("length mismatch: {0} values vs {1} weights")]
    LengthMismatch(usize, usize),

    #[error("negative or non-finite weight at position {0}")]
    BadWeight(usize),

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("step budget of {0} steps exhausted")]
    StepBudget(usize),

    #[error("{quantity} drift {drift:e} exceeds accuracy budget {bound:e}")]
    AccuracyBudget {
        quantity: &'static str,
        drift: f64,
        bound: f64,
    },

    #[error("Picard iteration failed to contract (iteration {iteration}, ratio {ratio})")]
    NonContraction { iteration: usize, ratio: f64 },

    #[error("Duhamel quadrature did not converge under refinement (defect {0:e})")]
    QuadratureRefinement(f64),

    #[error("enumeration of {count} tuples exceeds the budget of {limit}")]
    EnumerationBudget { count: f64, limit: f64 },

    #[error("non-finite ensemble statistic: {0}")]
    StatisticOverflow(String),

    #[error("{0} self-test check(s) failed")]
    SelfTest(usize),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that come from numerical integration or quadrature rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepUnderflow { .. }
                | Error::StepBudget(_)
                | Error::AccuracyBudget { .. }
                | Error::NonContraction { .. }
                | Error::QuadratureRefinement(_)
                | Error::StatisticOverflow(_)
                | Error::SelfTest(_)
        )
    }
}
