use thiserror::Error;

use crate::geo::CellId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("point ({lat}, {lon}) lies outside the grid")]
    OutOfGrid { lat: f64, lon: f64 },

    #[error("context dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("destination cell {0} is not in the model's destination set")]
    UnknownDestination(CellId),

    #[error("no weather record for {0}")]
    MissingWeather(chrono::NaiveDate),

    #[error("numerical degeneracy on day {day}, step {step}: {detail}")]
    Degenerate {
        day: usize,
        step: usize,
        detail: String,
    },

    #[error("logit fit diverged (coefficient norm {norm:.3e}); data look separable, use l2 > 0")]
    Separable { norm: f64 },

    #[error("EM produced a non-finite objective at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("silhouette undefined: {0}")]
    UndefinedScore(String),

    #[error("enumeration too large: |H|^m = {size} exceeds {bound}")]
    TooLarge { size: f64, bound: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}
