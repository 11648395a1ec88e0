use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate observation for unit `{unit}` at time {time}")]
    DuplicateKey { line: usize, unit: String, time: i64 },

    #[error("unit `{unit}`: missing observation between times {before} and {after}")]
    MissingPeriod { unit: String, before: i64, after: i64 },

    #[error("unknown unit `{0}`")]
    UnknownUnit(String),

    #[error("unit `{unit}`: {available} usable observations, need at least {required}")]
    InsufficientData {
        unit: String,
        available: usize,
        required: usize,
    },

    #[error("unit `{unit}`: design matrix is singular and cannot be repaired by the ridge floor")]
    SingularDesign { unit: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("focus index {index} out of range for parameter dimension {dim}")]
    FocusIndex { index: usize, dim: usize },

    #[error("{}", focus_singular_message(.unit, *.lambda))]
    FocusSingular { unit: Option<String>, lambda: f64 },

    #[error("weights are infeasible: {0}")]
    InfeasibleWeights(String),

    #[error("quadratic form is not symmetric (max asymmetry {0:e})")]
    NonSymmetric(f64),

    #[error("simplex QP did not converge after {iterations} iterations (KKT residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("nbar = {nbar} must be smaller than N = {n}; use the fixed-N regime instead")]
    UseFixedRegime { nbar: usize, n: usize },

    #[error("unit `{unit}`: {source}")]
    Unit {
        unit: String,
        #[source]
        source: Box<Error>,
    },

    #[error("draw {index}: {source}")]
    Draw {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{} unit fits failed: {}", .0.len(), summarize(.0))]
    UnitFits(Vec<Error>),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn focus_singular_message(unit: &Option<String>, lambda: f64) -> String {
    match unit {
        Some(u) => format!("long-run focus is singular at unit `{u}` (lambda = {lambda})"),
        None => format!("long-run focus is singular (lambda = {lambda})"),
    }
}

fn summarize(errors: &[Error]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Attach a unit label, or fill it in for focus singularities.
    pub(crate) fn for_unit(self, unit: &str) -> Self {
        match self {
            Error::FocusSingular { unit: None, lambda } => Error::FocusSingular {
                unit: Some(unit.to_string()),
                lambda,
            },
            e @ (Error::FocusSingular { .. }
            | Error::Unit { .. }
            | Error::InsufficientData { .. }
            | Error::SingularDesign { .. }
            | Error::MissingPeriod { .. }) => e,
            e => Error::Unit {
                unit: unit.to_string(),
                source: Box::new(e),
            },
        }
    }
}
