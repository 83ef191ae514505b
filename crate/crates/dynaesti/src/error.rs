use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Curve(#[from] curvfife::Error),

    #[error("invalid item parameters: {0}")]
    InvalidItem(String),

    #[error("stroke count {s} outside the supported range [{s_min}, {s_max}]")]
    UnsupportedStroke { s: i64, s_min: i64, s_max: i64 },

    #[error("unknown IRF family '{0}'; supported families: 3pl, probit3pl, golf")]
    UnknownFamily(String),

    #[error("hole has no fittable categories (no non-zero stroke count above the threshold)")]
    NoFittableCategories,

    #[error("no records supplied")]
    NoRecords,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate (student, item, time) record: {0}")]
    DuplicateRecord(String),

    #[error("record references unknown item '{0}'")]
    UnknownItem(String),

    #[error("subject needs at least 2 responses for the hold-out protocol, got {0}")]
    TooFewResponses(usize),

    #[error("family mismatch: {0} vs {1}")]
    FamilyMismatch(String, String),

    #[error("sampled functions must share a common interval")]
    DisjointGrids,

    #[error("invalid sampled function: {0}")]
    InvalidFunction(String),

    #[error("correspondence undefined for constant curve")]
    ConstantCurve,

    #[error("curve rejection failed after {attempts} attempts; lower the generator amplitude")]
    RejectionExhausted { attempts: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {message}")]
    Json { path: String, message: String },
}
