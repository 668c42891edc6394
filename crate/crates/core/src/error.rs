use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("row error at line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("degenerate feature `{0}`: zero variance")]
    DegenerateFeature(&'static str),
    #[error("degenerate route: {0}")]
    DegenerateRoute(String),
    #[error("anomaly `{kind}` not applicable: {reason}")]
    InapplicableAnomaly { kind: String, reason: String },
    #[error("over-filtered: denoising would leave {remaining} points")]
    OverFiltered { remaining: usize },
    #[error("trajectory too short: {n} points, patch size {patch_size}")]
    TooShort { n: usize, patch_size: usize },
    #[error("infeasible patching config: {0}")]
    InfeasibleConfig(String),
    #[error("stationary direction (0, 0, 0) has no class")]
    StationaryDirection,
    #[error("direction class {0} out of range [0, 25]")]
    ClassOutOfRange(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("horizon {horizon} exceeds head capacity {max}")]
    HorizonRange { horizon: usize, max: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format version {found} does not match expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
