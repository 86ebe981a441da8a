use thiserror::Error;

#[derive(Debug, Error)]
pub enum QocError {
    #[error("invalid channel pair ({m}, {n}): coupling is only defined for m != n")]
    InvalidPair { m: usize, n: usize },

    #[error("voltage {value} V at channel {channel}, ring {ring}, segment {segment} is outside [-15, 15] V")]
    ConstraintViolation {
        channel: usize,
        ring: usize,
        segment: usize,
        value: f64,
    },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unknown gate character '{0}' (allowed: I X Y Z H S T)")]
    UnknownGate(char),

    #[error("empty gate string")]
    EmptyGate,

    #[error("{n_segments} segments do not divide {t_steps} time steps")]
    SegmentMismatch { t_steps: usize, n_segments: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config field `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, QocError>;
