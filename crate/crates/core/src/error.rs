use std::fmt;

/// Errors produced anywhere in the adaptation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid label {label} at pixel {index} (expected < {classes} or 255)")]
    InvalidLabel {
        label: u8,
        index: usize,
        classes: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("hypergraph vertex {0} has zero degree")]
    Singular(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("unknown scenario `{0}` (expected equality2, equality3 or inclusion2)")]
    UnknownScenario(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFinite {
        iteration: usize,
        breakdown: LossDump,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Component losses captured when training aborts on a non-finite value.
#[derive(Debug, Clone, Copy)]
pub struct LossDump {
    pub sup: f64,
    pub ssl: f64,
    pub ssl_multi: f64,
    pub total: f64,
}

impl fmt::Display for LossDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sup={} ssl={} sslM={} total={}",
            self.sup, self.ssl, self.ssl_multi, self.total
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
