use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("composition mode {mode} requires {missing}")]
    Mode { mode: &'static str, missing: &'static str },

    #[error("cross-attention against an empty context")]
    EmptyContext,

    #[error("main and donor passes disagree on latent shape: {main:?} vs {donor:?}")]
    DualShape { main: (usize, usize), donor: (usize, usize) },

    #[error("mask entry {index} is {value}, expected 0 or 1")]
    Mask { index: usize, value: f64 },

    #[error("no cross-attention records to aggregate")]
    MissingRecord,

    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("step {step} outside 1..={steps}")]
    Step { step: usize, steps: usize },

    #[error("swap buffer for timestep {buffer} consumed at timestep {current}")]
    Lockstep { buffer: usize, current: usize },

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn shapes(what: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        Error::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }
}
