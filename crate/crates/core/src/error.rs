use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("empty dimension: {0}")]
    EmptyDimension(&'static str),

    #[error("log map undefined: angle {angle} rad is within 1e-6 of the antipode{}", .index.map(|i| format!(" (sample {i})")).unwrap_or_default())]
    Antipodal { angle: f64, index: Option<usize> },

    #[error("tangent vector is based at a different point (distance {0:e})")]
    BaseMismatch(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("class {class} belongs to frozen task {task}")]
    Frozen { class: u32, task: u32 },

    #[error("class {class} already registered under task {task}")]
    DuplicateClass { class: u32, task: u32 },

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("truncated input at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: u64, expected: u64 },

    #[error("unsupported format version {found} (expected {expected}); no migration available")]
    Version { found: u16, expected: u16 },

    #[error("digest mismatch: stored {stored:016x}, computed {computed:016x}")]
    DigestMismatch { stored: u64, computed: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("task {task}: {source}")]
    InTask {
        task: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_task(self, task: u32) -> Self {
        match self {
            e @ Error::InTask { .. } => e,
            e => Error::InTask {
                task,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through task context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InTask { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
