use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("negative running variance {value} in channel {channel}")]
    NegativeVariance { channel: usize, value: f32 },

    #[error("bad magic bytes {found:?}, expected \"RAPQ\"")]
    Magic { found: [u8; 4] },
    #[error("unsupported format version {found}")]
    Version { found: u32 },
    #[error("dangling blob reference `{name}`")]
    DanglingBlob { name: String },
    #[error("extent/size mismatch for `{name}`: {detail}")]
    Extent { name: String, detail: String },
    #[error("unknown dtype code {code} for `{name}`")]
    DType { name: String, code: u8 },
    #[error("payload value {value} of `{name}` outside [{lo}, {hi}]")]
    PayloadRange {
        name: String,
        value: i64,
        lo: i64,
        hi: i64,
    },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("quantizer `{0}` does not carry a power-of-two scale")]
    NotPowerOfTwo(String),

    #[error("{stage} diverged on unit {unit}: non-finite loss at iteration {iter}")]
    Diverged {
        stage: &'static str,
        unit: usize,
        iter: usize,
    },
    #[error("integer accumulator overflow in layer `{layer}`")]
    Overflow { layer: String },
    #[error("integer path disagrees with the float simulation at `{layer}` (max deviation {max_deviation})")]
    Mismatch { layer: String, max_deviation: f64 },
    #[error("fixture accuracy {accuracy:.4} below required {required:.2}")]
    FixtureAccuracy { accuracy: f32, required: f32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, used by file-format validation and the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::NegativeVariance { .. } => "E_VARIANCE",
            Error::Magic { .. } => "E_MAGIC",
            Error::Version { .. } => "E_VERSION",
            Error::DanglingBlob { .. } => "E_DANGLING",
            Error::Extent { .. } => "E_EXTENT",
            Error::DType { .. } => "E_DTYPE",
            Error::PayloadRange { .. } => "E_RANGE",
            Error::Graph(_) => "E_GRAPH",
            Error::NotPowerOfTwo(_) => "E_POW2",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Overflow { .. } => "E_OVERFLOW",
            Error::Mismatch { .. } => "E_MISMATCH",
            Error::FixtureAccuracy { .. } => "E_FIXTURE",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
