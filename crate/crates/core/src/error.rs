use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the op.
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    /// An invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A caller broke an op's contract (non-scalar loss, non-binary mask, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// A loss or activation became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
