use alloc::string::String;

/// Errors raised by the aggregation core.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// A dataset or label violates a structural invariant.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A region tuple mixes boxes and masks.
    #[error("regions of mixed kinds cannot be compared")]
    MixedRegions,
    /// A fusion produced an empty region.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    /// The requested work cannot be carried out on this input.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// Inconsistent or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside its domain (e.g. an empty vote table).
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
