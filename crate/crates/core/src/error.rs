use alloc::string::String;

/// Errors raised by the adaptation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A hyperparameter or structural setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// An input tensor or dataset does not match the expected shape or range.
    #[error("input error: {0}")]
    Input(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// An annotation request would exceed the labeling budget.
    #[error("budget error: requested {requested} labels with {remaining} remaining")]
    Budget { requested: usize, remaining: usize },
    /// A label of an unannotated pool sample was requested.
    #[error("oracle access violation: label of unlabeled index {0} is hidden")]
    AccessViolation(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, input_err};
