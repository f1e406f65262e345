use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (empty input, bad index,
    /// mismatched dimensions).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("external hash table has no entry for layer {layer}, token {token}")]
    MissingHashEntry { layer: usize, token: usize },

    #[error("training diverged at step {step} (seed {seed}): {detail}")]
    Diverged { seed: u64, step: usize, detail: String },

    #[error("expert ({layer}, {expert}) needs {bytes} bytes but the fast tier holds {budget}")]
    Unservable { layer: usize, expert: usize, bytes: u64, budget: u64 },

    #[error("placement plan does not match residency state: {0}")]
    PlanMismatch(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),
}

/// Shorthand for building a [`Error::Contract`].
#[macro_export]
macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::Error::Contract(alloc::format!($($arg)*))
    };
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
