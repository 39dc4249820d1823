//! Process exit codes.

use std::fmt;

use tdvrp_core::Error;

pub const FAILURE: u8 = 1;
pub const USAGE: u8 = 2;
pub const INFEASIBLE: u8 = 3;
pub const MISMATCH: u8 = 4;

/// Bad flags, config or input shape.
#[derive(Debug)]
pub struct Usage(pub String);

/// A solver's claimed cost disagrees with the env replay.
#[derive(Debug)]
pub struct Mismatch(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage: {}", self.0)
    }
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "internal mismatch: {}", self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Mismatch {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

pub fn code(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if cause.is::<Usage>() {
            return USAGE;
        }
        if cause.is::<Mismatch>() {
            return MISMATCH;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::OutOfRange(_) | Error::Parse { .. } | Error::Shape(_) => USAGE,
                Error::InvalidInstance(_) | Error::Infeasible(_) | Error::InfeasibleEpisode { .. } => INFEASIBLE,
                _ => FAILURE,
            };
        }
    }
    FAILURE
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn codes_follow_the_error_kind() {
        let mismatch: anyhow::Error = Mismatch("aco claims 1, replay gives 2".into()).into();
        assert_eq!(code(&mismatch), MISMATCH);
        assert_eq!(code(&usage("bad")), USAGE);
        let wrapped = Err::<(), _>(Error::Shape("x".into())).context("loading").unwrap_err();
        assert_eq!(code(&wrapped), USAGE);
        assert_eq!(code(&Error::Infeasible("demand".into()).into()), INFEASIBLE);
        assert_eq!(code(&Error::Diverged("nan".into()).into()), FAILURE);
        assert_eq!(code(&anyhow::anyhow!("other")), FAILURE);
    }
}
