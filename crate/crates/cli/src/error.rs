//! Exit-code classification.

use std::fmt;

use triplex_core::CoreError;

/// An error caused by the user's input or configuration.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Exit status for runtime failures.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for usage, input and configuration errors.
pub const EXIT_INPUT: i32 = 2;

/// 2 when any error in the chain is an input error, otherwise 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let input = err.chain().any(|e| {
        e.is::<InputError>()
            || e.downcast_ref::<CoreError>()
                .is_some_and(CoreError::is_input_error)
    });
    if input {
        EXIT_INPUT
    } else {
        EXIT_RUNTIME
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification_follows_the_cause_chain() {
        let e = anyhow::Error::new(InputError("x".into())).context("loading");
        assert_eq!(exit_code(&e), EXIT_INPUT);
        let e = anyhow::Error::new(CoreError::Checkpoint("bad".into()));
        assert_eq!(exit_code(&e), EXIT_INPUT);
        let e = Err::<(), _>(CoreError::NonFinite("loss".into()))
            .context("training")
            .unwrap_err();
        assert_eq!(exit_code(&e), EXIT_RUNTIME);
    }
}
