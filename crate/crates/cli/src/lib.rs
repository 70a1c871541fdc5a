//! Library surface of the command-line tool, exposed so integration tests
//! can drive commands in-process.

pub mod commands;
pub mod config;

use tagalign_core::CoreError;

/// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
pub fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::Config(_) | CoreError::Contract(_) => 2,
        CoreError::NonFiniteLoss { .. } => 4,
        _ => 3,
    }
}
