//! Process exit codes. The set is closed: every failure maps to one of these.

use crate::client::ClientError;
use crate::config::ConfigError;
use crate::refine::RefineError;
use crate::store::StoreError;

pub const OK: i32 = 0;
pub const USAGE: i32 = 1;
pub const CONFIG: i32 = 2;
pub const REMOTE: i32 = 3;
pub const PARSE: i32 = 4;

pub trait ExitClass {
    fn exit_code(&self) -> i32;
}

impl ExitClass for ConfigError {
    fn exit_code(&self) -> i32 {
        CONFIG
    }
}

impl ExitClass for StoreError {
    fn exit_code(&self) -> i32 {
        match self {
            StoreError::CorruptBlob(_)
            | StoreError::CorruptTrace { .. }
            | StoreError::CorruptFile { .. } => PARSE,
            StoreError::InvalidId(_) => USAGE,
            StoreError::NotAnImage(_) => PARSE,
            _ => CONFIG,
        }
    }
}

impl ExitClass for ClientError {
    fn exit_code(&self) -> i32 {
        match self {
            ClientError::Transport { .. }
            | ClientError::Provider { .. }
            | ClientError::EmptyResponse { .. }
            | ClientError::Decode { .. }
            | ClientError::Malformed { .. } => REMOTE,
            ClientError::UnparseableAnswer { .. } => PARSE,
            ClientError::Precondition(_) => USAGE,
            ClientError::Config(e) => e.exit_code(),
            ClientError::Store(e) => e.exit_code(),
        }
    }
}

impl ExitClass for RefineError {
    fn exit_code(&self) -> i32 {
        match self {
            RefineError::Client(e) => e.exit_code(),
            RefineError::Parse { .. } => PARSE,
            RefineError::Input(_) => USAGE,
            RefineError::Store(e) => e.exit_code(),
        }
    }
}
