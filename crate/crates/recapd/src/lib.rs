//! Batch caption refinement: model clients, the refinement loop, the
//! on-disk store, evaluation I/O and the `recapd` command line.

pub mod batch;
pub mod cli;
pub mod client;
pub mod config;
pub mod eval_io;
pub mod exit;
pub mod mock;
pub mod mock_server;
pub mod refine;
pub mod store;
