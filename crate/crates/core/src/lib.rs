//! Building blocks for refining image captions through text-to-image
//! reconstruction: reviser prompts and output parsing, refinement traces,
//! the DPO objective with a tabular toy policy, preference-pair export, and
//! caption metrics.
//!
//! Everything here is pure and free of network access so it also builds for
//! `wasm32-unknown-unknown`.

pub mod answer;
pub mod dpo;
pub mod eval;
pub mod hashing;
pub mod image_ref;
pub mod pairs;
pub mod prompt;
pub mod trace;

pub use answer::QaAnswer;
pub use image_ref::ImageRef;
pub use trace::{RefineConfig, RefinementTrace, Role};
