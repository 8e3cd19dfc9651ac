//! Multi-granularity knowledge distillation.
//!
//! A trained teacher gets two extra branches (abstracted and detailed
//! knowledge encoders with adapters) which are fitted to its own logits while
//! the teacher stays frozen. A student with matching encoders is then
//! distilled against all three heads, either head by head or against an
//! ensemble of the teacher's branches.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod self_analyze;
pub mod train;

pub use error::{Error, Result};
