//! Speculative decoding with distilled draft models, on exact tabular language models.
//!
//! * [`prob`]: distributions, temperature, divergences and their gradients.
//! * [`lm`]: tabular and softmax-table language models.
//! * [`specdec`]: the draft-then-verify decoder with optional lenience.
//! * [`metrics`]: acceptance rate, block efficiency, speedup.
//! * [`distill`]: distillation of a draft toward the target.
//! * [`oracle`]: exact enumeration on tiny instances.
//! * [`cli`]: experiment runner behind the `speclab` binary.

pub mod cli;
pub mod distill;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod oracle;
pub mod prob;
pub mod specdec;

pub use error::{Error, Result};
