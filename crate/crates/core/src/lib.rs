//! A desk-scale selective state-space (S6) sequence classifier, a catalog of
//! parameter-efficient fine-tuning methods that attach to it, a deterministic
//! training harness, and a two-step TPE-driven search over method
//! combinations and their hyperparameters.

pub mod experiment;
pub mod mamba;
pub mod peft;
pub mod search;
pub mod tensor;
pub mod train;
