//! Few-shot adaptation on a miniature vision transformer: prototype
//! classifiers with text priors, linear probing, and LoRA fine-tuning with
//! a cross-entropy plus supervised contrastive objective.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod lora;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod schedules;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
