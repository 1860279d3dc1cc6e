//! Graph IR, analytical cost model, roadmap rewrite passes and a naive
//! reference interpreter for PMRID-style U-Net restoration networks.

pub mod analyzer;
pub mod builders;
pub mod error;
pub mod interpreter;
pub mod ir;
pub mod passes;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{MofaError, Result};
pub use tensor::{Dims4, Tensor};
