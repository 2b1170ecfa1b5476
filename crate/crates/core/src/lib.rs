pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod nn;
pub mod par;
pub mod patch;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use patch::ImagePatch;
