//! Multi-scale prototype network for interpretable image classification.
//!
//! A convolutional backbone feeds a feature pyramid; each learned prototype
//! lives on one pyramid level and is compared to every patch of that level by
//! cosine similarity. A top-k "focal" pooling turns each similarity map into a
//! score, and a linear layer turns scores into class logits. Because each
//! prototype is projected onto a real training patch, every prediction can be
//! explained as "this part of the image looks like that part of a training
//! image".

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod classes;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod projection;
pub mod prototype;
pub mod tensor;
pub mod trainer;

pub use classes::{MarginClass, NUM_CLASSES};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Real, Tensor};
