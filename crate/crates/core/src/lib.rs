pub mod autograd;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod image_reweighting;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pixel_correspondence;
pub mod pixel_reasoning;
pub mod plot;
pub mod scene;
pub mod selfcheck;
pub mod semantic_reasoning;
pub mod tensor;
pub mod training;

pub use error::{FgrrError, Result};
