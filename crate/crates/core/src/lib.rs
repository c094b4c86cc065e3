//! Image-conditioned motion prediction with an energy model, a learned
//! motion optimizer and a sequence VAE, over a synthetic tabletop benchmark.
//!
//! Every numeric routine is generic over [`Scalar`]; the aliases below fix
//! the element type to `f32`, which is what datasets and checkpoints store.

pub mod checkpoint;
pub mod dataset;
pub mod dmo;
pub mod ebm;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod motion;
pub mod optimizers;
pub mod pipeline;
pub mod scene;
pub mod vae;

pub use ebmdmo_autograd::{cast, Scalar};
pub use error::{Error, Result};

pub type Pose = motion::Pose<f32>;
pub type Trajectory = motion::Trajectory<f32>;
