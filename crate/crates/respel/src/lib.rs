//! Residual permutation-equivariant network for point-cloud pose
//! estimation with point-to-pose voting.
//!
//! The crate covers the full pipeline: preprocessing (view and box
//! normalization), a tape-based reverse-mode tensor engine, the residual
//! PEL backbone, detection/regression voting heads, training with the
//! point-count curriculum, importance-based segmentation, and a
//! deterministic synthetic articulated-hand generator for desk-scale
//! experiments.

pub mod backbone;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod segment;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod voting;

pub use error::RespelError;
