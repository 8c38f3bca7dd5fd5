//! Dynamic 3D Gaussian scenes with a semantic feature field: deformable
//! splatting, a feature codec, text-promptable queries and the training
//! loop that ties them together.

// NaN must fail range checks, and index loops mirror the math
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod codec;
pub mod dataio;
pub mod deformation;
pub mod error;
pub mod evalkit;
pub mod gaussian;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod query;
pub mod rasterizer;
pub mod scalar;
pub mod sh;
pub mod trainer;

pub use camera::Camera;
pub use codec::FeatureCodec;
pub use deformation::DeformationField;
pub use error::{Error, Result};
pub use gaussian::GaussianCloud;
pub use model::SceneModel;
pub use query::{QueryLexicon, QueryResult};
pub use scalar::Real;
pub use trainer::{Checkpoint, TrainConfig};

pub type Cloud32 = GaussianCloud<f32>;
pub type Cloud64 = GaussianCloud<f64>;
pub type Model32 = SceneModel<f32>;
pub type Model64 = SceneModel<f64>;
pub type Codec64 = FeatureCodec<f64>;
pub type Camera32 = Camera<f32>;
pub type Camera64 = Camera<f64>;
