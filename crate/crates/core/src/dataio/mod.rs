//! Files in and out: tensor containers, scene manifests, images and the
//! synthetic fixture generator.

pub mod archive;
pub mod frame;
pub mod image;
pub mod manifest;
pub mod synthetic;
pub mod tensor;

pub use frame::FrameSample;
pub use manifest::{load_dataset, Dataset, FrameEntry, SceneManifest};
pub use synthetic::{gen_synthetic, SyntheticScene, SyntheticSpec};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TensorData};
