//! Dataset manifests, frame sampling, face-crop preprocessing, image
//! augmentation, paired/unpaired training-set construction, and synthetic
//! desk-scale dataset generation.

pub mod augment;
pub mod imageops;
pub mod manifest;
pub mod pairing;
pub mod preprocess;
pub mod sampling;
pub mod synthetic;

pub use imageops::CropImage;
pub use manifest::{DatasetManifest, Label, Split, VideoRecord};
