//! Synthetic paired scenes, the frame container, dataset manifests and augmentation.

mod augment;
mod dataset;
mod frame;
mod synth;

pub use augment::{augment_pair, augment_with, Transform, SCALE_RANGE};
pub use dataset::{
    generate_pairs, make_dataset, DatasetManifest, FramePair, ManifestEntry, Split, MANIFEST_NAME,
};
pub use frame::{read_frame, write_frame, Modality, PointCloudFrame, FRAME_MAGIC};
pub use synth::{frame_rng, generate_scene, ObjectCounts, Scene, SceneSpec};
