//! Annotations, chips, augmentation and synthetic scenes.

mod annotations;
mod augment;
mod dataset;
mod sampling;
mod scene;
mod synthetic;

pub use annotations::{
    load_annotations, parse_annotations, write_annotations, BoxHandling, ObjectRecord, SceneRecord,
};
pub use augment::{apply_augment, augment, AugmentParams, AugmentPolicy, ColorJitter};
pub use dataset::{load_dataset, load_png, save_png, write_dataset, ANNOTATIONS_FILE};
pub use sampling::{resample_window, sample_chip, SamplingPolicy};
pub use scene::{Chip, Image, LabeledScene, Scene};
pub use synthetic::{generate_synthetic_scene, generate_synthetic_set, ClassSpec, Shape, SyntheticSpec};
