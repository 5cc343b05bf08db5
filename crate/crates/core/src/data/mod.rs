//! Dataset manifests, stratification, splitting, augmentation, canopy
//! isolation and the synthetic vineyard generator.

pub mod augment;
mod debar;
pub mod loader;
mod record;
mod split;
pub mod synth;

pub use augment::{
    apply_op, augment_dataset, augment_plan, channel_enhance, derive_seed, gaussian_kernel, gaussian_noise_blur, rectangle_discard, rotate,
    rotate_boxes, AugmentOp, AugmentSummary,
};
pub use debar::apply_debar;
pub use loader::{letterbox, load_sample, load_samples, Letterbox, Sample};
pub use record::{
    by_vine, ingest, load_dir, read_counts, read_labels, read_manifest, write_counts, write_labels, write_manifest,
    CountRecord, DatasetManifest, ImageRecord, Labels, Maturity, Provenance, Split, Sunlight, Variety, Weather,
    MANIFEST_SCHEMA,
};
pub use split::{split, split_sizes, stratify, stratify_variety, Dimension};
pub use synth::{render_scene, synth_vineyard, Scene, SynthProfile};
