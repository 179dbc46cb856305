//! Dataset manifests, foreground masks, region grids, augmentation, synthesis
//! and patient-wise fold splitting.

pub mod augment;
pub mod folds;
pub mod manifest;
pub mod mask;
pub mod regions;
pub mod synth;

pub use augment::{augment, augmentation_pool, draw_pool_index, random_ops, AugmentOp, AugmentSample};
pub use folds::{split_folds, FoldAssignment};
pub use manifest::{load_manifest, DatasetManifest, LesionAnnotation, LesionClass, ManifestEntry, WeakLabel};
pub use mask::compute_foreground_mask;
pub use regions::{extract_regions, GridGeometry, GridStatus, Region, RegionGrid};
pub use synth::{synth_generate, ClassMix, SynthDataset, SynthParams};
