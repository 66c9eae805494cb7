//! Synthetic mass-margin dataset.

mod dataset;
mod synth;

pub use dataset::{
    config_hash, sample_rng, DataConfig, Dataset, DatasetManifest, SampleRecord, Split,
    SplitManifest, MANIFEST_FILE, SPLITS,
};
pub use synth::{
    annotation_mask, generate_lesion, sample_negative_patches, GeneratorConfig, LesionParams,
    Sample, SampleMeta, Spike, Wave,
};
