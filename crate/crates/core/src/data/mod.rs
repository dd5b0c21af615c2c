//! Sequence ingestion, preprocessing, synthesis, and dataset bookkeeping.

pub mod manifest;
pub mod ntu;
pub mod sequence;
pub mod synth;

pub use manifest::{retained_count, stratified_subsample, Dataset, DatasetManifest, ManifestEntry, Sample, Split};
pub use ntu::{parse_ntu_skeleton, parse_ntu_skeleton_str};
pub use sequence::{
    bone_stream, pad_repeat, parse_sequence_file, preprocess, preprocess_with_visibility,
    write_sequence, PreprocessConfig, SkeletonSequence,
};
pub use synth::{generate_synthetic, ClassMotion, SyntheticData, SyntheticSpec};
