//! Procedural sequential-manipulation dataset.
//!
//! Faces are drawn from layered shapes, then edited by up to five exactly
//! invertible region operations in a random order. Because the edits are
//! lossless, replaying a stored sequence reproduces the manipulated image
//! bit for bit, and undoing it in reverse order restores the original.

pub mod dataset;
pub mod face;
mod image;
pub mod ops;

pub use dataset::{
    config_hash, default_vocab, generate, generate_sample, split_for, write_dataset, Dataset, GenerateConfig,
    Manifest, ManifestHeader, Sample, SampleRecord, Split, DEFAULT_LENGTH_DIST, MANIFEST_FILE,
};
pub use face::{render_face, FaceAnchor};
pub use image::{changed_fraction, identity_distance, quality_filter, quality_score, Image};
pub use ops::{
    canonical_params, recover, region, replay, sample_params, Axis, Color, OpParams, RecoveryOrder, Rect, COMMUTING_PAIR,
    LABELS, NON_COMMUTING_PAIR,
};
