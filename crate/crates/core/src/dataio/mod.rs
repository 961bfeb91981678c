//! Synthetic weakly-labelled scenes, on-disk formats, vocabulary and the
//! audited accessor for ground truth that training must never read.

mod hidden;
mod io;
mod registry;
mod scene;
mod vocab;

pub use hidden::{AuditEntry, AuditLog, HiddenField, HiddenStore, PhaseGuard};
pub use io::{
    decode_ppm, encode_ppm, load_corpus, load_image, load_labels, read_dataset, write_dataset, Dataset,
    DatasetManifest, ManifestEntry,
};
pub use registry::{CategoryId, CategoryRegistry};
pub use scene::{
    default_palette, derive_relations, describe, generate_corpus, generate_scene, generate_scene_with_id,
    generate_split, GeneratorConfig, GtInstance, HiddenGroundTruth, ImageLevelLabels, ObjectStyle, RelationRule,
    SceneImage, SceneRecord, ShapeKind, Triplet,
};
pub use vocab::{build_vocabulary, tokenize, TokenId, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};
