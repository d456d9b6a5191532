//! Dataset ingestion: CSRF feature files, JSON manifests and the synthetic generator.

pub mod format;
pub mod manifest;
pub mod synthetic;

pub use format::{load_feature_map, write_feature_map};
pub use manifest::{load_manifest, ConceptBox, DatasetManifest, LoadedDataset, Sample, Split};
pub use synthetic::{
    generate_synthetic, synthesize, write_synthetic, DistractorConfig, ShortcutConfig, SyntheticConfig,
};
