//! Persistence: volumes, cohort manifests, score files and network checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod mvol;
pub mod scores;

pub use checkpoint::{
    config_digest, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, NamedTensor, NetworkKind,
};
pub use manifest::{read_manifest, write_manifest, CohortManifest, ScanRecord, SessionPair, MANIFEST_HEADER};
pub use mvol::{read_mvol, write_mvol, Modality, Volume};
pub use scores::{parse_scores, read_scores, scores_to_csv, write_scores, ScoreRow};
