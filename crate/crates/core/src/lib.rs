//! sidkit-core: building blocks for subject-driven text-to-image personalization
//! experiments.
//!
//! The crate covers the whole loop around a personalization backend:
//!
//! * [`corpus`] ingests reference sets, generated sets and run manifests.
//! * [`describe`] builds train descriptions (baseline and VLM-generated
//!   selectively informative descriptions) and validates them.
//! * [`segment`] wraps subject segmenters and implements mask algebra.
//! * [`embed`] wraps joint image/text encoders and owns normalization.
//! * [`metrics`] computes subject-alignment, non-subject-disentanglement and
//!   text-alignment with pairwise provenance.
//! * [`attnmap`] records, averages and renders identifier cross-attention maps.
//! * [`tune`] drives fine-tuning/sampling backends through an adapter contract.
//! * [`plot`] renders static scatter plots for method comparisons.

pub mod attnmap;
pub mod corpus;
pub mod describe;
pub mod embed;
pub mod metrics;
pub mod plot;
pub mod segment;
pub mod tune;

mod hashing;

pub use corpus::{GeneratedSet, ReferenceSet, RunManifest, SubjectEntry};
pub use describe::{DescriptionCase, TrainDescription};
pub use embed::{EmbeddingVector, Modality};
pub use metrics::MetricReport;
pub use segment::SubjectMask;

/// Placeholder identifier used in manifests and descriptions. Backends map it
/// to their own rare token at tune time.
pub const IDENTIFIER_PLACEHOLDER: &str = "[v]";

/// Counts non-overlapping occurrences of `token` in `text`.
pub fn count_occurrences(text: &str, token: &str) -> usize {
    if token.is_empty() {
        return 0;
    }
    text.matches(token).count()
}
