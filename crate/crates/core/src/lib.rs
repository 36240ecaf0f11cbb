//! Training-free full-reference image quality assessment.
//!
//! Reference and distorted images are mapped through a pretrained backbone
//! into multi-stage feature stacks. Feature channels are screened with seeded
//! feature-space interventions: a channel is kept when the reference/distorted
//! distance it carries responds to the intervention at every tested intensity.
//! The kept channels form a [`ConfounderDictionary`], and pairs are scored with
//! a dictionary-weighted per-channel optimal transport cost.
//!
//! The crate also carries the benchmark side: manifest ingestion, MOS
//! normalization, a synthetic distortion corpus and PLCC/SRCC evaluation with
//! a 4-parameter logistic mapping.

pub mod backbone;
pub mod cache;
pub mod confounder;
pub mod datasets;
pub mod error;
pub mod golden;
pub mod intervention;
pub mod maps;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod transport;
pub mod zoo;

pub use backbone::{BackboneHandle, BackboneSpec, FeatureStack, ImageTensor};
pub use confounder::{ConfounderDictionary, ScreeningConfig};
pub use datasets::{DatasetManifest, PairRecord};
pub use error::{Error, Result};
pub use intervention::{InterventionKind, InterventionOutcome, InterventionSpec};
pub use metrics::MetricsReport;
pub use scoring::{AblationMode, QualityScore, ScoringConfig};
pub use transport::{ChannelMetric, DistanceConfig, TransportResult};
