//! Amortized visual attribution over cached attention.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of the
//! pipeline:
//!
//! - [`trace`]: the attention-trace data model and its invariants.
//! - [`unitization`]: partitions of vision tokens into regions (Ward
//!   agglomerative clustering, K-means, and geometric baselines).
//! - [`features`]: span/region attention pooling and mask combination.
//! - [`estimator`]: the Pearson-trained linear estimator and the baselines.
//! - [`oracle`]: a toy attention model with brute-force ablation effects.
//! - [`segment`] and [`refine`]: span segmentation and patch refinement used by
//!   the streaming pipeline.
//! - [`metrics`]: LDS, Top-K drop, R² and fidelity curves.
//! - [`trajectory`]: reasoning-trajectory geometry (PCA, tortuosity, AUC).
//!
//! File formats, the threaded streaming pipeline and the CLI live in the
//! `vstream` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod estimator;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod refine;
pub mod segment;
pub mod stats;
pub mod trace;
pub mod trajectory;
pub mod unitization;

pub use error::{Error, Result};
pub use estimator::{EstimatorWeights, TrainConfig, TrainingSample, TrainingSet};
pub use features::{MaskSample, SpanAccumulator, SpanFeatureMatrix};
pub use trace::{AttentionTrace, Span};
pub use unitization::{PartitionMethod, RegionPartition};
