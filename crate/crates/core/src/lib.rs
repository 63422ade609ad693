//! Last-layer group-robust recalibration of frozen vision-language
//! embeddings.
//!
//! A linear projection head maps frozen image features into the text
//! embedding space, where fixed class anchors act as a cosine classifier.
//! After ordinary cross-entropy training, the samples the head gets wrong
//! become anchors for a contrastive recalibration pass that pulls each one
//! toward its class centroid and away from other classes, regularized by a
//! cosine-similarity term over the whole training split.
//!
//! Group labels are read only by [`metrics`]; the trainers see a
//! [`dataset::TrainingView`] that has no group column.

pub mod calibration;
pub mod config;
pub mod dataset;
pub mod error;
pub mod head;
pub mod kv;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use calibration::{CalibrationSet, NegativeMode, PositiveMode, SamplerConfig};
pub use dataset::{ClassAnchors, EmbeddingDataset, Precision};
pub use error::{Error, ErrorKind, Result};
pub use head::{ClassifierConfig, ProjectionHead};
pub use losses::{CsReduction, LossConfig};
pub use metrics::GroupMetrics;
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use training::{train_cfr, train_erm, TrainConfig, TrainRecord};
