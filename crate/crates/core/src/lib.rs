//! Part-model unsupervised video person re-identification over precomputed
//! backbone feature maps.
//!
//! Pipeline: feature maps are split into `k` horizontal stripes and pooled
//! ([`features`]); a local-aware or global-aware module turns them into part
//! features ([`aware`]); each part is trained without labels against
//! per-tracklet anchors ([`association`], [`trainer`]); at test time the two
//! networks' features are fused and scored with CMC and mAP ([`eval`]).

pub mod association;
pub mod aware;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
