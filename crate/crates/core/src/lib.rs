//! Label-free LiDAR semantic segmentation by adapting from labelled 2D
//! range-like images: pre-segmentation, range projection, an instance-graph
//! segmentation network with adversarial scene and instance alignment,
//! weak-label fine-tuning and mIoU evaluation.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod preseg;
pub mod projection;
pub mod synth;
pub mod training;
