//! Networks, losses and the training loop for cycle-consistent,
//! annotation-free nuclei segmentation.
//!
//! A generator `G` renders microscopy images from flow fields of synthetic
//! masks; a segmenter `S` predicts flow fields and a probability logit from
//! images. Both are trained jointly with cycle, adversarial, Perlin and
//! mask-to-image losses; only `S` is needed at inference.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod infer;
pub mod layers;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod pool;
pub mod select;

pub use config::{lr_at, Terms, TrainConfig};
pub use engine::{load_segmenter, Networks, Trainer};
pub use error::{Error, Result};
pub use infer::{InferConfig, Predictor, TileConfig};
pub use losses::{LossRecord, LossWeights};
pub use select::{select_model, InstanceSegmenter};
