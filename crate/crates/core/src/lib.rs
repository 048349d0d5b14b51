//! Data-side building blocks for annotation-free nuclei segmentation.
//!
//! Everything here is a pure function of its inputs and an explicit seed:
//! ellipse mask synthesis with elastic deformation, Perlin pseudo-microscopy
//! rendering, the gradient-flow encoding of instance masks and its decoder,
//! instance-matching metrics, augmentation, dataset ingestion and image IO.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod flows;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod normalize;
pub mod perlin;
pub mod rng;
pub mod synthmask;

pub use error::{Error, Result};
pub use flows::{decode_flows, encode_flows, DecodeConfig, FlowTarget};
pub use mask::{InstanceMask, IntensityImage};
pub use metrics::{jaccard, jaccard_sweep, match_instances, panoptic_quality, MatchReport};
pub use perlin::{fractal_perlin, perlin2d, render_perlin_image, PerlinConfig};
pub use synthmask::{elastic_deform, sample_ellipse_mask, DeformConfig, EllipseConfig};
