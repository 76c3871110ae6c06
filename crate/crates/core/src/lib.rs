//! Detection selection by analysis-by-synthesis.
//!
//! Given an image and noisy candidate detections, pick the ordered subset
//! whose occlusion-ordered generative reconstruction best explains the
//! image, penalized by the number of objects.

pub mod adam;
pub mod decoder;
pub mod detection;
pub mod detsim;
pub mod dsa;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod mask;
pub mod nms;
pub mod recon;
pub mod scenegen;
pub mod seed;

pub use detection::{ClassLabel, Detection};
pub use error::{Error, Result};
pub use geom::{diou, iou, BoundingBox};
pub use image::{crop, Image, Rgb};
pub use mask::{support_mask, Mask, PixelSet, SupportMask};
pub use decoder::{DecoderModel, ModelBank};
pub use dsa::{greedy_select, DsaConfig, Interpretation, InterpretationLoss};
pub use nms::NmsConfig;
pub use recon::{ReconConfig, SingleRecon};
pub use scenegen::Scene;
