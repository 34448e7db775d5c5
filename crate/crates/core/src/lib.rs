//! Multi-scale MultiBox region proposals on a desk-scale toy network: priors,
//! the matching loss, a from-scratch convolutional proposer and post-classifier,
//! synthetic scenes, multi-crop inference, ensembling and evaluation.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod loss;
pub mod matching;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{iou, nms, BBox, ScoredBox};
pub use loss::{LossBundle, LossConfig};
pub use matching::{best_matching, Matching};
pub use priors::{build_grid_priors, PriorSet};
