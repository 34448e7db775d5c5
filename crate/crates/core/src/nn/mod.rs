//! From-scratch differentiable networks: the multi-scale proposer, the
//! post-classifier with context combiner, checkpoints and training loops.

pub mod checkpoint;
pub mod classifier;
pub mod layers;
pub mod params;
pub mod proposer;
pub mod tensor;
pub mod train;

pub use classifier::{ContextNet, FeatureNetConfig, PostClassifierNet};
pub use layers::{Conv2d, HybridReduce};
pub use params::{Optimizer, OptimizerKind, ParamStore};
pub use proposer::{ProposerConfig, ProposerNet, SlotPredictions};
pub use tensor::Tensor3;
