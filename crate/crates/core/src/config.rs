//! Run configuration: every knob of the pipeline in one JSON document. Unknown keys
//! are rejected; every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::CropConfig;
use crate::nn::classifier::{ContextConfig, PostClassifierConfig};
use crate::nn::train::{ClassifierTrainConfig, TrainConfig};
use crate::nn::ProposerConfig;
use crate::priors::{build_grid_priors, GridSpec, PriorSet};
use crate::rng::derive_seed;
use crate::synth::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub grids: Vec<usize>,
    /// Templates per grid, taken from the default template list.
    pub templates: usize,
    pub include_global: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { grids: vec![8, 6, 4, 3, 2], templates: 11, include_global: true }
    }
}

impl PriorConfig {
    pub fn build(&self) -> Result<PriorSet> {
        let specs = self.grids.iter().map(|&m| GridSpec::with_template_count(m, self.templates)).collect::<Result<Vec<_>>>()?;
        build_grid_priors(&specs, self.include_global)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub cutoffs: Vec<f64>,
    pub budgets: Vec<usize>,
    /// Proposals kept per image by `propose` (0 keeps all).
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: crate::evaluation::DEFAULT_THRESHOLDS.to_vec(),
            cutoffs: crate::evaluation::default_cutoffs(),
            budgets: vec![1, 2, 5, 10, 15, 20, 50, 100, 200],
            top_k: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub priors: PriorConfig,
    pub proposer: ProposerConfig,
    pub train: TrainConfig,
    pub classifier: PostClassifierConfig,
    pub context: ContextConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub crops: CropConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Sets the master seed and derives every component seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.proposer.seed = derive_seed(seed, "proposer-init", 0);
        self.train.seed = derive_seed(seed, "proposer-train", 0);
        self.classifier.seed = derive_seed(seed, "classifier-init", 0);
        self.context.seed = derive_seed(seed, "context-init", 0);
        self.classifier_train.seed = derive_seed(seed, "classifier-train", 0);
    }
}
