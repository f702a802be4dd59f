//! Run configuration: one JSON document covering the synthetic graph, the
//! training template and the experiment selections. Every field is optional;
//! unknown keys are rejected.

use std::path::Path;

use anyhow::Context;
use magsim_core::experiments::{ModelKind, TrainConfig, DEFAULT_SCALES};
use magsim_core::graph::SyntheticSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Noise scales for `sweep-noise`.
    pub scales: Vec<f64>,
    /// Model kinds trained by `sweep-noise`.
    pub sweep_kinds: Vec<ModelKind>,
    /// Model kinds trained by `corrupt`.
    pub probe_kinds: Vec<ModelKind>,
    /// Seeds `seed, seed + 1, ...` for sweeps and probes.
    pub num_seeds: u64,
    /// Modality replaced by noise in `corrupt`.
    pub dominant: String,
    /// Auxiliary weight of the `aux-<lambda>` gradient-tracking variant.
    pub lambda_aux: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            sweep_kinds: vec![ModelKind::EfMlp, ModelKind::GcnJoint, ModelKind::SupraBase],
            probe_kinds: vec![ModelKind::SupraBase, ModelKind::SupraAux],
            num_seeds: 3,
            dominant: "text".into(),
            lambda_aux: 0.7,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Applies a `--seed` override to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synthetic.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.experiment.num_seeds).map(|i| self.train.seed + i).collect()
    }
}
