//! Run configuration persisted as TOML beside every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::finetune::FinetuneOptions;
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::pretrain::PretrainOptions;
use crate::schedule::ScheduleConfig;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mask_rate: f64,
    pub threshold: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub cycles: usize,
    pub batch_size: usize,
    /// Fine-tune only the recommendation head.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            mask_rate: 0.15,
            threshold: 0.3,
            pretrain_epochs: 5,
            finetune_epochs: 5,
            cycles: 15,
            batch_size: 64,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Plain leaf-embedding table instead of ontology embeddings.
    pub no_graph: bool,
    /// Skip pre-training epochs.
    pub no_pretrain: bool,
}

impl Ablation {
    pub fn variant(&self) -> &'static str {
        match (self.no_graph, self.no_pretrain) {
            (false, false) => "G-BERT",
            (true, false) => "G-BERT_G-",
            (false, true) => "G-BERT_P-",
            (true, true) => "G-BERT_G-P-",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Reconciles `ablation.no_graph` with `model.use_graph` (either one
    /// disables the graph) and validates ranges.
    pub fn resolved(mut self) -> Result<Self, Error> {
        let no_graph = self.ablation.no_graph || !self.model.use_graph;
        self.ablation.no_graph = no_graph;
        self.model.use_graph = !no_graph;
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(0.0..1.0).contains(&t.mask_rate) {
            return Err(Error::Config("mask_rate must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            return Err(Error::Config("threshold must be in [0, 1]".into()));
        }
        if t.batch_size == 0 || t.cycles == 0 {
            return Err(Error::Config("batch_size and cycles must be positive".into()));
        }
        Ok(self)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        let t = &self.train;
        ScheduleConfig {
            pretrain_epochs: t.pretrain_epochs,
            finetune_epochs: t.finetune_epochs,
            cycles: t.cycles,
            no_pretrain: self.ablation.no_pretrain,
            pretrain: PretrainOptions { batch_size: t.batch_size, mask_rate: t.mask_rate },
            finetune: FinetuneOptions { batch_size: t.batch_size, freeze_encoder: t.freeze_encoder },
            threshold: t.threshold,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that affects training outcomes (paths excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
