//! Browser bindings for a small, fully in-memory G-BERT run.
//!
//! [`Session`] holds the logic and is plain Rust so it can be tested
//! natively; [`Demo`] is the JavaScript face and trades in JSON strings.

use gbert::data::{generate_corpus, split_corpus, CorpusSplit, GeneratorConfig, DEFAULT_RATIOS};
use gbert::eval::MetricsReport;
use gbert::finetune::{predict_records, VisitPrediction};
use gbert::model::{GBert, ModelConfig};
use gbert::numerics::{AdamConfig, Graph};
use gbert::ontoembed::CodeEmbedder;
use gbert::ontology::{CodeType, OntologyTree, Visit};
use gbert::schedule::{alternating_schedule, CycleRecord, ScheduleConfig, Trainer, TrainingData};
use gbert::visit_encoder::VisitInput;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub fn demo_corpus(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        single_visit_patients: 150,
        multi_visit_patients: 80,
        dx_leaves: 24,
        rx_leaves: 12,
        depth: 3,
        clusters: 4,
        dx_pool: 6,
        rx_pool: 4,
        dx_per_visit: 4.0,
        rx_per_visit: 3.0,
        ..Default::default()
    }
}

pub fn demo_model() -> ModelConfig {
    ModelConfig { embed_dim: 4, gat_heads: 2, hidden: 16, ffn: 16, layers: 2, enc_heads: 2, mlp_hidden: 16, ..Default::default() }
}

#[derive(Clone, Debug, Serialize)]
pub struct Vocabulary {
    pub dx: Vec<String>,
    pub rx: Vec<String>,
}

/// Second-stage attention of one leaf over itself and its ancestors.
#[derive(Clone, Debug, Serialize)]
pub struct LeafAttention {
    pub leaf: String,
    pub neighbors: Vec<String>,
    /// `[head][neighbor]`
    pub heads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionView {
    /// `[CLS]` followed by the visit's codes in input order.
    pub tokens: Vec<String>,
    /// `[layer][head][query][key]`
    pub encoder: Vec<Vec<Vec<Vec<f64>>>>,
    pub ontology: Vec<LeafAttention>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub jaccard: f64,
    pub f1: f64,
}

pub struct Session {
    dx: OntologyTree,
    rx: OntologyTree,
    split: CorpusSplit,
    pool: Vec<Visit>,
    trainer: Trainer<f64>,
    schedule: ScheduleConfig,
    /// Test-split predictions of the best model, refreshed after training.
    preds: Vec<VisitPrediction>,
}

impl Session {
    pub fn new(seed: u64) -> Result<Self, String> {
        let corpus = generate_corpus(&demo_corpus(seed)).map_err(|e| e.to_string())?;
        let split = split_corpus(&corpus.records, DEFAULT_RATIOS, seed).map_err(|e| e.to_string())?;
        let model = GBert::new(demo_model(), &corpus.dx_tree, &corpus.rx_tree, seed).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(model, AdamConfig { lr: 2e-3, ..Default::default() });
        let mut schedule = ScheduleConfig { pretrain_epochs: 1, finetune_epochs: 2, cycles: 0, seed, ..Default::default() };
        schedule.pretrain.batch_size = 32;
        schedule.finetune.batch_size = 16;
        let pool = split.pretrain_pool();
        let mut s = Self { dx: corpus.dx_tree, rx: corpus.rx_tree, split, pool, trainer, schedule, preds: Vec::new() };
        s.refresh()?;
        Ok(s)
    }

    fn refresh(&mut self) -> Result<(), String> {
        self.preds = predict_records(&self.trainer.best_model(), &self.split.test, 64).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let labels = |t: &OntologyTree| (0..t.leaf_count()).map(|i| t.leaf_label(i).to_string()).collect();
        Vocabulary { dx: labels(&self.dx), rx: labels(&self.rx) }
    }

    pub fn cycles_done(&self) -> usize {
        self.trainer.state.cycles_done
    }

    /// One pre-training epoch and two fine-tuning epochs, then validation.
    pub fn train_cycle(&mut self) -> Result<CycleRecord, String> {
        self.schedule.cycles = self.trainer.state.cycles_done + 1;
        let data = TrainingData { pretrain: &self.pool, train: &self.split.train, val: &self.split.val };
        alternating_schedule(&mut self.trainer, &data, &self.schedule, |_, _| Ok(())).map_err(|e| e.to_string())?;
        self.refresh()?;
        Ok(self.trainer.state.history.last().cloned().expect("a cycle just ran"))
    }

    /// Attention of the current model on a diagnosis visit given by labels.
    pub fn attention(&self, labels: &[&str]) -> Result<AttentionView, String> {
        if labels.is_empty() {
            return Err("pick at least one diagnosis code".into());
        }
        let mut codes = Vec::with_capacity(labels.len());
        for l in labels {
            let c = self.dx.leaf_by_label(l.trim()).ok_or_else(|| format!("unknown diagnosis code {l:?}"))?;
            if !codes.contains(&c) {
                codes.push(c);
            }
        }
        codes.sort_unstable();
        let model = &self.trainer.model;
        let mut g = Graph::new();
        let tables = model.code_tables(&mut g).map_err(|e| e.to_string())?;
        let input = VisitInput::from_codes(CodeType::Diagnosis, &codes, None);
        let enc = model.encoder.encode(&mut g, &model.store, tables, &[input]).map_err(|e| e.to_string())?;
        let encoder = enc
            .attention
            .iter()
            .map(|layer| {
                layer[0]
                    .iter()
                    .map(|&a| {
                        let t = g.value(a);
                        (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
                    })
                    .collect()
            })
            .collect();
        let mut tokens = vec!["[CLS]".to_string()];
        tokens.extend(codes.iter().map(|&c| self.dx.leaf_label(c).to_string()));

        let ontology = match model.embedder(CodeType::Diagnosis) {
            CodeEmbedder::Ontology(o) => {
                let [_, stage2] = o.attention_weights(&model.store).map_err(|e| e.to_string())?;
                let nb = o.ancestor_neighborhoods();
                codes
                    .iter()
                    .map(|&c| LeafAttention {
                        leaf: self.dx.leaf_label(c).to_string(),
                        neighbors: nb.list(c).iter().map(|&n| self.dx.label(n).to_string()).collect(),
                        heads: stage2.iter().map(|h| h[c].clone()).collect(),
                    })
                    .collect()
            }
            CodeEmbedder::Plain(_) => Vec::new(),
        };
        Ok(AttentionView { tokens, encoder, ontology })
    }

    pub fn metrics(&self, threshold: f64) -> Result<MetricsReport, String> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(format!("threshold {threshold} outside [0, 1]"));
        }
        Ok(MetricsReport::from_predictions(&self.preds, threshold, String::new(), self.schedule.seed))
    }

    /// Jaccard and F1 at `steps + 1` evenly spaced thresholds in `[0, 1]`.
    pub fn sweep(&self, steps: usize) -> Vec<ThresholdPoint> {
        let steps = steps.max(1);
        (0..=steps)
            .map(|i| {
                let threshold = i as f64 / steps as f64;
                let r = MetricsReport::from_predictions(&self.preds, threshold, String::new(), self.schedule.seed);
                ThresholdPoint { threshold, jaccard: r.jaccard, f1: r.f1 }
            })
            .collect()
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("view serializes")
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Session::new(seed.into()).map(Demo).map_err(|e| JsError::new(&e))
    }

    /// `{dx: [...], rx: [...]}` leaf labels.
    pub fn vocabulary(&self) -> String {
        json(&self.0.vocabulary())
    }

    #[wasm_bindgen(js_name = cyclesDone)]
    pub fn cycles_done(&self) -> usize {
        self.0.cycles_done()
    }

    /// Runs one training cycle and returns its record as JSON.
    #[wasm_bindgen(js_name = trainCycle)]
    pub fn train_cycle(&mut self) -> Result<String, JsError> {
        self.0.train_cycle().map(|r| json(&r)).map_err(|e| JsError::new(&e))
    }

    /// `codes` is a comma-separated list of diagnosis labels.
    pub fn attention(&self, codes: &str) -> Result<String, JsError> {
        let labels: Vec<&str> = codes.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        self.0.attention(&labels).map(|v| json(&v)).map_err(|e| JsError::new(&e))
    }

    pub fn metrics(&self, threshold: f64) -> Result<String, JsError> {
        self.0.metrics(threshold).map(|r| json(&r)).map_err(|e| JsError::new(&e))
    }

    pub fn sweep(&self, steps: usize) -> String {
        json(&self.0.sweep(steps))
    }
}
