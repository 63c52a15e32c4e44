//! Alternating pre-train / fine-tune cycles with best-on-validation retention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::MetricsReport;
use crate::finetune::{finetune_epoch, predict_records, FinetuneOptions};
use crate::model::GBert;
use crate::numerics::{AdamConfig, AdamState, Checkpoint, ParamStore, Real};
use crate::ontology::{OntologyTree, PatientRecord, Visit};
use crate::pretrain::{pretrain_epoch, PretrainEpochLog, PretrainOptions};
use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub cycles: usize,
    pub no_pretrain: bool,
    pub pretrain: PretrainOptions,
    pub finetune: FinetuneOptions,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 5,
            finetune_epochs: 5,
            cycles: 15,
            no_pretrain: false,
            pretrain: PretrainOptions { batch_size: 64, mask_rate: 0.15 },
            finetune: FinetuneOptions { batch_size: 64, freeze_encoder: false },
            threshold: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub pretrain: Vec<PretrainEpochLog>,
    pub finetune_loss: Vec<f64>,
    pub val_jaccard: f64,
    pub val_f1: f64,
    pub val_pr_auc: f64,
    /// This cycle improved the best validation Jaccard.
    pub best: bool,
}

/// Everything needed to resume a schedule; stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ScheduleState {
    pub cycles_done: usize,
    pub pretrain_epochs_run: usize,
    pub finetune_epochs_run: usize,
    pub best_cycle: Option<usize>,
    pub best_val_jaccard: Option<f64>,
    pub history: Vec<CycleRecord>,
}

impl ScheduleState {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("state serializes")
    }
}

pub struct Trainer<T: Real> {
    pub model: GBert<T>,
    pub opt: AdamState<T>,
    /// Parameters of the best validation cycle so far.
    pub best: ParamStore<T>,
    pub state: ScheduleState,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: GBert<T>, adam: AdamConfig) -> Self {
        let opt = AdamState::new(&model.store, adam);
        let best = model.store.clone();
        Self { model, opt, best, state: ScheduleState::default() }
    }

    /// Parameters, optimizer and schedule state for resuming.
    pub fn last_checkpoint(&self) -> Checkpoint<T> {
        let meta = self.model.meta(serde_json::json!({ "kind": "last", "schedule": self.state.to_json() }));
        Checkpoint {
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            params: self.model.store.clone(),
            optimizer: Some(self.opt.clone()),
        }
    }

    /// Best-on-validation parameters, without optimizer state.
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        let extra = serde_json::json!({
            "kind": "best",
            "best_cycle": self.state.best_cycle.map(|c| c + 1),
            "best_val_jaccard": self.state.best_val_jaccard,
        });
        Checkpoint {
            metadata: serde_json::to_string(&self.model.meta(extra)).expect("metadata serializes"),
            params: self.best.clone(),
            optimizer: None,
        }
    }

    /// Restores a trainer written by [`Trainer::last_checkpoint`] and
    /// [`Trainer::best_checkpoint`].
    pub fn resume(last: &Checkpoint<T>, best: &Checkpoint<T>, dx: &OntologyTree, rx: &OntologyTree) -> Result<Self, Error> {
        let (model, meta) = GBert::from_checkpoint(last, dx, rx)?;
        let state: ScheduleState = serde_json::from_value(meta.extra["schedule"].clone())
            .map_err(|e| Error::Validation(format!("checkpoint has no schedule state: {e}")))?;
        let opt = last.optimizer.clone().ok_or_else(|| Error::Validation("checkpoint has no optimizer state".into()))?;
        let (best_model, _) = GBert::from_checkpoint(best, dx, rx)?;
        Ok(Self { model, opt, best: best_model.store, state })
    }

    /// The model with the best validation parameters loaded.
    pub fn best_model(&self) -> GBert<T> {
        let mut m = self.model.clone();
        m.store = self.best.clone();
        m
    }
}

/// Seeds every epoch from its global position so interrupted runs resume
/// on the same random stream.
fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + phase);
    rng
}

pub struct TrainingData<'a> {
    pub pretrain: &'a [Visit],
    pub train: &'a [PatientRecord],
    pub val: &'a [PatientRecord],
}

/// Runs the remaining cycles of the schedule. `after_cycle` is called once
/// per finished cycle (e.g. to write a resumable checkpoint).
pub fn alternating_schedule<T: Real>(
    trainer: &mut Trainer<T>,
    data: &TrainingData<'_>,
    config: &ScheduleConfig,
    mut after_cycle: impl FnMut(&Trainer<T>, &CycleRecord) -> Result<(), Error>,
) -> Result<(), Error> {
    if data.val.iter().all(|r| r.visits.len() < 2) {
        return Err(Error::Validation("validation split has no multi-visit patient".into()));
    }
    let skipped = data.train.iter().filter(|r| r.visits.len() < 2).count();
    if skipped > 0 {
        log::warn!("{skipped} training records have a single visit and are skipped for fine-tuning");
    }
    while trainer.state.cycles_done < config.cycles {
        let cycle = trainer.state.cycles_done;
        let mut pretrain = Vec::new();
        if !config.no_pretrain {
            for _ in 0..config.pretrain_epochs {
                let e = trainer.state.pretrain_epochs_run;
                let mut rng = epoch_rng(config.seed, 0, e);
                let mut log = pretrain_epoch(&mut trainer.model, data.pretrain, &mut trainer.opt, &config.pretrain, &mut rng)?;
                log.epoch = e + 1;
                pretrain.push(log);
                trainer.state.pretrain_epochs_run += 1;
            }
        }
        let mut finetune_loss = Vec::new();
        for _ in 0..config.finetune_epochs {
            let e = trainer.state.finetune_epochs_run;
            let mut rng = epoch_rng(config.seed, 1, e);
            finetune_loss.push(finetune_epoch(&mut trainer.model, data.train, &mut trainer.opt, &config.finetune, &mut rng)?);
            trainer.state.finetune_epochs_run += 1;
        }
        let preds = predict_records(&trainer.model, data.val, config.finetune.batch_size)?;
        let report = MetricsReport::from_predictions(&preds, config.threshold, String::new(), config.seed);
        let improved = trainer.state.best_val_jaccard.is_none_or(|b| report.jaccard > b);
        if improved {
            trainer.best = trainer.model.store.clone();
            trainer.state.best_val_jaccard = Some(report.jaccard);
            trainer.state.best_cycle = Some(cycle);
        }
        let record = CycleRecord {
            cycle: cycle + 1,
            pretrain,
            finetune_loss,
            val_jaccard: report.jaccard,
            val_f1: report.f1,
            val_pr_auc: report.pr_auc,
            best: improved,
        };
        trainer.state.history.push(record.clone());
        trainer.state.cycles_done += 1;
        after_cycle(trainer, &record)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ontology::{CodeType, OntologyTree};

    fn setup() -> (GBert<f64>, Vec<PatientRecord>, Vec<Visit>) {
        let dx = OntologyTree::parse(CodeType::Diagnosis, "#root D\nd1\tD\nd2\tD\nd11\td1\nd12\td1\n").unwrap();
        let rx = OntologyTree::parse(CodeType::Medication, "#root M\nm1\tM\nm2\tM\n").unwrap();
        let cfg = ModelConfig { embed_dim: 3, gat_heads: 2, hidden: 4, ffn: 4, layers: 1, enc_heads: 2, mlp_hidden: 4, ..Default::default() };
        let model = GBert::new(cfg, &dx, &rx, 0).unwrap();
        let recs: Vec<PatientRecord> = (0..5)
            .map(|i| PatientRecord {
                pid: format!("p{i}"),
                visits: vec![Visit::new(vec![i % 3], vec![i % 2]), Visit::new(vec![(i + 1) % 3], vec![(i + 1) % 2])],
            })
            .collect();
        let pool = recs.iter().flat_map(|r| r.visits.clone()).collect();
        (model, recs, pool)
    }

    #[test]
    fn one_cycle_emits_one_validation_record() {
        let (model, recs, pool) = setup();
        let mut tr = Trainer::new(model, AdamConfig::default());
        let cfg = ScheduleConfig { pretrain_epochs: 1, finetune_epochs: 1, cycles: 1, ..Default::default() };
        let data = TrainingData { pretrain: &pool, train: &recs, val: &recs };
        let mut calls = 0;
        alternating_schedule(&mut tr, &data, &cfg, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((calls, tr.state.history.len()), (1, 1));
        assert!(tr.state.history[0].best);
    }

    #[test]
    fn no_pretrain_runs_no_pretrain_epochs() {
        let (model, recs, pool) = setup();
        let mut tr = Trainer::new(model, AdamConfig::default());
        let heads_before = tr.model.store.value(tr.model.heads.self_dx.w1).clone();
        let cfg = ScheduleConfig { pretrain_epochs: 2, finetune_epochs: 2, cycles: 2, no_pretrain: true, ..Default::default() };
        let data = TrainingData { pretrain: &pool, train: &recs, val: &recs };
        alternating_schedule(&mut tr, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!((tr.state.pretrain_epochs_run, tr.state.finetune_epochs_run), (0, 4));
        assert_eq!(tr.model.store.value(tr.model.heads.self_dx.w1), &heads_before);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (model, recs, pool) = setup();
        let cfg = ScheduleConfig { pretrain_epochs: 1, finetune_epochs: 1, cycles: 3, ..Default::default() };
        let data = TrainingData { pretrain: &pool, train: &recs, val: &recs };
        let mut full = Trainer::new(model.clone(), AdamConfig::default());
        alternating_schedule(&mut full, &data, &cfg, |_, _| Ok(())).unwrap();

        let mut part = Trainer::new(model, AdamConfig::default());
        alternating_schedule(&mut part, &data, &ScheduleConfig { cycles: 1, ..cfg.clone() }, |_, _| Ok(())).unwrap();
        alternating_schedule(&mut part, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(part.model.store, full.model.store);
        assert_eq!(part.best, full.best);
        assert_eq!(part.state, full.state);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let (model, recs, pool) = setup();
        let cfg = ScheduleConfig { pretrain_epochs: 1, finetune_epochs: 1, cycles: 2, ..Default::default() };
        let data = TrainingData { pretrain: &pool, train: &recs, val: &recs };
        let mut full = Trainer::new(model.clone(), AdamConfig::default());
        alternating_schedule(&mut full, &data, &cfg, |_, _| Ok(())).unwrap();

        let mut part = Trainer::new(model, AdamConfig::default());
        alternating_schedule(&mut part, &data, &ScheduleConfig { cycles: 1, ..cfg.clone() }, |_, _| Ok(())).unwrap();
        let (last, best) = (part.last_checkpoint().to_bytes(), part.best_checkpoint().to_bytes());
        let last = Checkpoint::<f64>::read_from(&mut last.as_slice()).unwrap();
        let best = Checkpoint::<f64>::read_from(&mut best.as_slice()).unwrap();
        let dx = OntologyTree::parse(CodeType::Diagnosis, "#root D\nd1\tD\nd2\tD\nd11\td1\nd12\td1\n").unwrap();
        let rx = OntologyTree::parse(CodeType::Medication, "#root M\nm1\tM\nm2\tM\n").unwrap();
        let mut resumed = Trainer::resume(&last, &best, &dx, &rx).unwrap();
        alternating_schedule(&mut resumed, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.last_checkpoint().to_bytes(), full.last_checkpoint().to_bytes());
        assert_eq!(resumed.best_checkpoint().to_bytes(), full.best_checkpoint().to_bytes());
    }

    proptest::proptest! {
        // Resumed runs compare against the stored best score with `>`, so the
        // metadata round trip must preserve every bit.
        #[test]
        fn state_survives_json_exactly(x in proptest::num::f64::NORMAL, y in 0.0f64..1.0) {
            let log = PretrainEpochLog { epoch: 1, se_dx: x, se_rx: y, du: x * y, total: x + y };
            let state = ScheduleState { best_val_jaccard: Some(y), history: vec![CycleRecord {
                cycle: 1, pretrain: vec![log], finetune_loss: vec![x], val_jaccard: y, val_f1: y, val_pr_auc: y, best: true,
            }], ..Default::default() };
            let back: ScheduleState = serde_json::from_str(&state.to_json().to_string()).unwrap();
            proptest::prop_assert_eq!(back, state);
        }
    }
}
