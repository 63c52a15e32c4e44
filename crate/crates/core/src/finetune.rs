//! Medication recommendation from visit history.
//!
//! For target visit `t >= 2` the head sees
//! `[mean_{τ<t} v_d ‖ mean_{τ<t} v_m ‖ v_d^t]`; medications of visit `t` are
//! never encoder inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::model::GBert;
use crate::numerics::{adam_step_filtered, AdamState, Graph, NumericsError, ParamId, ParamStore, Real, Tensor, Var};
use crate::ontology::{CodeType, PatientRecord};
use crate::pretrain::{bce_terms, indicator};
use crate::visit_encoder::VisitInput;
use crate::Error;

/// `W1` is stored as `(|C_m|, 3H)`; bias as `(1, |C_m|)`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionHead {
    pub w1: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl PredictionHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, hidden: usize, rx_vocab: usize, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        let bound = 1.0 / ((3 * hidden) as f64).sqrt();
        let w1 = store.insert_uniform("predict.w1", &[rx_vocab, 3 * hidden], bound, rng)?;
        let bias = store.insert_filled("predict.bias", &[1, rx_vocab], 0.0)?;
        Ok(Self { w1, bias, hidden })
    }

    /// Logits for feature rows `(R, 3H)`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.w1);
        let wt = g.transpose(w)?;
        let b = g.param(store, self.bias);
        let z = g.matmul(features, wt)?;
        g.add(z, b)
    }
}

/// Identifies one prediction: patient position in the batch and 1-based visit index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Target {
    pub patient: usize,
    pub t: usize,
}

/// Graph nodes for every target visit of a batch of patients.
pub struct RecommendationGraph {
    pub logits: Var,
    pub targets: Vec<Target>,
}

/// Features and logits for visits `t >= 2` of every record (only the last
/// visit when `only_last`), using a single encoder call.
fn build<T: Real>(
    model: &GBert<T>,
    g: &mut Graph<T>,
    records: &[&PatientRecord],
    only_last: bool,
) -> Result<RecommendationGraph, NumericsError> {
    let mut inputs = Vec::new();
    let mut dx_rows = Vec::with_capacity(records.len());
    let mut rx_rows = Vec::with_capacity(records.len());
    for r in records {
        let n = r.visits.len();
        dx_rows.push(inputs.len());
        for v in &r.visits {
            inputs.push(VisitInput::from_codes(CodeType::Diagnosis, &v.dx, None));
        }
        rx_rows.push(inputs.len());
        for v in &r.visits[..n.saturating_sub(1)] {
            inputs.push(VisitInput::from_codes(CodeType::Medication, &v.rx, None));
        }
    }
    let mut targets = Vec::new();
    for (p, r) in records.iter().enumerate() {
        let first = if only_last { r.visits.len().max(2) } else { 2 };
        for t in first..=r.visits.len() {
            targets.push(Target { patient: p, t });
        }
    }
    if targets.is_empty() {
        return Err(NumericsError::Shape { op: "recommend", detail: "no visit with history".into() });
    }
    let tables = model.code_tables(g)?;
    let enc = model.encoder.encode(g, &model.store, tables, &inputs)?;
    let n = inputs.len();
    // Row-averaging operators: each target row only weights its own
    // patient's history, so later visits contribute exact zeros.
    let rows = targets.len();
    let mut hist_dx = vec![T::zero(); rows * n];
    let mut hist_rx = vec![T::zero(); rows * n];
    let mut current = vec![T::zero(); rows * n];
    for (i, tg) in targets.iter().enumerate() {
        let w = T::of(1.0 / (tg.t - 1) as f64);
        for k in 0..tg.t - 1 {
            hist_dx[i * n + dx_rows[tg.patient] + k] = w;
            hist_rx[i * n + rx_rows[tg.patient] + k] = w;
        }
        current[i * n + dx_rows[tg.patient] + tg.t - 1] = T::one();
    }
    let mut blocks = Vec::with_capacity(3);
    for op in [hist_dx, hist_rx, current] {
        let op = g.constant(Tensor::matrix(rows, n, op));
        blocks.push(g.matmul(op, enc.visits)?);
    }
    let features = g.concat_cols(&blocks)?;
    let logits = model.predictor.logits(g, &model.store, features)?;
    Ok(RecommendationGraph { logits, targets })
}

/// Logits for every visit `t >= 2` of each record.
pub fn recommendation_logits<T: Real>(
    model: &GBert<T>,
    g: &mut Graph<T>,
    records: &[&PatientRecord],
) -> Result<RecommendationGraph, NumericsError> {
    build(model, g, records, false)
}

/// Mean over patients of the per-patient fine-tuning loss, which averages
/// the medication BCE over visits `2..=T`.
pub fn finetune_loss<T: Real>(model: &GBert<T>, g: &mut Graph<T>, records: &[&PatientRecord]) -> Result<Var, NumericsError> {
    let usable: Vec<&PatientRecord> = records.iter().copied().filter(|r| r.visits.len() >= 2).collect();
    if usable.is_empty() {
        return Err(NumericsError::Shape { op: "finetune_loss", detail: "no record with at least two visits".into() });
    }
    let rg = recommendation_logits(model, g, &usable)?;
    let sets: Vec<&[usize]> = rg.targets.iter().map(|tg| usable[tg.patient].visits[tg.t - 1].rx.as_slice()).collect();
    let terms = bce_terms(g, rg.logits, &indicator(&sets, model.rx_vocab))?;
    let p = usable.len() as f64;
    let weights: Vec<T> = rg
        .targets
        .iter()
        .map(|tg| T::of(1.0 / ((usable[tg.patient].visits.len() - 1) as f64 * p)))
        .collect();
    let w = g.constant(Tensor::matrix(1, weights.len(), weights));
    let per_label = g.matmul(w, terms)?;
    Ok(g.sum(per_label))
}

/// Probabilities for one visit; `t` is 1-based and only visits `1..=t` are read.
pub fn predict_visit<T: Real>(model: &GBert<T>, record: &PatientRecord, t: usize) -> Result<Vec<f64>, Error> {
    if t < 2 {
        return Err(Error::Validation(format!("patient {}: visit {t} has no history", record.pid)));
    }
    if t > record.visits.len() {
        return Err(Error::Validation(format!("patient {}: visit {t} does not exist", record.pid)));
    }
    if record.visits[t - 1].dx.is_empty() {
        return Err(Error::Validation(format!("patient {}: visit {t} has no diagnosis codes", record.pid)));
    }
    let truncated = PatientRecord { pid: record.pid.clone(), visits: record.visits[..t].to_vec() };
    let mut g = Graph::new();
    let rg = build(model, &mut g, &[&truncated], true)?;
    let p = g.sigmoid(rg.logits);
    Ok(g.value(p).data().iter().map(|x| x.to_f64()).collect())
}

/// One prediction with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VisitPrediction {
    pub pid: String,
    pub t: usize,
    pub probs: Vec<f64>,
    pub truth: Vec<usize>,
}

/// Predicts every visit `t >= 2` of every record, `batch` records per graph.
pub fn predict_records<T: Real>(model: &GBert<T>, records: &[PatientRecord], batch: usize) -> Result<Vec<VisitPrediction>, Error> {
    let usable: Vec<&PatientRecord> = records.iter().filter(|r| r.visits.len() >= 2).collect();
    let mut out = Vec::new();
    for chunk in usable.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let rg = recommendation_logits(model, &mut g, chunk)?;
        let p = g.sigmoid(rg.logits);
        let probs = g.value(p);
        for (i, tg) in rg.targets.iter().enumerate() {
            let rec = chunk[tg.patient];
            out.push(VisitPrediction {
                pid: rec.pid.clone(),
                t: tg.t,
                probs: probs.row_slice(i).iter().map(|x| x.to_f64()).collect(),
                truth: rec.visits[tg.t - 1].rx.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub batch_size: usize,
    /// Train only the recommendation head.
    pub freeze_encoder: bool,
}

/// One epoch of mini-batch Adam on the fine-tuning loss; returns the
/// patient-weighted mean loss. Records with fewer than two visits are skipped.
pub fn finetune_epoch<T: Real>(
    model: &mut GBert<T>,
    records: &[PatientRecord],
    opt: &mut AdamState<T>,
    options: &FinetuneOptions,
    rng: &mut impl Rng,
) -> Result<f64, Error> {
    let mut order: Vec<usize> = (0..records.len()).filter(|&i| records[i].visits.len() >= 2).collect();
    if order.is_empty() {
        return Err(Error::Validation("no multi-visit records to fine-tune on".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    order.shuffle(rng);
    let head = model.predictor_params();
    let mut total = 0.0;
    for chunk in order.chunks(options.batch_size) {
        let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| &records[i]).collect();
        model.store.zero_grads();
        let mut g = Graph::new();
        let loss = finetune_loss(model, &mut g, &batch)?;
        total += g.backward(loss, &mut model.store)?.to_f64() * chunk.len() as f64;
        drop(g);
        // Pre-training heads receive no gradient here and are skipped as untouched.
        let freeze = options.freeze_encoder;
        adam_step_filtered(&mut model.store, opt, |id| !freeze || head.contains(&id))?;
    }
    Ok(total / order.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ontology::{OntologyTree, Visit};

    fn model() -> GBert<f64> {
        let dx = OntologyTree::parse(CodeType::Diagnosis, "#root D\nd1\tD\nd2\tD\nd11\td1\nd12\td1\n").unwrap();
        let rx = OntologyTree::parse(CodeType::Medication, "#root M\nm1\tM\nm2\tM\nm3\tM\n").unwrap();
        let cfg = ModelConfig { embed_dim: 3, gat_heads: 2, hidden: 4, ffn: 4, layers: 1, enc_heads: 2, mlp_hidden: 4, ..Default::default() };
        GBert::new(cfg, &dx, &rx, 3).unwrap()
    }

    fn record(n: usize) -> PatientRecord {
        let visits = (0..n).map(|i| Visit::new(vec![i % 3, 2], vec![i % 3])).collect();
        PatientRecord { pid: "p".into(), visits }
    }

    fn zero_head(m: &mut GBert<f64>) {
        for id in m.predictor_params() {
            m.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut m = model();
        zero_head(&mut m);
        let p = predict_visit(&m, &record(3), 3).unwrap();
        assert_eq!(p, vec![0.5; 3]);
    }

    #[test]
    fn uniform_prediction_loss_is_vocab_ln2() {
        let mut m = model();
        zero_head(&mut m);
        let mut g = Graph::new();
        let r = record(3);
        let l = finetune_loss(&m, &mut g, &[&r]).unwrap();
        assert!((g.value(l).item() - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn first_visit_and_missing_dx_rejected() {
        let m = model();
        assert!(predict_visit(&m, &record(3), 1).is_err());
        let mut r = record(3);
        r.visits[1].dx.clear();
        assert!(predict_visit(&m, &r, 2).is_err());
        assert!(predict_visit(&m, &r, 3).is_ok());
    }

    #[test]
    fn future_visits_do_not_leak() {
        let m = model();
        let a = record(4);
        let mut b = a.clone();
        b.visits[3] = Visit::new(vec![0, 1], vec![1, 2]);
        assert_eq!(predict_visit(&m, &a, 3).unwrap(), predict_visit(&m, &b, 3).unwrap());
        let pa = predict_records(&m, &[a], 8).unwrap();
        let pb = predict_records(&m, &[b], 8).unwrap();
        assert_eq!(pa[1].probs, pb[1].probs);
        assert_ne!(pa[2].probs, pb[2].probs);
    }

    #[test]
    fn batched_matches_single_visit() {
        let m = model();
        let recs = vec![record(3), record(2)];
        let all = predict_records(&m, &recs, 8).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].probs, predict_visit(&m, &recs[0], 2).unwrap());
        assert_eq!(all[2].probs, predict_visit(&m, &recs[1], 2).unwrap());
    }

    #[test]
    fn single_visit_records_skipped() {
        let m = model();
        let mut g = Graph::new();
        let (one, two) = (record(1), record(2));
        assert!(finetune_loss(&m, &mut g, &[&one]).is_err());
        assert!(finetune_loss(&m, &mut g, &[&one, &two]).is_ok());
    }
}
