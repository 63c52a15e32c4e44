//! Masked self-prediction and dual-prediction pre-training on single visits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::GBert;
use crate::numerics::{adam_step, AdamState, Graph, NumericsError, ParamId, ParamStore, Real, Tensor, Var};
use crate::ontology::{CodeType, Visit};
use crate::visit_encoder::{linear, linear_params, VisitInput};
use crate::Error;

/// One-hidden-layer MLP: `in -> hidden (GELU) -> out`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let (w1, b1) = linear_params(store, &format!("{name}.fc1"), input, hidden, rng)?;
        let (w2, b2) = linear_params(store, &format!("{name}.fc2"), hidden, output, rng)?;
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NumericsError> {
        let h = linear(g, store, x, self.w1, self.b1)?;
        let h = g.gelu(h);
        linear(g, store, h, self.w2, self.b2)
    }
}

/// `self_dx`/`self_rx` recover a visit's own codes; `rx_to_dx` and
/// `dx_to_rx` predict the other code type.
#[derive(Clone, Copy, Debug)]
pub struct PretrainHeads {
    pub self_dx: Mlp,
    pub self_rx: Mlp,
    pub rx_to_dx: Mlp,
    pub dx_to_rx: Mlp,
}

impl PretrainHeads {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        hidden: usize,
        mlp_hidden: usize,
        dx_vocab: usize,
        rx_vocab: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            self_dx: Mlp::new(store, "pretrain.self_dx", hidden, mlp_hidden, dx_vocab, rng)?,
            self_rx: Mlp::new(store, "pretrain.self_rx", hidden, mlp_hidden, rx_vocab, rng)?,
            rx_to_dx: Mlp::new(store, "pretrain.rx_to_dx", hidden, mlp_hidden, dx_vocab, rng)?,
            dx_to_rx: Mlp::new(store, "pretrain.dx_to_rx", hidden, mlp_hidden, rx_vocab, rng)?,
        })
    }
}

/// Multi-hot rows, one per code set.
pub fn indicator<T: Real>(sets: &[&[usize]], vocab: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); sets.len() * vocab];
    for (r, set) in sets.iter().enumerate() {
        for &c in set.iter() {
            data[r * vocab + c] = T::one();
        }
    }
    Tensor::matrix(sets.len(), vocab, data)
}

/// Elementwise binary cross-entropy between `sigmoid(logits)` and 0/1
/// `targets`: `-(y log p + (1 - y) log(1 - p))`, same shape as `logits`.
pub fn bce_terms<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var, NumericsError> {
    let (r, c) = g.shape(logits);
    if targets.shape() != [r, c] {
        return Err(NumericsError::Shape { op: "bce", detail: format!("targets {:?} vs logits ({r}x{c})", targets.shape()) });
    }
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|t| T::one() - t));
    let log_p = g.log_sigmoid(logits);
    let neg = g.scale(logits, -1.0);
    let log_not_p = g.log_sigmoid(neg);
    let a = g.mul(log_p, y)?;
    let b = g.mul(log_not_p, not_y)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Summed multi-label BCE of `logits` against code sets over the full
/// vocabulary; one set per row.
pub fn multilabel_bce<T: Real>(g: &mut Graph<T>, logits: Var, sets: &[&[usize]]) -> Result<Var, NumericsError> {
    let vocab = g.shape(logits).1;
    if vocab == 0 {
        return Err(NumericsError::Shape { op: "bce", detail: "empty vocabulary".into() });
    }
    let terms = bce_terms(g, logits, &indicator(sets, vocab))?;
    Ok(g.sum(terms))
}

/// Self-prediction loss: BCE of `head(v)` against each row's own code set.
pub fn self_prediction_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    v: Var,
    targets: &[&[usize]],
    head: &Mlp,
) -> Result<Var, NumericsError> {
    let logits = head.forward(g, store, v)?;
    multilabel_bce(g, logits, targets)
}

/// Dual-prediction loss: diagnoses from `v_rx` plus medications from `v_dx`.
pub fn dual_prediction_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    v_dx: Var,
    v_rx: Var,
    heads: &PretrainHeads,
    dx_targets: &[&[usize]],
    rx_targets: &[&[usize]],
) -> Result<Var, NumericsError> {
    let a = self_prediction_loss(g, store, v_rx, dx_targets, &heads.rx_to_dx)?;
    let b = self_prediction_loss(g, store, v_dx, rx_targets, &heads.dx_to_rx)?;
    g.add(a, b)
}

/// A visit with per-code mask flags; targets stay the original sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedVisit {
    pub visit: Visit,
    pub dx_mask: Vec<bool>,
    pub rx_mask: Vec<bool>,
}

impl MaskedVisit {
    pub fn unmasked(visit: Visit) -> Self {
        let dx_mask = vec![false; visit.dx.len()];
        let rx_mask = vec![false; visit.rx.len()];
        Self { visit, dx_mask, rx_mask }
    }

    pub fn input(&self, kind: CodeType) -> VisitInput {
        let mask = match kind {
            CodeType::Diagnosis => &self.dx_mask,
            CodeType::Medication => &self.rx_mask,
        };
        VisitInput::from_codes(kind, self.visit.codes(kind), Some(mask))
    }

    pub fn masked_count(&self) -> usize {
        self.dx_mask.iter().chain(&self.rx_mask).filter(|&&m| m).count()
    }
}

/// Replaces each code independently by MASK with probability `rate`.
pub fn mask_codes(visit: &Visit, rate: f64, rng: &mut impl Rng) -> MaskedVisit {
    debug_assert!((0.0..1.0).contains(&rate));
    let mut flags = |n: usize| (0..n).map(|_| rng.gen::<f64>() < rate).collect::<Vec<_>>();
    let dx_mask = flags(visit.dx.len());
    let rx_mask = flags(visit.rx.len());
    MaskedVisit { visit: visit.clone(), dx_mask, rx_mask }
}

/// The three pre-training terms for one mini-batch, each averaged per visit.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLoss {
    pub se_dx: Var,
    pub se_rx: Var,
    pub du: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LossTerms {
    pub self_dx: bool,
    pub self_rx: bool,
    pub dual: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms { self_dx: true, self_rx: true, dual: true };
}

/// Builds the combined pre-training objective for a batch of masked visits.
pub fn pretrain_loss<T: Real>(model: &GBert<T>, g: &mut Graph<T>, batch: &[MaskedVisit]) -> Result<PretrainLoss, NumericsError> {
    pretrain_loss_terms(model, g, batch, LossTerms::ALL)
}

/// Like [`pretrain_loss`] but `total` only includes the selected terms.
pub fn pretrain_loss_terms<T: Real>(
    model: &GBert<T>,
    g: &mut Graph<T>,
    batch: &[MaskedVisit],
    terms: LossTerms,
) -> Result<PretrainLoss, NumericsError> {
    let n = batch.len();
    if n == 0 {
        return Err(NumericsError::Shape { op: "pretrain", detail: "empty batch".into() });
    }
    let store = &model.store;
    let tables = model.code_tables(g)?;
    let mut inputs: Vec<VisitInput> = batch.iter().map(|m| m.input(CodeType::Diagnosis)).collect();
    inputs.extend(batch.iter().map(|m| m.input(CodeType::Medication)));
    let enc = model.encoder.encode(g, store, tables, &inputs)?;
    let v_dx = g.slice_rows(enc.visits, 0, n)?;
    let v_rx = g.slice_rows(enc.visits, n, 2 * n)?;
    let dx_t: Vec<&[usize]> = batch.iter().map(|m| m.visit.dx.as_slice()).collect();
    let rx_t: Vec<&[usize]> = batch.iter().map(|m| m.visit.rx.as_slice()).collect();
    let inv = 1.0 / n as f64;
    let se_dx = self_prediction_loss(g, store, v_dx, &dx_t, &model.heads.self_dx)?;
    let se_dx = g.scale(se_dx, inv);
    let se_rx = self_prediction_loss(g, store, v_rx, &rx_t, &model.heads.self_rx)?;
    let se_rx = g.scale(se_rx, inv);
    let du = dual_prediction_loss(g, store, v_dx, v_rx, &model.heads, &dx_t, &rx_t)?;
    let du = g.scale(du, inv);
    let picked: Vec<Var> = [(terms.self_dx, se_dx), (terms.self_rx, se_rx), (terms.dual, du)]
        .into_iter()
        .filter_map(|(on, v)| on.then_some(v))
        .collect();
    let total = match picked.as_slice() {
        [] => g.scale(se_dx, 0.0),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &v in rest {
                acc = g.add(acc, v)?;
            }
            acc
        }
    };
    Ok(PretrainLoss { se_dx, se_rx, du, total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpochLog {
    pub epoch: usize,
    pub se_dx: f64,
    pub se_rx: f64,
    pub du: f64,
    pub total: f64,
}

impl PretrainEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,L_se_d,L_se_m,L_du,L_pr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.se_dx, self.se_rx, self.du, self.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub batch_size: usize,
    pub mask_rate: f64,
}

/// One pass of mini-batch Adam over the pre-training visits. Returns the
/// per-visit mean of every loss term over the epoch.
pub fn pretrain_epoch<T: Real>(
    model: &mut GBert<T>,
    corpus: &[Visit],
    opt: &mut AdamState<T>,
    options: &PretrainOptions,
    rng: &mut impl Rng,
) -> Result<PretrainEpochLog, Error> {
    if corpus.is_empty() {
        return Err(Error::Validation("empty pre-training corpus".into()));
    }
    if !(0.0..1.0).contains(&options.mask_rate) || options.batch_size == 0 {
        return Err(Error::Config("mask rate must be in [0, 1) and batch size positive".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut log = PretrainEpochLog::default();
    for chunk in order.chunks(options.batch_size) {
        let batch: Vec<MaskedVisit> = chunk.iter().map(|&i| mask_codes(&corpus[i], options.mask_rate, rng)).collect();
        model.store.zero_grads();
        let mut g = Graph::new();
        let loss = pretrain_loss(model, &mut g, &batch)?;
        g.backward(loss.total, &mut model.store)?;
        let w = chunk.len() as f64;
        log.se_dx += g.value(loss.se_dx).item().to_f64() * w;
        log.se_rx += g.value(loss.se_rx).item().to_f64() * w;
        log.du += g.value(loss.du).item().to_f64() * w;
        log.total += g.value(loss.total).item().to_f64() * w;
        drop(g);
        adam_step(&mut model.store, opt)?;
    }
    let n = corpus.len() as f64;
    log.se_dx /= n;
    log.se_rx /= n;
    log.du /= n;
    log.total /= n;
    Ok(log)
}
