//! Position-free Transformer encoder that turns one visit's code embeddings
//! into a visit vector (the final state of a leading CLS token).
//!
//! Visits in a batch are stacked into one token matrix so projections run as
//! single matmuls; self-attention is computed per visit, so no padding or
//! attention masks exist and tokens never attend across visits.

use rand::Rng;

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Real, Var};
use crate::ontology::CodeType;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub ln_eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Dense layer weights `(in, out)` and bias `(1, out)`.
pub(crate) fn linear_params<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    input: usize,
    output: usize,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId), NumericsError> {
    let bound = 1.0 / (input as f64).sqrt();
    let w = store.insert_uniform(format!("{name}.w"), &[input, output], bound, rng)?;
    let b = store.insert_filled(format!("{name}.b"), &[1, output], 0.0)?;
    Ok((w, b))
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var, NumericsError> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

impl LayerParams {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        let h = cfg.hidden;
        let (wq, bq) = linear_params(store, &format!("{prefix}.query"), h, h, rng)?;
        let (wk, bk) = linear_params(store, &format!("{prefix}.key"), h, h, rng)?;
        let (wv, bv) = linear_params(store, &format!("{prefix}.value"), h, h, rng)?;
        let (wo, bo) = linear_params(store, &format!("{prefix}.attn_out"), h, h, rng)?;
        let ln1_gain = store.insert_filled(format!("{prefix}.ln1.gain"), &[1, h], 1.0)?;
        let ln1_bias = store.insert_filled(format!("{prefix}.ln1.bias"), &[1, h], 0.0)?;
        let (w1, b1) = linear_params(store, &format!("{prefix}.ffn1"), h, cfg.ffn, rng)?;
        let (w2, b2) = linear_params(store, &format!("{prefix}.ffn2"), cfg.ffn, h, rng)?;
        let ln2_gain = store.insert_filled(format!("{prefix}.ln2.gain"), &[1, h], 1.0)?;
        let ln2_bias = store.insert_filled(format!("{prefix}.ln2.bias"), &[1, h], 0.0)?;
        Ok(Self { wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Cls,
    Mask,
    /// Leaf position in the vocabulary of the visit's code type.
    Code(usize),
}

/// Token list for one visit of one code type; always starts with CLS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitInput {
    pub kind: CodeType,
    tokens: Vec<Token>,
}

impl VisitInput {
    pub fn new(kind: CodeType, tokens: Vec<Token>) -> Result<Self, NumericsError> {
        if tokens.first() != Some(&Token::Cls) {
            return Err(NumericsError::Shape { op: "encode_visit", detail: "visit input must start with CLS".into() });
        }
        Ok(Self { kind, tokens })
    }

    /// Canonical input for a code set: codes sorted ascending, with
    /// `masked[i]` replacing the i-th sorted code by MASK.
    pub fn from_codes(kind: CodeType, codes: &[usize], masked: Option<&[bool]>) -> Self {
        let mut sorted = codes.to_vec();
        sorted.sort_unstable();
        let mut tokens = Vec::with_capacity(sorted.len() + 1);
        tokens.push(Token::Cls);
        for (i, &c) in sorted.iter().enumerate() {
            let m = masked.is_some_and(|m| m[i]);
            tokens.push(if m { Token::Mask } else { Token::Code(c) });
        }
        Self { kind, tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Leaf-embedding tables for both code types, `(|C_d|, H)` and `(|C_m|, H)`.
#[derive(Clone, Copy, Debug)]
pub struct CodeTables {
    pub dx: Var,
    pub rx: Var,
}

/// Output of [`VisitEncoder::encode`].
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// Final states of every token, stacked visit after visit.
    pub states: Var,
    /// `(start, len)` of each visit within `states`.
    pub segments: Vec<(usize, usize)>,
    /// CLS final states, one row per visit.
    pub visits: Var,
    /// Attention probabilities `[layer][visit][head]`, each `(len, len)`.
    pub attention: Vec<Vec<Vec<Var>>>,
}

#[derive(Clone, Debug)]
pub struct VisitEncoder {
    pub config: EncoderConfig,
    pub cls: ParamId,
    pub mask: ParamId,
    pub layers: Vec<LayerParams>,
}

impl VisitEncoder {
    pub fn new<T: Real>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        if config.heads == 0 || !config.hidden.is_multiple_of(config.heads) {
            return Err(NumericsError::Shape {
                op: "encoder",
                detail: format!("hidden {} not divisible by {} heads", config.hidden, config.heads),
            });
        }
        let bound = 1.0 / (config.hidden as f64).sqrt();
        let cls = store.insert_uniform("encoder.cls", &[1, config.hidden], bound, rng)?;
        let mask = store.insert_uniform("encoder.mask", &[1, config.hidden], bound, rng)?;
        let layers = (0..config.layers)
            .map(|l| LayerParams::new(store, &format!("encoder.layer{l}"), &config, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { config, cls, mask, layers })
    }

    /// Encodes a batch of visits (either code type) with shared weights.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tables: CodeTables,
        inputs: &[VisitInput],
    ) -> Result<EncodedBatch, NumericsError> {
        let h = self.config.hidden;
        for (name, t) in [("dx", tables.dx), ("rx", tables.rx)] {
            if g.shape(t).1 != h {
                return Err(NumericsError::Shape {
                    op: "encode_visit",
                    detail: format!("{name} table width {} vs hidden {h}", g.shape(t).1),
                });
            }
        }
        if inputs.is_empty() {
            return Err(NumericsError::Shape { op: "encode_visit", detail: "empty batch".into() });
        }
        let n_dx = g.shape(tables.dx).0;
        let n_rx = g.shape(tables.rx).0;
        let cls = g.param(store, self.cls);
        let mask = g.param(store, self.mask);
        let table = g.concat_rows(&[tables.dx, tables.rx, cls, mask])?;
        let (cls_row, mask_row) = (n_dx + n_rx, n_dx + n_rx + 1);

        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for input in inputs {
            if input.is_empty() {
                return Err(NumericsError::Shape { op: "encode_visit", detail: "empty token list".into() });
            }
            segments.push((rows.len(), input.len()));
            for t in &input.tokens {
                rows.push(match (*t, input.kind) {
                    (Token::Cls, _) => cls_row,
                    (Token::Mask, _) => mask_row,
                    (Token::Code(c), CodeType::Diagnosis) if c < n_dx => c,
                    (Token::Code(c), CodeType::Medication) if c < n_rx => n_dx + c,
                    (Token::Code(c), kind) => {
                        return Err(NumericsError::Shape { op: "encode_visit", detail: format!("{kind} code {c} out of range") })
                    }
                });
            }
        }
        let mut x = g.gather_rows(table, rows)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, attn) = self.self_attention_layer(g, store, x, &segments, layer)?;
            x = y;
            attention.push(attn);
        }
        let cls_idx: Vec<usize> = segments.iter().map(|s| s.0).collect();
        let visits = g.gather_rows(x, cls_idx)?;
        Ok(EncodedBatch { states: x, segments, visits, attention })
    }

    /// One post-norm block: `LN(x + MHA(x))` then `LN(x + FFN(x))`.
    /// Attention is restricted to each `(start, len)` segment.
    pub fn self_attention_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        segments: &[(usize, usize)],
        layer: &LayerParams,
    ) -> Result<(Var, Vec<Vec<Var>>), NumericsError> {
        let EncoderConfig { hidden, heads, ln_eps, .. } = self.config;
        if g.shape(x).1 != hidden {
            return Err(NumericsError::Shape {
                op: "self_attention",
                detail: format!("state width {} vs hidden {hidden}", g.shape(x).1),
            });
        }
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = linear(g, store, x, layer.wq, layer.bq)?;
        let k = linear(g, store, x, layer.wk, layer.bk)?;
        let v = linear(g, store, x, layer.wv, layer.bv)?;
        let mut per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (a, b) = (hd * dh, (hd + 1) * dh);
            per_head.push((g.slice_cols(q, a, b)?, g.slice_cols(k, a, b)?, g.slice_cols(v, a, b)?));
        }
        let mut contexts = Vec::with_capacity(segments.len());
        let mut maps = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let end = start + len;
            let mut head_ctx = Vec::with_capacity(heads);
            let mut head_maps = Vec::with_capacity(heads);
            for &(qh, kh, vh) in &per_head {
                let qs = g.slice_rows(qh, start, end)?;
                let ks = g.slice_rows(kh, start, end)?;
                let vs = g.slice_rows(vh, start, end)?;
                let kt = g.transpose(ks)?;
                let scores = g.matmul(qs, kt)?;
                let scores = g.scale(scores, scale);
                let probs = g.softmax_rows(scores)?;
                head_ctx.push(g.matmul(probs, vs)?);
                head_maps.push(probs);
            }
            contexts.push(g.concat_cols(&head_ctx)?);
            maps.push(head_maps);
        }
        let ctx = g.concat_rows(&contexts)?;
        let attn_out = linear(g, store, ctx, layer.wo, layer.bo)?;
        let res1 = g.add(x, attn_out)?;
        let (g1, b1) = (g.param(store, layer.ln1_gain), g.param(store, layer.ln1_bias));
        let x1 = g.layer_norm(res1, g1, b1, ln_eps)?;
        let hidden_act = linear(g, store, x1, layer.w1, layer.b1)?;
        let hidden_act = g.gelu(hidden_act);
        let ffn = linear(g, store, hidden_act, layer.w2, layer.b2)?;
        let res2 = g.add(x1, ffn)?;
        let (g2, b2) = (g.param(store, layer.ln2_gain), g.param(store, layer.ln2_bias));
        Ok((g.layer_norm(res2, g2, b2, ln_eps)?, maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize, heads: usize) -> (ParamStore<f64>, VisitEncoder) {
        let cfg = EncoderConfig { hidden: 8, heads, ffn: 6, layers, ln_eps: 1e-12 };
        let mut store = ParamStore::new();
        let enc = VisitEncoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (store, enc)
    }

    fn tables(g: &mut Graph<f64>) -> CodeTables {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dx: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rx: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        CodeTables { dx: g.constant(Tensor::from_f64(5, 8, &dx)), rx: g.constant(Tensor::from_f64(3, 8, &rx)) }
    }

    #[test]
    fn cls_only_visit_depends_only_on_params() {
        let (store, enc) = setup(2, 2);
        let run = |seed_rows: bool| {
            let mut g = Graph::new();
            let t = if seed_rows {
                tables(&mut g)
            } else {
                CodeTables { dx: g.constant(Tensor::zeros(&[5, 8])), rx: g.constant(Tensor::zeros(&[3, 8])) }
            };
            let input = VisitInput::from_codes(CodeType::Diagnosis, &[], None);
            let out = enc.encode(&mut g, &store, t, &[input]).unwrap();
            g.value(out.visits).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn code_order_does_not_matter() {
        let (store, enc) = setup(2, 4);
        let mut g = Graph::new();
        let t = tables(&mut g);
        let a = VisitInput::new(CodeType::Diagnosis, vec![Token::Cls, Token::Code(0), Token::Code(3), Token::Code(4)]).unwrap();
        let b = VisitInput::new(CodeType::Diagnosis, vec![Token::Cls, Token::Code(4), Token::Code(0), Token::Code(3)]).unwrap();
        let out = enc.encode(&mut g, &store, t, &[a, b]).unwrap();
        let v = g.value(out.visits);
        let diff = v.row_slice(0).iter().zip(v.row_slice(1)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
        // Non-CLS rows are permuted the same way.
        let s = g.value(out.states);
        let row = |i: usize| s.row_slice(i).to_vec();
        for (x, y) in [(1, 6), (2, 7), (3, 5)] {
            let d = row(x).iter().zip(row(y)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, enc) = setup(2, 2);
        let mut g = Graph::new();
        let t = tables(&mut g);
        let inputs = [
            VisitInput::from_codes(CodeType::Diagnosis, &[1, 2], Some(&[false, true])),
            VisitInput::from_codes(CodeType::Medication, &[0, 1, 2], None),
        ];
        let out = enc.encode(&mut g, &store, t, &inputs).unwrap();
        for layer in &out.attention {
            for visit in layer {
                for &p in visit {
                    let m = g.value(p);
                    for r in 0..m.rows() {
                        let s: f64 = m.row_slice(r).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        let (store, enc) = setup(1, 2);
        assert!(VisitInput::new(CodeType::Diagnosis, vec![Token::Code(0)]).is_err());
        assert!(VisitInput::new(CodeType::Diagnosis, vec![]).is_err());
        let mut g = Graph::new();
        let t = tables(&mut g);
        let bad = VisitInput::from_codes(CodeType::Medication, &[7], None);
        assert!(enc.encode(&mut g, &store, t, &[bad]).is_err());
        assert!(enc.encode(&mut g, &store, t, &[]).is_err());
    }

    #[test]
    fn masked_token_uses_mask_row() {
        let (store, enc) = setup(1, 2);
        let mut g = Graph::new();
        let t = tables(&mut g);
        let a = VisitInput::from_codes(CodeType::Diagnosis, &[2, 4], Some(&[true, false]));
        assert_eq!(a.tokens(), &[Token::Cls, Token::Mask, Token::Code(4)]);
        let b = VisitInput::new(CodeType::Medication, vec![Token::Cls, Token::Mask, Token::Code(1)]).unwrap();
        let c = VisitInput::new(CodeType::Diagnosis, vec![Token::Cls, Token::Mask, Token::Code(4)]).unwrap();
        let out = enc.encode(&mut g, &store, t, &[a, b, c]).unwrap();
        let v = g.value(out.visits);
        assert_eq!(v.row_slice(0), v.row_slice(2));
    }
}
