//! The full model: code embedders for both trees, the shared visit encoder,
//! pre-training heads and the recommendation head, over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::finetune::PredictionHead;
use crate::numerics::{Checkpoint, Graph, NumericsError, ParamId, ParamStore, Real, Var};
use crate::ontoembed::{CodeEmbedder, GatConfig, OntologyEmbedder, PlainEmbedding};
use crate::ontology::{CodeType, OntologyTree};
use crate::pretrain::PretrainHeads;
use crate::visit_encoder::{CodeTables, EncoderConfig, VisitEncoder};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the initial ontology embedding table.
    pub embed_dim: usize,
    pub gat_heads: usize,
    /// Transformer width; also the concatenated GAT output width.
    pub hidden: usize,
    pub ffn: usize,
    pub layers: usize,
    pub enc_heads: usize,
    /// Hidden width of the pre-training MLP heads.
    pub mlp_hidden: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    /// `false` replaces ontology embeddings with a plain leaf table.
    pub use_graph: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 75,
            gat_heads: 4,
            hidden: 300,
            ffn: 300,
            layers: 2,
            enc_heads: 4,
            mlp_hidden: 300,
            leaky_slope: 0.2,
            ln_eps: 1e-12,
            use_graph: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gat_heads == 0 || !self.hidden.is_multiple_of(self.gat_heads) {
            return bad(format!("hidden {} must be a multiple of gat_heads {}", self.hidden, self.gat_heads));
        }
        if self.enc_heads == 0 || !self.hidden.is_multiple_of(self.enc_heads) {
            return bad(format!("hidden {} must be a multiple of enc_heads {}", self.hidden, self.enc_heads));
        }
        if self.embed_dim == 0 || self.ffn == 0 || self.mlp_hidden == 0 || self.layers == 0 {
            return bad("dimensions and layer count must be positive".into());
        }
        Ok(())
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { hidden: self.hidden, heads: self.enc_heads, ffn: self.ffn, layers: self.layers, ln_eps: self.ln_eps }
    }

    fn gat(&self) -> GatConfig {
        GatConfig { embed_dim: self.embed_dim, heads: self.gat_heads, head_dim: self.hidden / self.gat_heads, slope: self.leaky_slope }
    }
}

/// Stored beside the parameters in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub precision: String,
    pub dx_fingerprint: String,
    pub rx_fingerprint: String,
    pub dx_vocab: usize,
    pub rx_vocab: usize,
    /// Free-form training state (cycle counters etc.).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct GBert<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub dx_embed: CodeEmbedder,
    pub rx_embed: CodeEmbedder,
    pub encoder: VisitEncoder,
    pub heads: PretrainHeads,
    pub predictor: PredictionHead,
    pub dx_vocab: usize,
    pub rx_vocab: usize,
    dx_fingerprint: String,
    rx_fingerprint: String,
}

impl<T: Real> GBert<T> {
    pub fn new(config: ModelConfig, dx: &OntologyTree, rx: &OntologyTree, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        if dx.code_type() != CodeType::Diagnosis || rx.code_type() != CodeType::Medication {
            return Err(Error::Config("expected a diagnosis tree and a medication tree".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = |tree: &OntologyTree, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| -> Result<CodeEmbedder, NumericsError> {
            let prefix = tree.code_type().short();
            Ok(if config.use_graph {
                CodeEmbedder::Ontology(OntologyEmbedder::new(tree, prefix, config.gat(), store, rng)?)
            } else {
                CodeEmbedder::Plain(PlainEmbedding::new(tree.leaf_count(), config.hidden, prefix, store, rng)?)
            })
        };
        let dx_embed = embedder(dx, &mut store, &mut rng)?;
        let rx_embed = embedder(rx, &mut store, &mut rng)?;
        let encoder = VisitEncoder::new(config.encoder(), &mut store, &mut rng)?;
        let heads = PretrainHeads::new(&mut store, config.hidden, config.mlp_hidden, dx.leaf_count(), rx.leaf_count(), &mut rng)?;
        let predictor = PredictionHead::new(&mut store, config.hidden, rx.leaf_count(), &mut rng)?;
        Ok(Self {
            config,
            store,
            dx_embed,
            rx_embed,
            encoder,
            heads,
            predictor,
            dx_vocab: dx.leaf_count(),
            rx_vocab: rx.leaf_count(),
            dx_fingerprint: dx.fingerprint(),
            rx_fingerprint: rx.fingerprint(),
        })
    }

    /// Leaf input rows for both code types.
    pub fn code_tables(&self, g: &mut Graph<T>) -> Result<CodeTables, NumericsError> {
        Ok(CodeTables { dx: self.dx_embed.embed(g, &self.store)?, rx: self.rx_embed.embed(g, &self.store)? })
    }

    pub fn vocab(&self, kind: CodeType) -> usize {
        match kind {
            CodeType::Diagnosis => self.dx_vocab,
            CodeType::Medication => self.rx_vocab,
        }
    }

    pub fn embedder(&self, kind: CodeType) -> &CodeEmbedder {
        match kind {
            CodeType::Diagnosis => &self.dx_embed,
            CodeType::Medication => &self.rx_embed,
        }
    }

    /// Parameters of the recommendation head.
    pub fn predictor_params(&self) -> [ParamId; 2] {
        [self.predictor.w1, self.predictor.bias]
    }

    pub fn meta(&self, extra: serde_json::Value) -> ModelMeta {
        ModelMeta {
            model: self.config,
            precision: T::NAME.to_string(),
            dx_fingerprint: self.dx_fingerprint.clone(),
            rx_fingerprint: self.rx_fingerprint.clone(),
            dx_vocab: self.dx_vocab,
            rx_vocab: self.rx_vocab,
            extra,
        }
    }

    /// Evaluated leaf embeddings for one code type, row per vocabulary entry.
    pub fn leaf_embeddings(&self, kind: CodeType) -> Result<Vec<Vec<f64>>, NumericsError> {
        let mut g = Graph::new();
        let v: Var = self.embedder(kind).embed(&mut g, &self.store)?;
        let t = g.value(v);
        Ok((0..t.rows()).map(|r| t.row_slice(r).iter().map(|x| x.to_f64()).collect()).collect())
    }

    /// Checks that a checkpoint's metadata matches these trees and config.
    pub fn check_meta(meta: &ModelMeta, dx: &OntologyTree, rx: &OntologyTree) -> Result<(), Error> {
        if meta.dx_vocab != dx.leaf_count() || meta.rx_vocab != rx.leaf_count() {
            return Err(Error::Validation(format!(
                "vocabulary mismatch: checkpoint has {}/{} leaves, corpus has {}/{}",
                meta.dx_vocab,
                meta.rx_vocab,
                dx.leaf_count(),
                rx.leaf_count()
            )));
        }
        if meta.dx_fingerprint != dx.fingerprint() || meta.rx_fingerprint != rx.fingerprint() {
            return Err(Error::Validation("vocabulary mismatch: ontology fingerprints differ from checkpoint".into()));
        }
        Ok(())
    }

    /// Rebuilds a model from a checkpoint and the trees it was trained on.
    pub fn from_checkpoint(ck: &Checkpoint<T>, dx: &OntologyTree, rx: &OntologyTree) -> Result<(Self, ModelMeta), Error> {
        let meta: ModelMeta =
            serde_json::from_str(&ck.metadata).map_err(|e| Error::Validation(format!("checkpoint metadata: {e}")))?;
        Self::check_meta(&meta, dx, rx)?;
        let mut model = Self::new(meta.model, dx, rx, 0)?;
        model.store.copy_values_from(&ck.params)?;
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::CodeType;

    fn trees() -> (OntologyTree, OntologyTree) {
        let dx = OntologyTree::parse(CodeType::Diagnosis, "#root D\nd1\tD\nd2\tD\nd11\td1\nd12\td1\n").unwrap();
        let rx = OntologyTree::parse(CodeType::Medication, "#root M\nm1\tM\nm2\tM\n").unwrap();
        (dx, rx)
    }

    fn tiny() -> ModelConfig {
        ModelConfig { embed_dim: 3, gat_heads: 2, hidden: 4, ffn: 4, layers: 1, enc_heads: 2, mlp_hidden: 4, ..Default::default() }
    }

    #[test]
    fn defaults_match_published_setup() {
        let c = ModelConfig::default();
        assert_eq!((c.embed_dim, c.gat_heads, c.hidden, c.ffn, c.layers, c.enc_heads), (75, 4, 300, 300, 2, 4));
        assert_eq!(c.hidden / c.gat_heads, 75);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (dx, rx) = trees();
        let a = GBert::<f64>::new(tiny(), &dx, &rx, 7).unwrap();
        let b = GBert::<f64>::new(tiny(), &dx, &rx, 7).unwrap();
        assert_eq!(a.store, b.store);
        let c = GBert::<f64>::new(tiny(), &dx, &rx, 8).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn no_graph_variant_has_plain_tables() {
        let (dx, rx) = trees();
        let m = GBert::<f64>::new(ModelConfig { use_graph: false, ..tiny() }, &dx, &rx, 1).unwrap();
        assert!(m.store.get("dx.table").is_some());
        assert!(m.store.get("dx.we").is_none());
        let e = m.leaf_embeddings(CodeType::Diagnosis).unwrap();
        assert_eq!((e.len(), e[0].len()), (3, 4));
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        let (dx, rx) = trees();
        let cfg = ModelConfig { hidden: 5, ..tiny() };
        assert!(GBert::<f64>::new(cfg, &dx, &rx, 1).is_err());
    }
}
