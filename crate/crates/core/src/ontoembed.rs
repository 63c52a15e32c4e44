//! Two-stage graph-attention embedding of ontology leaves.
//!
//! Stage 1 enhances every node from its direct children using the initial
//! embedding table; stage 2 builds each leaf's embedding from the enhanced
//! rows of the leaf itself and all of its ancestors. Both stages use the same
//! multi-head attention aggregator with separate parameters.

use std::rc::Rc;

use rand::Rng;

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Real, Tensor, Var};
use crate::ontology::OntologyTree;

/// Additive logit used for padded neighbourhood slots.
const PAD_LOGIT: f64 = -1e30;

/// Nonlinearity applied to each head's aggregated vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

/// One attention head: projection `W` of shape `(m, d_in)` and attention
/// vector `a` of shape `(1, 2m)`.
#[derive(Clone, Copy, Debug)]
pub struct GatHead {
    pub w: ParamId,
    pub a: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatStage {
    pub heads: Vec<GatHead>,
    pub in_dim: usize,
    pub head_dim: usize,
}

impl GatStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_heads: usize,
        in_dim: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let wb = (6.0 / (in_dim + head_dim) as f64).sqrt();
        let ab = (6.0 / (2 * head_dim + 1) as f64).sqrt();
        let heads = (0..n_heads)
            .map(|k| {
                Ok(GatHead {
                    w: store.insert_uniform(format!("{prefix}.head{k}.w"), &[head_dim, in_dim], wb, rng)?,
                    a: store.insert_uniform(format!("{prefix}.head{k}.a"), &[1, 2 * head_dim], ab, rng)?,
                })
            })
            .collect::<Result<_, NumericsError>>()?;
        Ok(Self { heads, in_dim, head_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }
}

/// Padded neighbourhood lists for a set of centre nodes. Each list starts
/// with the centre itself.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
    width: usize,
    center_flat: Rc<[usize]>,
    nb_flat: Rc<[usize]>,
    mask: Vec<f64>,
}

impl Neighborhoods {
    /// `lists[i]` must begin with its centre node.
    pub fn new(lists: Vec<Vec<usize>>) -> Self {
        let width = lists.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut center_flat = Vec::with_capacity(lists.len() * width);
        let mut nb_flat = Vec::with_capacity(lists.len() * width);
        let mut mask = Vec::with_capacity(lists.len() * width);
        for list in &lists {
            let c = list[0];
            for slot in 0..width {
                center_flat.push(c);
                match list.get(slot) {
                    Some(&j) => {
                        nb_flat.push(j);
                        mask.push(0.0);
                    }
                    None => {
                        nb_flat.push(c);
                        mask.push(PAD_LOGIT);
                    }
                }
            }
        }
        Self { lists, width, center_flat: center_flat.into(), nb_flat: nb_flat.into(), mask }
    }

    /// `{c} ∪ ch(c)` for every node.
    pub fn children_of_all(tree: &OntologyTree) -> Self {
        let lists = (0..tree.len())
            .map(|c| {
                let mut l = vec![c];
                l.extend_from_slice(tree.ch(c).expect("valid node"));
                l
            })
            .collect();
        Self::new(lists)
    }

    /// `{c} ∪ pa(c)` for every leaf, in vocabulary order.
    pub fn ancestors_of_leaves(tree: &OntologyTree) -> Self {
        let lists = tree
            .leaves()
            .iter()
            .map(|&c| {
                let mut l = vec![c];
                l.extend(tree.pa(c).expect("valid node"));
                l
            })
            .collect();
        Self::new(lists)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn list(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }
}

/// Normalised attention coefficients of one head, shape `(centres, width)`;
/// padded slots carry zero weight. Also returns the projected rows `H W^T`.
pub fn attention_coeffs<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h: Var,
    nb: &Neighborhoods,
    head: &GatHead,
    slope: f64,
) -> Result<(Var, Var), NumericsError> {
    let w = g.param(store, head.w);
    let a = g.param(store, head.a);
    let m = g.shape(w).0;
    let wt = g.transpose(w)?;
    let proj = g.matmul(h, wt)?;
    let a_self = g.slice_cols(a, 0, m)?;
    let a_nb = g.slice_cols(a, m, 2 * m)?;
    let a_self_t = g.transpose(a_self)?;
    let a_nb_t = g.transpose(a_nb)?;
    let s_self = g.matmul(proj, a_self_t)?;
    let s_nb = g.matmul(proj, a_nb_t)?;
    let e_self = g.gather_rows(s_self, nb.center_flat.clone())?;
    let e_nb = g.gather_rows(s_nb, nb.nb_flat.clone())?;
    let e = g.add(e_self, e_nb)?;
    let e = g.leaky_relu(e, slope);
    let e = g.reshape(e, nb.len(), nb.width)?;
    let mask = g.constant(Tensor::matrix(nb.len(), nb.width, nb.mask.iter().map(|&x| T::of(x)).collect()));
    let e = g.add(e, mask)?;
    let alpha = g.softmax_rows(e)?;
    Ok((alpha, proj))
}

/// Multi-head attention aggregation: for each centre, the concatenation over
/// heads of `act(sum_j alpha_j W h_j)`. Output shape `(centres, K*m)`.
pub fn gat_aggregate<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h: Var,
    nb: &Neighborhoods,
    stage: &GatStage,
    slope: f64,
    act: Activation,
) -> Result<Var, NumericsError> {
    let in_dim = g.shape(h).1;
    if in_dim != stage.in_dim {
        return Err(NumericsError::Shape {
            op: "gat_aggregate",
            detail: format!("embedding width {in_dim} vs head input {}", stage.in_dim),
        });
    }
    let (c, width, m) = (nb.len(), nb.width, stage.head_dim);
    // Sums each centre's `width` weighted rows: (c, width*m) x (width*m, m).
    let mut stack = vec![T::zero(); width * m * m];
    for s in 0..width {
        for i in 0..m {
            stack[(s * m + i) * m + i] = T::one();
        }
    }
    let stack = g.constant(Tensor::matrix(width * m, m, stack));
    let mut outs = Vec::with_capacity(stage.heads.len());
    for head in &stage.heads {
        let (alpha, proj) = attention_coeffs(g, store, h, nb, head, slope)?;
        let rows = g.gather_rows(proj, nb.nb_flat.clone())?;
        let alpha_col = g.reshape(alpha, c * width, 1)?;
        let weighted = g.mul(rows, alpha_col)?;
        let weighted = g.reshape(weighted, c, width * m)?;
        let agg = g.matmul(weighted, stack)?;
        outs.push(match act {
            Activation::LeakyRelu(s) => g.leaky_relu(agg, s),
            Activation::Identity => agg,
        });
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatConfig {
    /// Width of the initial embedding table.
    pub embed_dim: usize,
    pub heads: usize,
    /// Per-head output width; the concatenated width is `heads * head_dim`.
    pub head_dim: usize,
    pub slope: f64,
}

/// Parameters and neighbourhood structure for one ontology tree.
#[derive(Clone, Debug)]
pub struct OntologyEmbedder {
    pub initial: ParamId,
    pub stage1: GatStage,
    pub stage2: GatStage,
    pub config: GatConfig,
    children: Neighborhoods,
    ancestors: Neighborhoods,
}

impl OntologyEmbedder {
    pub fn new<T: Real>(
        tree: &OntologyTree,
        prefix: &str,
        config: GatConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        let initial = store.insert_uniform(format!("{prefix}.we"), &[tree.len(), config.embed_dim], bound, rng)?;
        let out = config.heads * config.head_dim;
        let stage1 = GatStage::new(store, &format!("{prefix}.stage1"), config.heads, config.embed_dim, config.head_dim, rng)?;
        let stage2 = GatStage::new(store, &format!("{prefix}.stage2"), config.heads, out, config.head_dim, rng)?;
        Ok(Self {
            initial,
            stage1,
            stage2,
            config,
            children: Neighborhoods::children_of_all(tree),
            ancestors: Neighborhoods::ancestors_of_leaves(tree),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.stage2.out_dim()
    }

    pub fn child_neighborhoods(&self) -> &Neighborhoods {
        &self.children
    }

    pub fn ancestor_neighborhoods(&self) -> &Neighborhoods {
        &self.ancestors
    }

    /// Enhanced embeddings for every node, `(|O|, K*m)`, computed in a single
    /// pass from the initial table. Leaves aggregate over themselves only.
    pub fn stage1_enhance<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var, NumericsError> {
        let we = g.param(store, self.initial);
        let act = Activation::LeakyRelu(self.config.slope);
        gat_aggregate(g, store, we, &self.children, &self.stage1, self.config.slope, act)
    }

    /// Leaf embeddings `(|C|, K*m)` from the enhanced node table.
    pub fn stage2_ontology<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, enhanced: Var) -> Result<Var, NumericsError> {
        let act = Activation::LeakyRelu(self.config.slope);
        gat_aggregate(g, store, enhanced, &self.ancestors, &self.stage2, self.config.slope, act)
    }

    pub fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var, NumericsError> {
        let he = self.stage1_enhance(g, store)?;
        self.stage2_ontology(g, store, he)
    }

    /// Attention weights of both stages, unpadded: `[stage][head][centre]`.
    pub fn attention_weights<T: Real>(&self, store: &ParamStore<T>) -> Result<[Vec<Vec<Vec<f64>>>; 2], NumericsError> {
        let mut g = Graph::new();
        let we = g.param(store, self.initial);
        let he = self.stage1_enhance(&mut g, store)?;
        let collect = |g: &mut Graph<T>, h: Var, nb: &Neighborhoods, stage: &GatStage| -> Result<_, NumericsError> {
            stage
                .heads
                .iter()
                .map(|head| {
                    let (alpha, _) = attention_coeffs(g, store, h, nb, head, self.config.slope)?;
                    let a = g.value(alpha);
                    Ok((0..nb.len()).map(|i| a.row_slice(i)[..nb.list(i).len()].iter().map(|x| x.to_f64()).collect()).collect())
                })
                .collect::<Result<Vec<_>, NumericsError>>()
        };
        let s1 = collect(&mut g, we, &self.children, &self.stage1)?;
        let s2 = collect(&mut g, he, &self.ancestors, &self.stage2)?;
        Ok([s1, s2])
    }
}

/// A learnable leaf table with no ontology information.
#[derive(Clone, Copy, Debug)]
pub struct PlainEmbedding {
    pub table: ParamId,
}

impl PlainEmbedding {
    pub fn new<T: Real>(
        leaves: usize,
        dim: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self { table: store.insert_uniform(format!("{prefix}.table"), &[leaves, dim], bound, rng)? })
    }
}

/// Source of leaf-code input rows for the visit encoder.
#[derive(Clone, Debug)]
pub enum CodeEmbedder {
    Ontology(OntologyEmbedder),
    Plain(PlainEmbedding),
}

impl CodeEmbedder {
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var, NumericsError> {
        match self {
            CodeEmbedder::Ontology(o) => o.embed(g, store),
            CodeEmbedder::Plain(p) => Ok(g.param(store, p.table)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::CodeType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore<f64>, id: ParamId, data: &[f64]) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::new(shape, data.to_vec()).unwrap();
    }

    fn one_head(store: &mut ParamStore<f64>, in_dim: usize, m: usize, heads: usize) -> GatStage {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        GatStage::new(store, "s", heads, in_dim, m, &mut rng).unwrap()
    }

    #[test]
    fn singleton_neighbourhood_has_unit_weight() {
        let mut store = ParamStore::new();
        let stage = one_head(&mut store, 3, 2, 1);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_f64(1, 3, &[0.2, -0.4, 1.0]));
        let nb = Neighborhoods::new(vec![vec![0]]);
        let (alpha, _) = attention_coeffs(&mut g, &store, h, &nb, &stage.heads[0], 0.2).unwrap();
        assert_eq!(g.value(alpha).data(), &[1.0]);
    }

    #[test]
    fn identical_neighbours_split_evenly() {
        let mut store = ParamStore::new();
        let stage = one_head(&mut store, 2, 2, 1);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_f64(3, 2, &[0.5, 0.1, 0.3, 0.3, 0.3, 0.3]));
        let nb = Neighborhoods::new(vec![vec![0, 1, 2]]);
        let (alpha, _) = attention_coeffs(&mut g, &store, h, &nb, &stage.heads[0], 0.2).unwrap();
        let a = g.value(alpha).data();
        assert!((a[1] - a[2]).abs() < 1e-15);
        let nb2 = Neighborhoods::new(vec![vec![1, 2]]);
        let (alpha2, _) = attention_coeffs(&mut g, &store, h, &nb2, &stage.heads[0], 0.2).unwrap();
        assert_eq!(g.value(alpha2).data(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_attention_reduces_to_mean() {
        let mut store = ParamStore::new();
        let stage = one_head(&mut store, 2, 2, 1);
        set(&mut store, stage.heads[0].w, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, stage.heads[0].a, &[0.0; 4]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_f64(3, 2, &[1.0, 2.0, 3.0, -4.0, 5.0, 0.5]));
        let nb = Neighborhoods::new(vec![vec![0, 1, 2], vec![1, 2]]);
        let out = gat_aggregate(&mut g, &store, h, &nb, &stage, 0.2, Activation::Identity).unwrap();
        let v = g.value(out).data();
        assert!((v[0] - 3.0).abs() < 1e-15 && (v[1] + 0.5).abs() < 1e-15);
        assert!((v[2] - 4.0).abs() < 1e-15 && (v[3] + 1.75).abs() < 1e-15);
    }

    #[test]
    fn identical_heads_repeat_output() {
        let mut store = ParamStore::new();
        let stage = one_head(&mut store, 3, 2, 2);
        let w0 = store.value(stage.heads[0].w).clone();
        let a0 = store.value(stage.heads[0].a).clone();
        *store.value_mut(stage.heads[1].w) = w0;
        *store.value_mut(stage.heads[1].a) = a0;
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_f64(3, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, -0.8, 0.9]));
        let nb = Neighborhoods::new(vec![vec![0, 1, 2], vec![2, 0]]);
        let out = gat_aggregate(&mut g, &store, h, &nb, &stage, 0.2, Activation::LeakyRelu(0.2)).unwrap();
        let v = g.value(out);
        for r in 0..2 {
            let row = v.row_slice(r);
            assert_eq!(row[..2], row[2..]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut store = ParamStore::new();
        let stage = one_head(&mut store, 3, 2, 1);
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 4]));
        let nb = Neighborhoods::new(vec![vec![0]]);
        assert!(gat_aggregate(&mut g, &store, h, &nb, &stage, 0.2, Activation::Identity).is_err());
    }

    fn chain_tree() -> OntologyTree {
        OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\nb\ta\nl1\tb\nl2\tb\n").unwrap()
    }

    #[test]
    fn neighbourhood_shapes_follow_the_tree() {
        let t = chain_tree();
        let anc = Neighborhoods::ancestors_of_leaves(&t);
        assert_eq!(anc.len(), 2);
        assert_eq!(anc.list(0).len(), 4);
        let kids = Neighborhoods::children_of_all(&t);
        assert_eq!(kids.len(), t.len());
        let leaf = t.leaf_node(0);
        assert_eq!(kids.list(leaf), &[leaf]);
    }

    #[test]
    fn stage1_ignores_grandchildren() {
        let t = chain_tree();
        let cfg = GatConfig { embed_dim: 3, heads: 2, head_dim: 2, slope: 0.2 };
        let mut store = ParamStore::<f64>::new();
        let emb = OntologyEmbedder::new(&t, "dx", cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let he = emb.stage1_enhance(&mut g, s).unwrap();
            g.value(he).clone()
        };
        let before = run(&store);
        let a = t.node("a").unwrap();
        let grandchild = t.node("l1").unwrap();
        let cols = cfg.embed_dim;
        store.value_mut(emb.initial).data_mut()[grandchild * cols] += 1.0;
        let after = run(&store);
        assert_eq!(before.row_slice(a), after.row_slice(a));
        assert_eq!(before.row_slice(t.root()), after.row_slice(t.root()));
        assert_ne!(before.row_slice(t.node("b").unwrap()), after.row_slice(t.node("b").unwrap()));
        assert_eq!(after.shape(), &[t.len(), 4]);
    }

    #[test]
    fn single_node_tree_depends_only_on_itself() {
        let t = OntologyTree::parse(CodeType::Medication, "#root x\n").unwrap();
        let cfg = GatConfig { embed_dim: 2, heads: 1, head_dim: 2, slope: 0.2 };
        let mut store = ParamStore::<f64>::new();
        let emb = OntologyEmbedder::new(&t, "rx", cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::new();
        let o = emb.embed(&mut g, &store).unwrap();
        assert_eq!(g.shape(o), (1, 2));
        let w = emb.attention_weights(&store).unwrap();
        assert_eq!(w[1][0][0], vec![1.0]);
    }
}
