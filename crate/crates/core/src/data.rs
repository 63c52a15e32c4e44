//! Synthetic EHR generation, patient splits and JSON-lines record files.
//!
//! Latent condition clusters each own a diagnosis pool and a medication pool
//! drawn from ontology subtrees, so codes co-occur along the hierarchy and
//! diagnoses carry information about medications.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::ontology::{CodeType, OntologyTree, PatientRecord, Visit};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub single_visit_patients: usize,
    pub multi_visit_patients: usize,
    pub dx_leaves: usize,
    pub rx_leaves: usize,
    /// Depth of every leaf below the root.
    pub depth: usize,
    pub clusters: usize,
    pub dx_pool: usize,
    pub rx_pool: usize,
    pub dx_per_visit: f64,
    pub rx_per_visit: f64,
    /// Fraction of codes drawn uniformly from the whole vocabulary.
    pub noise: f64,
    /// Relative weights of 2, 3, 4, ... visits for multi-visit patients.
    pub visit_weights: Vec<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            single_visit_patients: 2000,
            multi_visit_patients: 500,
            dx_leaves: 120,
            rx_leaves: 60,
            depth: 4,
            clusters: 12,
            dx_pool: 20,
            rx_pool: 14,
            dx_per_visit: 10.5,
            rx_per_visit: 8.8,
            noise: 0.1,
            visit_weights: vec![0.75, 0.17, 0.06, 0.02],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.single_visit_patients + self.multi_visit_patients == 0 {
            return bad("at least one patient required");
        }
        if self.dx_leaves == 0 || self.rx_leaves == 0 || self.depth == 0 || self.clusters == 0 {
            return bad("vocabulary sizes, depth and cluster count must be positive");
        }
        if self.dx_pool == 0 || self.rx_pool == 0 {
            return bad("cluster pools must be non-empty");
        }
        if self.dx_pool > self.dx_leaves || self.rx_pool > self.rx_leaves {
            return bad("cluster pool larger than vocabulary");
        }
        if !(self.dx_per_visit >= 1.0 && self.rx_per_visit >= 1.0) {
            return bad("per-visit code means must be at least 1");
        }
        if self.dx_per_visit > self.dx_leaves as f64 || self.rx_per_visit > self.rx_leaves as f64 {
            return bad("per-visit code mean exceeds vocabulary");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1]");
        }
        if self.visit_weights.is_empty() || self.visit_weights.iter().any(|w| !(*w >= 0.0)) || self.visit_weights.iter().sum::<f64>() <= 0.0 {
            return bad("visit weights must be non-negative with positive sum");
        }
        Ok(())
    }
}

/// A tree with `leaves` leaves all at `depth`, internal levels shrinking
/// geometrically. Leaves are labelled `{prefix}{i:03}`.
pub fn generate_tree(code_type: CodeType, leaves: usize, depth: usize) -> Result<OntologyTree, Error> {
    if leaves == 0 || depth == 0 {
        return Err(Error::Config("tree needs at least one leaf and depth 1".into()));
    }
    let short = code_type.short();
    let branch = (leaves as f64).powf(1.0 / depth as f64).ceil().max(2.0) as usize;
    let mut sizes = vec![leaves];
    for _ in 1..depth {
        let next = sizes.last().unwrap().div_ceil(branch).max(1);
        sizes.push(next);
    }
    sizes.reverse(); // sizes[k] = node count at depth k + 1
    let label = |level: usize, i: usize| {
        if level + 1 == depth {
            format!("{short}{i:03}")
        } else {
            format!("{}{}-{i}", short.to_uppercase(), level + 1)
        }
    };
    let root = short.to_uppercase();
    let mut edges = Vec::new();
    for (level, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let parent = if level == 0 { root.clone() } else { label(level - 1, i * sizes[level - 1] / n) };
            edges.push((label(level, i), parent));
        }
    }
    Ok(OntologyTree::from_edges(code_type, &root, &edges)?)
}

/// Leaf positions for one cluster: leaves under a random low-level node,
/// widened upward until the pool fits.
fn cluster_pool(tree: &OntologyTree, size: usize, rng: &mut impl Rng) -> Vec<usize> {
    let level = tree.max_depth().saturating_sub(1).max(1);
    let candidates = tree.nodes_at_depth(level);
    let mut node = *candidates.choose(rng).expect("tree has nodes at every level");
    let mut leaves = tree.leaves_under(node);
    while leaves.len() < size {
        match tree.parent(node) {
            Some(p) => {
                node = p;
                leaves = tree.leaves_under(node);
            }
            None => break,
        }
    }
    index::sample(rng, leaves.len(), size).into_iter().map(|i| leaves[i]).collect()
}

/// Draws `n` distinct codes, each from `pool` or (with prob. `noise`) the whole vocabulary.
fn draw_codes(pool: &[usize], vocab: usize, n: usize, noise: f64, rng: &mut impl Rng) -> Vec<usize> {
    let n = n.min(vocab);
    let mut out = BTreeSet::new();
    let mut attempts = 0;
    while out.len() < n && attempts < 100 * n {
        attempts += 1;
        let code = if pool.is_empty() || rng.gen::<f64>() < noise { rng.gen_range(0..vocab) } else { pool[rng.gen_range(0..pool.len())] };
        out.insert(code);
    }
    while out.len() < n {
        out.insert(rng.gen_range(0..vocab));
    }
    out.into_iter().collect()
}

pub struct Corpus {
    pub dx_tree: OntologyTree,
    pub rx_tree: OntologyTree,
    /// Single-visit patients first, then multi-visit patients.
    pub records: Vec<PatientRecord>,
}

pub fn generate_corpus(config: &GeneratorConfig) -> Result<Corpus, Error> {
    config.validate()?;
    let dx_tree = generate_tree(CodeType::Diagnosis, config.dx_leaves, config.depth)?;
    let rx_tree = generate_tree(CodeType::Medication, config.rx_leaves, config.depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let clusters: Vec<(Vec<usize>, Vec<usize>)> = (0..config.clusters)
        .map(|_| (cluster_pool(&dx_tree, config.dx_pool, &mut rng), cluster_pool(&rx_tree, config.rx_pool, &mut rng)))
        .collect();
    let visit_count = WeightedIndex::new(&config.visit_weights).map_err(|e| Error::Config(e.to_string()))?;
    let dx_n = Poisson::new(config.dx_per_visit).map_err(|e| Error::Config(e.to_string()))?;
    let rx_n = Poisson::new(config.rx_per_visit).map_err(|e| Error::Config(e.to_string()))?;

    let total = config.single_visit_patients + config.multi_visit_patients;
    let mut records = Vec::with_capacity(total);
    for p in 0..total {
        // Each patient gets its own stream so the corpus is stable under reordering.
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(p as u64 + 1));
        let single = p < config.single_visit_patients;
        let n_visits = if single { 1 } else { 2 + visit_count.sample(&mut prng) };
        let k = 1 + prng.gen_range(0..3usize.min(config.clusters));
        let own: Vec<usize> = index::sample(&mut prng, config.clusters, k).into_vec();
        let visits = (0..n_visits)
            .map(|_| {
                let mut active: Vec<usize> = own.iter().copied().filter(|_| prng.gen::<f64>() < 0.7).collect();
                if active.is_empty() {
                    active.push(own[prng.gen_range(0..own.len())]);
                }
                let dx_pool: Vec<usize> = active.iter().flat_map(|&c| clusters[c].0.iter().copied()).collect();
                let rx_pool: Vec<usize> = active.iter().flat_map(|&c| clusters[c].1.iter().copied()).collect();
                let nd = (dx_n.sample(&mut prng) as usize).max(1);
                let nr = (rx_n.sample(&mut prng) as usize).max(1);
                let dx = draw_codes(&dx_pool, config.dx_leaves, nd, config.noise, &mut prng);
                let rx = draw_codes(&rx_pool, config.rx_leaves, nr, config.noise, &mut prng);
                Visit::new(dx, rx)
            })
            .collect();
        let pid = if single { format!("S{:05}", p) } else { format!("M{:05}", p - config.single_visit_patients) };
        records.push(PatientRecord { pid, visits });
    }
    Ok(Corpus { dx_tree, rx_tree, records })
}

/// Multi-visit patients split by patient; the pre-training pool holds every
/// single-visit patient plus the visits of training patients.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub single: Vec<PatientRecord>,
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

impl CorpusSplit {
    /// Pre-training visits with their `(pid, visit index)` origin.
    pub fn pretrain_sources(&self) -> Vec<(&str, usize)> {
        self.single
            .iter()
            .chain(&self.train)
            .flat_map(|r| (0..r.visits.len()).map(move |i| (r.pid.as_str(), i)))
            .collect()
    }

    pub fn pretrain_pool(&self) -> Vec<Visit> {
        self.single.iter().chain(&self.train).flat_map(|r| r.visits.iter().cloned()).collect()
    }

    pub fn manifest(&self, seed: u64, ratios: [f64; 3]) -> SplitManifest {
        let ids = |rs: &[PatientRecord]| rs.iter().map(|r| r.pid.clone()).collect();
        SplitManifest {
            seed,
            ratios,
            single: ids(&self.single),
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
            pretrain_visits: self.single.iter().chain(&self.train).map(|r| r.visits.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub single: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub pretrain_visits: usize,
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

pub fn split_corpus(records: &[PatientRecord], ratios: [f64; 3], seed: u64) -> Result<CorpusSplit, Error> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let (single, mut multi): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.visits.len() == 1);
    if multi.len() < 3 {
        return Err(Error::Validation(format!("need at least 3 multi-visit patients to split, found {}", multi.len())));
    }
    multi.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = multi.len();
    let n_val = ((n as f64 * ratios[1]).round() as usize).max(1);
    let n_test = ((n as f64 * ratios[2]).round() as usize).max(1);
    let n_train = n.checked_sub(n_val + n_test).filter(|&t| t > 0).ok_or_else(|| {
        Error::Validation(format!("{n} multi-visit patients cannot fill three splits at {ratios:?}"))
    })?;
    let test = multi.split_off(n_train + n_val);
    let val = multi.split_off(n_train);
    Ok(CorpusSplit { single, train: multi, val, test })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    dx: Vec<String>,
    rx: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    pid: String,
    visits: Vec<RawVisit>,
}

pub fn write_records(path: &Path, records: &[PatientRecord], dx: &OntologyTree, rx: &OntologyTree) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let raw = RawRecord {
            pid: r.pid.clone(),
            visits: r
                .visits
                .iter()
                .map(|v| RawVisit {
                    dx: v.dx.iter().map(|&c| dx.leaf_label(c).to_string()).collect(),
                    rx: v.rx.iter().map(|&c| rx.leaf_label(c).to_string()).collect(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&raw).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses one JSON-lines record file, resolving codes against the trees'
/// leaves and dropping duplicate codes within a visit.
pub fn parse_records(text: impl BufRead, path: &str, dx: &OntologyTree, rx: &OntologyTree) -> Result<Vec<PatientRecord>, Error> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Data { path: path.to_string(), line: i + 1, msg };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        if raw.visits.is_empty() {
            return Err(err(format!("patient {} has no visits", raw.pid)));
        }
        if !seen.insert(raw.pid.clone()) {
            return Err(err(format!("duplicate patient id {}", raw.pid)));
        }
        let resolve = |tree: &OntologyTree, codes: &[String]| -> Result<Vec<usize>, Error> {
            codes
                .iter()
                .map(|c| tree.leaf_by_label(c).ok_or_else(|| err(format!("unknown {} code {c:?}", tree.code_type()))))
                .collect()
        };
        let visits = raw
            .visits
            .iter()
            .map(|v| Ok(Visit::new(resolve(dx, &v.dx)?, resolve(rx, &v.rx)?)))
            .collect::<Result<_, Error>>()?;
        records.push(PatientRecord { pid: raw.pid, visits });
    }
    Ok(records)
}

pub fn load_records(path: &Path, dx: &OntologyTree, rx: &OntologyTree) -> Result<Vec<PatientRecord>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file), &path.display().to_string(), dx, rx)
}

/// Mean codes per visit of each type.
pub fn code_means(records: &[PatientRecord]) -> (f64, f64) {
    let visits: Vec<&Visit> = records.iter().flat_map(|r| &r.visits).collect();
    let n = visits.len().max(1) as f64;
    (
        visits.iter().map(|v| v.dx.len()).sum::<usize>() as f64 / n,
        visits.iter().map(|v| v.rx.len()).sum::<usize>() as f64 / n,
    )
}
