//! Code hierarchies and patient records.
//!
//! An [`OntologyTree`] owns its own node index space. Nodes are numbered in
//! breadth-first order from the root; leaves (the codes that appear in raw
//! records) additionally get a dense vocabulary position in ascending node
//! order, which is what [`Visit`] code sets store.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeType {
    Diagnosis,
    Medication,
}

impl CodeType {
    pub fn short(self) -> &'static str {
        match self {
            CodeType::Diagnosis => "dx",
            CodeType::Medication => "rx",
        }
    }
}

impl fmt::Display for CodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum OntologyError {
    #[error("missing root: {0}")]
    MissingRoot(String),
    #[error("duplicate parent for code {0}")]
    DuplicateParent(String),
    #[error("cycle through code {0}")]
    Cycle(String),
    #[error("orphan node {0} does not reach the root")]
    Orphan(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid node index {0}")]
    InvalidIndex(usize),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OntologyTree {
    code_type: CodeType,
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    leaves: Vec<usize>,
    leaf_pos: Vec<Option<usize>>,
    index: HashMap<String, usize>,
}

impl OntologyTree {
    /// Builds a tree from `(child, parent)` label pairs.
    ///
    /// Children keep the order in which their edges first appear, and nodes
    /// are numbered breadth-first from the root.
    pub fn from_edges(code_type: CodeType, root: &str, edges: &[(String, String)]) -> Result<Self, OntologyError> {
        if root.is_empty() {
            return Err(OntologyError::MissingRoot("empty root label".into()));
        }
        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        let mut kids: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut seen_order: Vec<&str> = vec![root];
        let mut seen: std::collections::HashSet<&str> = [root].into_iter().collect();
        for (child, parent) in edges {
            if child == parent {
                return Err(OntologyError::Cycle(child.clone()));
            }
            if parent_of.insert(child.as_str(), parent.as_str()).is_some() {
                return Err(OntologyError::DuplicateParent(child.clone()));
            }
            kids.entry(parent.as_str()).or_default().push(child.as_str());
            for c in [parent.as_str(), child.as_str()] {
                if seen.insert(c) {
                    seen_order.push(c);
                }
            }
        }
        if parent_of.contains_key(root) {
            return Err(OntologyError::Cycle(root.to_string()));
        }
        if !edges.is_empty() && !kids.contains_key(root) {
            return Err(OntologyError::MissingRoot(format!("declared root {root} has no children")));
        }

        let mut labels = Vec::with_capacity(seen_order.len());
        let mut parent = Vec::with_capacity(seen_order.len());
        let mut depth = Vec::with_capacity(seen_order.len());
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut queue = VecDeque::from([(root, None::<usize>, 0usize)]);
        while let Some((label, par, d)) = queue.pop_front() {
            let id = labels.len();
            labels.push(label.to_string());
            index.insert(label.to_string(), id);
            parent.push(par);
            depth.push(d);
            for &k in kids.get(label).map(|v| v.as_slice()).unwrap_or(&[]) {
                queue.push_back((k, Some(id), d + 1));
            }
        }

        if labels.len() != seen_order.len() {
            // Something never reached from the root: either it hangs off a
            // parentless node (orphan) or it sits on a loop.
            for &label in &seen_order {
                if index.contains_key(label) {
                    continue;
                }
                let mut cur = label;
                let mut visited = std::collections::HashSet::new();
                loop {
                    if !visited.insert(cur) {
                        return Err(OntologyError::Cycle(cur.to_string()));
                    }
                    match parent_of.get(cur) {
                        Some(p) => cur = p,
                        None => return Err(OntologyError::Orphan(cur.to_string())),
                    }
                }
            }
        }

        let n = labels.len();
        let mut children = vec![Vec::new(); n];
        for (id, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(id);
            }
        }
        let mut leaves = Vec::new();
        let mut leaf_pos = vec![None; n];
        for id in 0..n {
            if children[id].is_empty() {
                leaf_pos[id] = Some(leaves.len());
                leaves.push(id);
            }
        }
        Ok(Self { code_type, labels, parent, children, depth, leaves, leaf_pos, index })
    }

    /// Parses the tab-separated ontology format: a `#root <code>` header
    /// followed by `child<TAB>parent` lines.
    pub fn parse(code_type: CodeType, text: &str) -> Result<Self, OntologyError> {
        let mut root: Option<String> = None;
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#root") {
                let r = rest.trim();
                if r.is_empty() {
                    return Err(OntologyError::Parse { line: line_no, msg: "#root header without a code".into() });
                }
                if root.is_some() {
                    return Err(OntologyError::Parse { line: line_no, msg: "second #root header".into() });
                }
                root = Some(r.to_string());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(c), Some(p), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(OntologyError::Parse { line: line_no, msg: "expected child<TAB>parent".into() });
            };
            let (c, p) = (c.trim(), p.trim());
            if c.is_empty() || p.is_empty() {
                return Err(OntologyError::Parse { line: line_no, msg: "empty code".into() });
            }
            edges.push((c.to_string(), p.to_string()));
        }
        let root = root.ok_or_else(|| OntologyError::MissingRoot("no #root header".into()))?;
        Self::from_edges(code_type, &root, &edges)
    }

    pub fn load(code_type: CodeType, path: &Path) -> Result<Self, OntologyError> {
        let text = fs::read_to_string(path).map_err(|e| OntologyError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(code_type, &text)
    }

    /// Serialises in breadth-first order, so loading reproduces node indices.
    pub fn to_text(&self) -> String {
        let mut out = format!("#root {}\n", self.labels[self.root()]);
        for id in 1..self.len() {
            let p = self.parent[id].expect("non-root has a parent");
            out.push_str(&self.labels[id]);
            out.push('\t');
            out.push_str(&self.labels[p]);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), OntologyError> {
        let mut f = fs::File::create(path).map_err(|e| OntologyError::Io(e.to_string()))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| OntologyError::Io(e.to_string()))
    }

    pub fn code_type(&self) -> CodeType {
        self.code_type
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    pub fn node(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.leaf_pos[node].is_some()
    }

    /// Leaf node ids in vocabulary order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn non_leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&n| !self.is_leaf(n)).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Vocabulary position of a leaf node.
    pub fn leaf_position(&self, node: usize) -> Option<usize> {
        self.leaf_pos.get(node).copied().flatten()
    }

    pub fn leaf_node(&self, position: usize) -> usize {
        self.leaves[position]
    }

    pub fn leaf_label(&self, position: usize) -> &str {
        &self.labels[self.leaves[position]]
    }

    /// Vocabulary position of a leaf by label.
    pub fn leaf_by_label(&self, label: &str) -> Option<usize> {
        self.node(label).and_then(|n| self.leaf_position(n))
    }

    fn check(&self, node: usize) -> Result<(), OntologyError> {
        if node < self.len() {
            Ok(())
        } else {
            Err(OntologyError::InvalidIndex(node))
        }
    }

    /// All strict ancestors, nearest first, ending at the root.
    pub fn pa(&self, node: usize) -> Result<Vec<usize>, OntologyError> {
        self.check(node)?;
        let mut out = Vec::with_capacity(self.depth[node]);
        let mut cur = self.parent[node];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p];
        }
        Ok(out)
    }

    /// Direct children.
    pub fn ch(&self, node: usize) -> Result<&[usize], OntologyError> {
        self.check(node)?;
        Ok(&self.children[node])
    }

    /// Leaves in the subtree rooted at `node` (vocabulary positions).
    pub fn leaves_under(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if let Some(p) = self.leaf_pos[n] {
                out.push(p);
            }
            stack.extend(self.children[n].iter().rev());
        }
        out.sort_unstable();
        out
    }

    /// Nodes at exactly `depth`.
    pub fn nodes_at_depth(&self, depth: usize) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.depth[n] == depth).collect()
    }

    /// Stable fingerprint of labels and structure.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.code_type.short());
        h.update(self.to_text());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One encounter: deduplicated, sorted leaf positions per code type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Visit {
    pub dx: Vec<usize>,
    pub rx: Vec<usize>,
}

impl Visit {
    pub fn new(mut dx: Vec<usize>, mut rx: Vec<usize>) -> Self {
        dx.sort_unstable();
        dx.dedup();
        rx.sort_unstable();
        rx.dedup();
        Self { dx, rx }
    }

    pub fn codes(&self, kind: CodeType) -> &[usize] {
        match kind {
            CodeType::Diagnosis => &self.dx,
            CodeType::Medication => &self.rx,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub pid: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edges(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(c, p)| (c.to_string(), p.to_string())).collect()
    }

    fn chain() -> OntologyTree {
        OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\nb\ta\nleaf\tb\n").unwrap()
    }

    #[test]
    fn chain_file_gives_depth_three_with_one_leaf() {
        let t = chain();
        assert_eq!(t.len(), 4);
        assert_eq!(t.max_depth(), 3);
        assert_eq!(t.leaf_count(), 1);
        let leaf = t.node("leaf").unwrap();
        let names: Vec<_> = t.pa(leaf).unwrap().into_iter().map(|n| t.label(n).to_string()).collect();
        assert_eq!(names, ["b", "a", "R"]);
    }

    #[test]
    fn root_has_no_ancestors_and_leaf_no_children() {
        let t = chain();
        assert!(t.pa(t.root()).unwrap().is_empty());
        assert!(t.ch(t.node("leaf").unwrap()).unwrap().is_empty());
    }

    #[test]
    fn binary_root_has_two_children() {
        let t = OntologyTree::from_edges(CodeType::Medication, "R", &edges(&[("x", "R"), ("y", "R")])).unwrap();
        let kids: Vec<_> = t.ch(t.root()).unwrap().iter().map(|&n| t.label(n)).collect();
        assert_eq!(kids, ["x", "y"]);
        assert_eq!(t.leaf_count(), 2);
    }

    #[test]
    fn invalid_index_rejected() {
        let t = chain();
        assert_eq!(t.pa(99), Err(OntologyError::InvalidIndex(99)));
        assert_eq!(t.ch(4).unwrap_err(), OntologyError::InvalidIndex(4));
    }

    #[test]
    fn single_node_tree_is_its_own_leaf() {
        let t = OntologyTree::parse(CodeType::Diagnosis, "#root only\n").unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.is_leaf(0));
    }

    #[test]
    fn validation_errors_are_distinct() {
        let dup = OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\na\tR\n");
        assert_eq!(dup.unwrap_err(), OntologyError::DuplicateParent("a".into()));
        let dup2 = OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\nb\tR\na\tb\n");
        assert!(matches!(dup2, Err(OntologyError::DuplicateParent(_))));

        let cyc = OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\nb\tc\nc\tb\n");
        assert!(matches!(cyc, Err(OntologyError::Cycle(_))), "{cyc:?}");
        let root_child = OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\nR\ta\n");
        assert!(matches!(root_child, Err(OntologyError::DuplicateParent(_)) | Err(OntologyError::Cycle(_))));

        let orphan = OntologyTree::parse(CodeType::Diagnosis, "#root R\na\tR\nb\tz\n");
        assert_eq!(orphan.unwrap_err(), OntologyError::Orphan("z".into()));

        let missing = OntologyTree::parse(CodeType::Diagnosis, "a\tR\n");
        assert!(matches!(missing, Err(OntologyError::MissingRoot(_))));
        let unused_root = OntologyTree::parse(CodeType::Diagnosis, "#root Q\na\tR\n");
        assert!(matches!(unused_root, Err(OntologyError::MissingRoot(_))));

        let bad_line = OntologyTree::parse(CodeType::Diagnosis, "#root R\na R\n");
        assert!(matches!(bad_line, Err(OntologyError::Parse { line: 2, .. })));
    }

    #[test]
    fn visit_dedups_and_sorts() {
        let v = Visit::new(vec![3, 1, 3], vec![2, 2]);
        assert_eq!(v.dx, [1, 3]);
        assert_eq!(v.rx, [2]);
    }

    /// Random tree as a parent array: node i > 0 picks a parent among 0..i.
    fn random_tree(parents: &[usize]) -> OntologyTree {
        let e: Vec<(String, String)> = parents
            .iter()
            .enumerate()
            .map(|(i, &p)| (format!("n{}", i + 1), format!("n{}", p % (i + 1))))
            .collect();
        OntologyTree::from_edges(CodeType::Diagnosis, "n0", &e).unwrap()
    }

    proptest! {
        #[test]
        fn pa_matches_parent_chasing(parents in proptest::collection::vec(0usize..1000, 0..60)) {
            let t = random_tree(&parents);
            for n in 0..t.len() {
                let mut want = Vec::new();
                let mut cur = n;
                while let Some(p) = t.parent(cur) {
                    want.push(p);
                    cur = p;
                }
                prop_assert_eq!(t.pa(n).unwrap(), want.clone());
                prop_assert_eq!(want.len(), t.depth(n));
            }
        }

        #[test]
        fn ch_inverts_parent_map(parents in proptest::collection::vec(0usize..1000, 0..60)) {
            let t = random_tree(&parents);
            let mut inverted = vec![Vec::new(); t.len()];
            for n in 0..t.len() {
                if let Some(p) = t.parent(n) {
                    inverted[p].push(n);
                }
            }
            for n in 0..t.len() {
                let mut got = t.ch(n).unwrap().to_vec();
                got.sort_unstable();
                prop_assert_eq!(&got, &inverted[n]);
            }
            let mut all: Vec<usize> = t.leaves().to_vec();
            all.extend(t.non_leaves());
            all.sort_unstable();
            prop_assert_eq!(all, (0..t.len()).collect::<Vec<_>>());
        }

        #[test]
        fn text_round_trip(parents in proptest::collection::vec(0usize..1000, 0..200)) {
            let t = random_tree(&parents);
            let back = OntologyTree::parse(CodeType::Diagnosis, &t.to_text()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
