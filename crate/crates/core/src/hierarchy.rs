//! Class hierarchies and the soft labels derived from them.
//!
//! A [`ClassHierarchy`] is a rooted tree whose leaves are classes. It comes
//! from an ontology file, from K-means over label embeddings (semantic), or
//! from K-means over mean features of each class (visual). Distances between
//! leaves are the height of their lowest common subtree over the height of the
//! root; a soft label puts mass `∝ exp(−β d(A, g))` on every known class `A`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, TeacherSnapshot};
use crate::numerics::{squared_distance, Matrix, Rng};
use crate::ClassId;

pub type NodeId = usize;

const ROOT: NodeId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchySource {
    Ontology,
    Semantic,
    Visual,
    None,
}

impl fmt::Display for HierarchySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HierarchySource::Ontology => "ontology",
            HierarchySource::Semantic => "semantic",
            HierarchySource::Visual => "visual",
            HierarchySource::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub label: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub class: Option<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHierarchy {
    nodes: Vec<Node>,
    /// Edge-count height of every node; leaves are 0.
    heights: Vec<usize>,
    leaf_map: BTreeMap<ClassId, NodeId>,
    /// Internal nodes by label, for ontology merges.
    internal_by_label: HashMap<String, NodeId>,
    source: HierarchySource,
}

impl ClassHierarchy {
    pub fn new(source: HierarchySource) -> Self {
        ClassHierarchy {
            nodes: vec![Node {
                label: "root".to_string(),
                parent: None,
                children: Vec::new(),
                class: None,
            }],
            heights: vec![0],
            leaf_map: BTreeMap::new(),
            internal_by_label: HashMap::new(),
            source,
        }
    }

    /// Every class directly under the root.
    pub fn flat<'a>(classes: impl IntoIterator<Item = (ClassId, &'a str)>) -> Result<Self> {
        let mut h = ClassHierarchy::new(HierarchySource::None);
        for (class, label) in classes {
            h.add_leaf(ROOT, class, label)?;
        }
        Ok(h)
    }

    pub fn source(&self) -> HierarchySource {
        self.source
    }

    pub fn root(&self) -> NodeId {
        ROOT
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_map.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.leaf_map.keys().copied()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.leaf_map.contains_key(&class)
    }

    pub fn leaf(&self, class: ClassId) -> Result<NodeId> {
        self.leaf_map
            .get(&class)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class {class} is not a leaf of the hierarchy")))
    }

    pub fn height(&self, node: NodeId) -> usize {
        self.heights[node]
    }

    pub fn root_height(&self) -> usize {
        self.heights[ROOT]
    }

    /// Coarse groups are the root's children that are not themselves leaves.
    pub fn coarse_nodes(&self) -> Vec<NodeId> {
        self.nodes[ROOT]
            .children
            .iter()
            .copied()
            .filter(|&c| self.nodes[c].class.is_none())
            .collect()
    }

    /// Adds an internal node below `parent`.
    pub fn add_internal(&mut self, parent: NodeId, label: &str) -> Result<NodeId> {
        if self.nodes[parent].class.is_some() {
            return Err(Error::invalid(format!("leaf `{}` cannot have children", self.nodes[parent].label)));
        }
        if self.internal_by_label.contains_key(label) {
            return Err(Error::invalid(format!("internal node `{label}` already exists")));
        }
        let id = self.push_node(parent, label, None);
        self.internal_by_label.insert(label.to_string(), id);
        Ok(id)
    }

    pub fn add_leaf(&mut self, parent: NodeId, class: ClassId, label: &str) -> Result<NodeId> {
        if self.nodes[parent].class.is_some() {
            return Err(Error::invalid(format!("leaf `{}` cannot have children", self.nodes[parent].label)));
        }
        if self.leaf_map.contains_key(&class) {
            return Err(Error::invalid(format!("class {class} is already a leaf")));
        }
        let id = self.push_node(parent, label, Some(class));
        self.leaf_map.insert(class, id);
        Ok(id)
    }

    fn push_node(&mut self, parent: NodeId, label: &str, class: Option<ClassId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            label: label.to_string(),
            parent: Some(parent),
            children: Vec::new(),
            class,
        });
        self.heights.push(0);
        self.nodes[parent].children.push(id);
        let mut child = id;
        let mut cur = Some(parent);
        while let Some(p) = cur {
            let candidate = self.heights[child] + 1;
            if self.heights[p] >= candidate {
                break;
            }
            self.heights[p] = candidate;
            child = p;
            cur = self.nodes[p].parent;
        }
        id
    }

    /// Inserts a leaf under the internal path `path` (outermost first), reusing
    /// existing internal nodes and creating missing ones. Existing nodes never move.
    pub fn insert_path(&mut self, path: &[String], class: ClassId, label: &str) -> Result<NodeId> {
        let mut parent = ROOT;
        for segment in path {
            parent = match self.internal_by_label.get(segment) {
                Some(&existing) => {
                    if self.nodes[existing].parent != Some(parent) {
                        return Err(Error::invalid(format!(
                            "node `{segment}` already sits under a different parent"
                        )));
                    }
                    existing
                }
                None => self.add_internal(parent, segment)?,
            };
        }
        self.add_leaf(parent, class, label)
    }

    fn ancestors(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::successors(Some(node), move |&n| self.nodes[n].parent)
    }

    /// Lowest common subtree of two nodes.
    pub fn lowest_common_subtree(&self, a: NodeId, b: NodeId) -> NodeId {
        let above_a: BTreeSet<NodeId> = self.ancestors(a).collect();
        self.ancestors(b)
            .find(|n| above_a.contains(n))
            .unwrap_or(ROOT)
    }

    /// `Height(LCS(a, c)) / Height(root)`, in `[0, 1]`.
    pub fn lcs_distance(&self, a: ClassId, c: ClassId) -> Result<f64> {
        let la = self.leaf(a)?;
        let lc = self.leaf(c)?;
        let root_height = self.root_height();
        if root_height == 0 {
            return Ok(0.0);
        }
        let lcs = self.lowest_common_subtree(la, lc);
        Ok(self.heights[lcs] as f64 / root_height as f64)
    }

    /// Multi-granularity soft label for ground truth `g`, normalized over exactly `classes`.
    pub fn soft_label(&self, g: ClassId, beta: f64, classes: &[ClassId]) -> Result<LabelDistribution> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
        }
        if !classes.contains(&g) {
            return Err(Error::invalid(format!("ground truth {g} is not among the known classes")));
        }
        let exponents = classes
            .iter()
            .map(|&a| self.lcs_distance(a, g).map(|d| -beta * d))
            .collect::<Result<Vec<f64>>>()?;
        let values = crate::numerics::softmax(&exponents)?;
        Ok(LabelDistribution {
            classes: classes.to_vec(),
            values,
            beta: Some(beta),
        })
    }

    /// Soft labels for every class in `classes`, one row per ground truth, in order.
    pub fn soft_label_table(&self, beta: f64, classes: &[ClassId]) -> Result<Matrix> {
        let rows = classes
            .iter()
            .map(|&g| self.soft_label(g, beta, classes).map(|d| d.values))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Adds the ontology branches for `classes` that are not yet present.
    pub fn merge_ontology<'a>(
        &mut self,
        ontology: &Ontology,
        classes: impl IntoIterator<Item = (ClassId, &'a str)>,
    ) -> Result<()> {
        for (class, label) in classes {
            if self.contains(class) {
                continue;
            }
            let entry = ontology
                .entry(label)
                .ok_or_else(|| Error::invalid(format!("class `{label}` is missing from the ontology")))?;
            self.insert_path(&entry.path, class, label)?;
        }
        Ok(())
    }

    /// Two-level tree from a cluster assignment: root → one node per non-empty
    /// cluster → leaves. If only one cluster is populated it coincides with the
    /// root and the leaves hang directly below it.
    fn from_clusters(source: HierarchySource, classes: &[(ClassId, String)], assignments: &[usize]) -> Result<Self> {
        let mut h = ClassHierarchy::new(source);
        let populated: BTreeSet<usize> = assignments.iter().copied().collect();
        if populated.len() <= 1 {
            for (class, label) in classes {
                h.add_leaf(ROOT, *class, label)?;
            }
            return Ok(h);
        }
        let mut coarse = BTreeMap::new();
        for &cluster in &populated {
            coarse.insert(cluster, h.add_internal(ROOT, &format!("cluster{cluster}"))?);
        }
        for ((class, label), cluster) in classes.iter().zip(assignments) {
            h.add_leaf(coarse[cluster], *class, label)?;
        }
        Ok(h)
    }
}

/// Probability vector over the currently known classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub classes: Vec<ClassId>,
    pub values: Vec<f64>,
    /// `None` for a one-hot label.
    pub beta: Option<f64>,
}

impl LabelDistribution {
    pub fn one_hot(g: ClassId, classes: &[ClassId]) -> Result<Self> {
        if !classes.contains(&g) {
            return Err(Error::invalid(format!("ground truth {g} is not among the known classes")));
        }
        Ok(LabelDistribution {
            classes: classes.to_vec(),
            values: classes.iter().map(|&c| if c == g { 1.0 } else { 0.0 }).collect(),
            beta: None,
        })
    }

    pub fn value_of(&self, class: ClassId) -> Option<f64> {
        self.classes.iter().position(|&c| c == class).map(|i| self.values[i])
    }
}

/// One line of an ontology file: `parent/…/leaf`.
#[derive(Clone, Debug, PartialEq)]
pub struct OntologyEntry {
    pub path: Vec<String>,
    pub leaf: String,
    pub line: usize,
}

/// Parsed ontology file. Each non-empty, non-`#` line is a slash-separated path
/// ending in a class label; internal labels are global, so a label names the
/// same node wherever it appears.
#[derive(Clone, Debug, PartialEq)]
pub struct Ontology {
    entries: Vec<OntologyEntry>,
    by_leaf: HashMap<String, usize>,
}

impl Ontology {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut by_leaf = HashMap::new();
        // internal label → (parent label or None for the root, line)
        let mut parent_of: HashMap<String, (Option<String>, usize)> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let segments: Vec<&str> = line.split('/').map(str::trim).collect();
            if segments.iter().any(|s| s.is_empty()) {
                return Err(Error::parse(source_name, line_no, format!("orphan node: empty path segment in `{line}`")));
            }
            let (leaf, path) = segments.split_last().expect("split yields at least one segment");
            let mut seen = BTreeSet::new();
            let mut parent: Option<String> = None;
            for &seg in path {
                if !seen.insert(seg) {
                    return Err(Error::parse(source_name, line_no, format!("cycle: `{seg}` is its own ancestor")));
                }
                match parent_of.get(seg) {
                    Some((existing, first_line)) if existing != &parent => {
                        return Err(Error::parse(
                            source_name,
                            line_no,
                            format!(
                                "`{seg}` placed under {} but line {first_line} places it under {}",
                                describe_parent(&parent),
                                describe_parent(existing)
                            ),
                        ));
                    }
                    Some(_) => {}
                    None => {
                        parent_of.insert(seg.to_string(), (parent.clone(), line_no));
                    }
                }
                parent = Some(seg.to_string());
            }
            if seen.contains(leaf) {
                return Err(Error::parse(source_name, line_no, format!("cycle: leaf `{leaf}` is its own ancestor")));
            }
            if let Some(&prev) = by_leaf.get(*leaf) {
                let prev: &OntologyEntry = &entries[prev];
                return Err(Error::parse(
                    source_name,
                    line_no,
                    format!("duplicate leaf `{leaf}` (first defined on line {})", prev.line),
                ));
            }
            by_leaf.insert(leaf.to_string(), entries.len());
            entries.push(OntologyEntry {
                path: path.iter().map(|s| s.to_string()).collect(),
                leaf: leaf.to_string(),
                line: line_no,
            });
        }
        for entry in &entries {
            if let Some((_, line)) = parent_of.get(&entry.leaf) {
                return Err(Error::parse(
                    source_name,
                    entry.line,
                    format!("leaf `{}` is also used as an internal node on line {line}", entry.leaf),
                ));
            }
        }
        Ok(Ontology { entries, by_leaf })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ontology::parse(&text, &path.display().to_string())
    }

    pub fn entries(&self) -> &[OntologyEntry] {
        &self.entries
    }

    pub fn entry(&self, leaf: &str) -> Option<&OntologyEntry> {
        self.by_leaf.get(leaf).map(|&i| &self.entries[i])
    }

    /// Full hierarchy with class ids assigned in file order.
    pub fn to_hierarchy(&self) -> Result<ClassHierarchy> {
        let mut h = ClassHierarchy::new(HierarchySource::Ontology);
        for (i, e) in self.entries.iter().enumerate() {
            h.insert_path(&e.path, ClassId(i), &e.leaf)?;
        }
        Ok(h)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            for seg in &e.path {
                out.push_str(seg);
                out.push('/');
            }
            out.push_str(&e.leaf);
            out.push('\n');
        }
        out
    }
}

fn describe_parent(p: &Option<String>) -> String {
    match p {
        Some(s) => format!("`{s}`"),
        None => "the root".to_string(),
    }
}

/// Reads an ontology file into a hierarchy whose class ids follow line order.
pub fn load_ontology(path: &Path) -> Result<ClassHierarchy> {
    Ontology::load(path)?.to_hierarchy()
}

/// Label → word vector, all of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, label: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding for `{label}` has dimension {}, table uses {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for `{label}`")));
        }
        self.vectors.insert(label.to_string(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.vectors.get(label).map(Vec::as_slice)
    }

    /// Text format: a header `<count> <dim>`, then `label v1 … v_dim` per line.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (header_line, header) = lines
            .next()
            .ok_or_else(|| Error::parse(source_name, 1, "empty embedding file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::parse(source_name, header_line, "header must be `<count> <dim>`"));
        }
        let count: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(source_name, header_line, format!("bad label count `{}`", fields[0])))?;
        let dim: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(source_name, header_line, format!("bad dimension `{}`", fields[1])))?;
        let mut table = EmbeddingTable::new(dim);
        for (line_no, line) in lines {
            let mut parts = line.split_whitespace();
            let label = parts.next().expect("non-empty line");
            let values = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::parse(source_name, line_no, format!("`{p}` is not a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(Error::parse(
                    source_name,
                    line_no,
                    format!("`{label}` has {} values, expected {dim}", values.len()),
                ));
            }
            if table.vectors.contains_key(label) {
                return Err(Error::parse(source_name, line_no, format!("duplicate label `{label}`")));
            }
            table
                .insert(label, values)
                .map_err(|e| Error::parse(source_name, line_no, e.to_string()))?;
        }
        if table.len() != count {
            return Err(Error::parse(
                source_name,
                header_line,
                format!("header announces {count} labels, file has {}", table.len()),
            ));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        EmbeddingTable::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.vectors.len(), self.dim);
        for (label, v) in &self.vectors {
            out.push_str(label);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub const KMEANS_MAX_ITERATIONS: usize = 300;
pub const KMEANS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Objective after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when assignments stop changing, when the objective improves by at most
/// [`KMEANS_TOLERANCE`], or after [`KMEANS_MAX_ITERATIONS`]. The returned
/// assignments are nearest-centroid for the returned centroids (ties go to the
/// lower cluster index). A cluster left empty by an update is moved onto the
/// point farthest from its centroid; it can stay empty only when every
/// remaining point is a duplicate of an existing centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > vectors.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} items to cluster", vectors.len())));
    }
    let dim = vectors[0].len();
    if let Some(i) = vectors.iter().position(|v| v.len() != dim) {
        return Err(Error::invalid(format!("vector {i} has dimension {}, expected {dim}", vectors[i].len())));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans input".into()));
    }

    let mut centroids = seed_plus_plus(vectors, k, rng);
    let mut assignments = vec![usize::MAX; vectors.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let (next, inertia) = assign(vectors, &centroids);
        let unchanged = next == assignments;
        let stalled = history.last().is_some_and(|&prev: &f64| prev - inertia <= KMEANS_TOLERANCE);
        assignments = next;
        history.push(inertia);
        if unchanged || stalled || iterations >= KMEANS_MAX_ITERATIONS {
            break;
        }
        update_centroids(vectors, &assignments, &mut centroids);
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(ClusterResult {
        assignments,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    })
}

fn seed_plus_plus(vectors: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![vectors[rng.below(vectors.len())].clone()];
    let mut nearest: Vec<f64> = vectors.iter().map(|v| squared_distance(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform(0.0, total);
            let mut chosen = nearest.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding landing on an already chosen point
            if nearest[chosen] == 0.0 {
                chosen = nearest
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("non-empty");
            }
            chosen
        } else {
            rng.below(vectors.len())
        };
        let c = vectors[pick].clone();
        for (n, v) in nearest.iter_mut().zip(vectors) {
            *n = n.min(squared_distance(v, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(vectors: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignments = vectors
        .iter()
        .map(|v| {
            let (best, d) = nearest_centroid(v, centroids);
            inertia += d;
            best
        })
        .collect();
    (assignments, inertia)
}

/// Nearest centroid and its squared distance; ties go to the lower index.
pub fn nearest_centroid(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = squared_distance(v, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(v, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

fn update_centroids(vectors: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = vectors[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    let mut taken = BTreeSet::new();
    for (c, (sum, &n)) in centroids.iter_mut().zip(sums.into_iter().zip(&counts)) {
        if n > 0 {
            *c = sum.into_iter().map(|s| s / n as f64).collect();
        }
    }
    for cluster in 0..centroids.len() {
        if counts[cluster] > 0 {
            continue;
        }
        let far = vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(i, v)| (i, squared_distance(v, &centroids[assignments[i]])))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = far {
            taken.insert(i);
            centroids[cluster] = vectors[i].clone();
        }
    }
}

/// Two-level hierarchy from K-means over the labels' embeddings.
pub fn build_semantic_hierarchy(
    labels: &[(ClassId, String)],
    table: &EmbeddingTable,
    k: usize,
    rng: &mut Rng,
) -> Result<ClassHierarchy> {
    let vectors = labels
        .iter()
        .map(|(_, label)| {
            table
                .get(label)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::MissingEmbedding(label.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let clusters = kmeans(&vectors, k, rng)?;
    ClassHierarchy::from_clusters(HierarchySource::Semantic, labels, &clusters.assignments)
}

/// Anything that maps a batch to penultimate features.
pub trait FeatureExtractor {
    fn features(&self, batch: &Matrix) -> Result<Matrix>;
}

impl FeatureExtractor for Network {
    fn features(&self, batch: &Matrix) -> Result<Matrix> {
        self.extract_features(batch)
    }
}

impl FeatureExtractor for TeacherSnapshot {
    fn features(&self, batch: &Matrix) -> Result<Matrix> {
        self.extract_features(batch)
    }
}

/// Samples available for one class when building a visual hierarchy.
pub struct ClassSamples<'a> {
    pub class: ClassId,
    pub label: &'a str,
    pub samples: &'a Matrix,
}

/// Mean extracted feature of each class.
pub fn class_representatives(extractor: &impl FeatureExtractor, data: &[ClassSamples<'_>]) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .map(|c| {
            if c.samples.rows() == 0 {
                return Err(Error::invalid(format!("class `{}` has no samples", c.label)));
            }
            Ok(extractor.features(c.samples)?.column_means())
        })
        .collect()
}

/// Two-level hierarchy from K-means over the mean feature of each class.
pub fn build_visual_hierarchy(
    extractor: &impl FeatureExtractor,
    data: &[ClassSamples<'_>],
    k: usize,
    rng: &mut Rng,
) -> Result<ClassHierarchy> {
    let reps = class_representatives(extractor, data)?;
    let clusters = kmeans(&reps, k, rng)?;
    let labels: Vec<(ClassId, String)> = data.iter().map(|c| (c.class, c.label.to_string())).collect();
    ClassHierarchy::from_clusters(HierarchySource::Visual, &labels, &clusters.assignments)
}
