//! Seeded random-forest binary classifier.
//!
//! Trees are grown on bootstrap samples with Gini-impurity splits over a random
//! feature subset per node. Continuous splits send `x <= threshold` left, where
//! thresholds are observed training values; categorical splits send `x ∈ S`
//! left, with `S` grown greedily one category at a time.
//!
//! The forest probability is the mean of per-tree leaf class-1 fractions and
//! the forest class is `1` iff that probability is at least 0.5.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::derive_seed;
use crate::tabular::{Dataset, DatasetSchema, FeatureKind, Instance, Value};

/// A binary classifier over schema-legal instances.
pub trait Classifier: Send + Sync {
    fn schema(&self) -> &DatasetSchema;

    /// Probability of class index 1.
    fn predict_proba(&self, instance: &Instance) -> f64;

    /// Class index; `1` iff `predict_proba >= 0.5`.
    fn predict(&self, instance: &Instance) -> usize {
        usize::from(self.predict_proba(instance) >= 0.5)
    }

    /// Probability assigned to `class`.
    fn proba_of(&self, instance: &Instance, class: usize) -> f64 {
        let p = self.predict_proba(instance);
        if class == 1 {
            p
        } else {
            1.0 - p
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("training data contains a single class ({0} rows of class index {1})")]
    SingleClass(usize, usize),
    #[error("invalid forest parameters: {0}")]
    BadParams(String),
    #[error("model file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic header)")]
    BadMagic,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model was trained on a different schema: {0}")]
    SchemaMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` means ⌈√m⌉.
    pub features_per_split: Option<usize>,
    /// Grow each tree on a bootstrap resample (otherwise on the full data).
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 8,
            min_leaf: 5,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn resolved_features_per_split(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1))
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(ModelError::BadParams(
                "n_trees, max_depth and min_leaf must be positive".into(),
            ));
        }
        if self.features_per_split == Some(0) {
            return Err(ModelError::BadParams("features_per_split must be positive".into()));
        }
        Ok(())
    }
}

/// Bitset over category indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategorySet(Vec<u64>);

impl CategorySet {
    pub fn with_capacity(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64).max(1)])
    }

    pub fn insert(&mut self, c: u32) {
        let (w, b) = ((c / 64) as usize, c % 64);
        if w >= self.0.len() {
            self.0.resize(w + 1, 0);
        }
        self.0[w] |= 1 << b;
    }

    pub fn contains(&self, c: u32) -> bool {
        let (w, b) = ((c / 64) as usize, c % 64);
        self.0.get(w).is_some_and(|word| word & (1 << b) != 0)
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Threshold(f64),
    /// `x ∈ set` goes left; `seen` holds the categories present when the split was grown.
    InSet { set: CategorySet, seen: CategorySet },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        counts: [u32; 2],
    },
    Split {
        feature: usize,
        rule: SplitRule,
        left: u32,
        right: u32,
        /// Training rows routed to each side, used to place unseen categories.
        left_count: u32,
        right_count: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn leaf_for(&self, instance: &Instance) -> [u32; 2] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { counts } => return *counts,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                    left_count,
                    right_count,
                } => {
                    let go_left = match (rule, instance.values.get(*feature)) {
                        (SplitRule::Threshold(t), Some(Value::Num(x))) => x <= t,
                        (SplitRule::InSet { set, seen }, Some(Value::Cat(c))) if seen.contains(*c) => {
                            set.contains(*c)
                        }
                        // Unseen category (or a malformed value): follow the heavier branch.
                        _ => left_count >= right_count,
                    };
                    at = if go_left { *left } else { *right } as usize;
                }
            }
        }
    }

    /// Class-1 fraction of the leaf reached by `instance`.
    pub fn proba(&self, instance: &Instance) -> f64 {
        let [c0, c1] = self.leaf_for(instance);
        c1 as f64 / (c0 + c1) as f64
    }

    /// Training counts that reached node `at` (sum over its leaves).
    pub fn node_counts(&self, at: usize) -> [u32; 2] {
        match &self.nodes[at] {
            Node::Leaf { counts } => *counts,
            Node::Split { left, right, .. } => {
                let l = self.node_counts(*left as usize);
                let r = self.node_counts(*right as usize);
                [l[0] + r[0], l[1] + r[1]]
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, at: usize) -> usize {
            match &t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(t, *left as usize).max(go(t, *right as usize))
                }
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub schema: DatasetSchema,
    pub params: ForestParams,
    pub train_seed: u64,
    pub trees: Vec<DecisionTree>,
}

impl Classifier for ForestModel {
    fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    fn predict_proba(&self, instance: &Instance) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.proba(instance)).sum();
        sum / self.trees.len() as f64
    }
}

pub fn gini(counts: [u32; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = counts[1] as f64 / n;
    2.0 * p * (1.0 - p)
}

fn weighted_gini(left: [u32; 2], right: [u32; 2]) -> f64 {
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    (nl * gini(left) + nr * gini(right)) / (nl + nr)
}

enum Column {
    Num(Vec<f64>),
    Cat { codes: Vec<u32>, n_values: usize },
}

struct TrainData {
    columns: Vec<Column>,
    labels: Vec<u8>,
}

impl TrainData {
    fn new(dataset: &Dataset) -> Self {
        let columns = dataset
            .schema
            .features
            .iter()
            .enumerate()
            .map(|(f, spec)| match &spec.kind {
                FeatureKind::Continuous { .. } => Column::Num(
                    dataset
                        .rows
                        .iter()
                        .map(|r| r.values[f].as_num().unwrap_or(f64::NAN))
                        .collect(),
                ),
                FeatureKind::Categorical { values } => Column::Cat {
                    codes: dataset
                        .rows
                        .iter()
                        .map(|r| r.values[f].as_cat().unwrap_or(u32::MAX))
                        .collect(),
                    n_values: values.len(),
                },
            })
            .collect();
        let labels = dataset
            .rows
            .iter()
            .map(|r| r.label.unwrap_or(0) as u8)
            .collect();
        Self { columns, labels }
    }

    fn counts(&self, idx: &[usize]) -> [u32; 2] {
        let mut c = [0u32; 2];
        for &i in idx {
            c[self.labels[i] as usize] += 1;
        }
        c
    }
}

struct Candidate {
    impurity: f64,
    feature: usize,
    rule: SplitRule,
}

struct Grower<'a> {
    data: &'a TrainData,
    params: ForestParams,
    features_per_split: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let counts = self.data.counts(&idx);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { counts });

        let n = idx.len();
        if depth >= self.params.max_depth
            || counts[0] == 0
            || counts[1] == 0
            || n < 2 * self.params.min_leaf
        {
            return id;
        }
        let parent = gini(counts);

        let m = self.data.columns.len();
        let mut features = index::sample(rng, m, self.features_per_split).into_vec();
        features.sort_unstable();

        let mut best: Option<Candidate> = None;
        for f in features {
            let cand = match &self.data.columns[f] {
                Column::Num(xs) => self.best_threshold(xs, &idx, counts),
                Column::Cat { codes, n_values } => self.best_subset(codes, *n_values, &idx),
            };
            if let Some((impurity, rule)) = cand {
                if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                    best = Some(Candidate {
                        impurity,
                        feature: f,
                        rule,
                    });
                }
            }
        }
        let Some(best) = best.filter(|b| b.impurity < parent - 1e-12) else {
            return id;
        };

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| match (&best.rule, &self.data.columns[best.feature]) {
                (SplitRule::Threshold(t), Column::Num(xs)) => xs[i] <= *t,
                (SplitRule::InSet { set, .. }, Column::Cat { codes, .. }) => set.contains(codes[i]),
                _ => unreachable!("split rule matches column kind"),
            });
        let (left_count, right_count) = (left_idx.len() as u32, right_idx.len() as u32);
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[id as usize] = Node::Split {
            feature: best.feature,
            rule: best.rule,
            left,
            right,
            left_count,
            right_count,
        };
        id
    }

    fn best_threshold(&self, xs: &[f64], idx: &[usize], total: [u32; 2]) -> Option<(f64, SplitRule)> {
        let mut pairs: Vec<(f64, u8)> = idx.iter().map(|&i| (xs[i], self.data.labels[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let min_leaf = self.params.min_leaf;
        let mut left = [0u32; 2];
        let mut best: Option<(f64, f64)> = None;
        for i in 0..pairs.len() - 1 {
            left[pairs[i].1 as usize] += 1;
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            if nl < min_leaf || pairs.len() - nl < min_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let imp = weighted_gini(left, right);
            if best.is_none_or(|(b, _)| imp < b) {
                best = Some((imp, pairs[i].0));
            }
        }
        best.map(|(imp, t)| (imp, SplitRule::Threshold(t)))
    }

    fn best_subset(&self, codes: &[u32], n_values: usize, idx: &[usize]) -> Option<(f64, SplitRule)> {
        let mut per = vec![[0u32; 2]; n_values];
        for &i in idx {
            if let Some(slot) = per.get_mut(codes[i] as usize) {
                slot[self.data.labels[i] as usize] += 1;
            }
        }
        let present: Vec<u32> = (0..n_values as u32)
            .filter(|&c| per[c as usize] != [0, 0])
            .collect();
        if present.len() < 2 {
            return None;
        }
        let total = per.iter().fold([0u32; 2], |a, c| [a[0] + c[0], a[1] + c[1]]);
        let mut seen = CategorySet::with_capacity(n_values);
        for &c in &present {
            seen.insert(c);
        }

        let min_leaf = self.params.min_leaf as u32;
        let mut chosen = CategorySet::with_capacity(n_values);
        let mut left = [0u32; 2];
        let mut best: Option<(f64, CategorySet)> = None;
        for _ in 0..present.len() - 1 {
            let mut step: Option<(f64, u32)> = None;
            for &c in present.iter().filter(|&&c| !chosen.contains(c)) {
                let cand = [left[0] + per[c as usize][0], left[1] + per[c as usize][1]];
                let right = [total[0] - cand[0], total[1] - cand[1]];
                let imp = weighted_gini(cand, right);
                if step.is_none_or(|(b, _)| imp < b) {
                    step = Some((imp, c));
                }
            }
            let (imp, c) = step.expect("at least one category remains");
            chosen.insert(c);
            left = [left[0] + per[c as usize][0], left[1] + per[c as usize][1]];
            let nl = left[0] + left[1];
            let nr = total[0] + total[1] - nl;
            if nl >= min_leaf && nr >= min_leaf && best.as_ref().is_none_or(|(b, _)| imp < *b) {
                best = Some((imp, chosen.clone()));
            }
        }
        best.map(|(imp, set)| (imp, SplitRule::InSet { set, seen }))
    }
}

fn grow_tree(data: &TrainData, params: ForestParams, seed: u64) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.labels.len();
    let sample: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut grower = Grower {
        data,
        params,
        features_per_split: params.resolved_features_per_split(data.columns.len()),
        nodes: Vec::new(),
    };
    grower.grow(sample, 0, &mut rng);
    DecisionTree {
        nodes: grower.nodes,
    }
}

/// Grows the forest without the class-balance precondition.
pub(crate) fn grow_forest(dataset: &Dataset, params: ForestParams, seed: u64) -> ForestModel {
    let data = TrainData::new(dataset);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| grow_tree(&data, params, derive_seed(seed, t as u64)))
        .collect();
    ForestModel {
        schema: dataset.schema.clone(),
        params,
        train_seed: seed,
        trees,
    }
}

/// Trains a forest; identical (dataset, params, seed) gives an identical model.
pub fn train_forest(
    dataset: &Dataset,
    params: ForestParams,
    seed: u64,
) -> Result<ForestModel, ModelError> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let counts = dataset.class_counts();
    if let Some(only) = counts.iter().position(|&c| c == dataset.len()) {
        return Err(ModelError::SingleClass(dataset.len(), only));
    }
    Ok(grow_forest(dataset, params, seed))
}

/// Fraction of `rows` whose label equals the model's prediction.
pub fn accuracy(model: &dyn Classifier, rows: &[Instance]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|r| r.label == Some(model.predict(r)))
        .count();
    hits as f64 / rows.len() as f64
}

// ---------------------------------------------------------------------------
// Model file: magic `CFXF1`, little-endian throughout.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"CFXF1";

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn set(&mut self, s: &CategorySet) {
        self.u32(s.0.len() as u32);
        for w in &s.0 {
            self.u64(*w);
        }
    }
}

struct In<'a> {
    buf: &'a [u8],
    at: usize,
}

impl In<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn set(&mut self) -> Result<CategorySet, ModelError> {
        let n = self.u32()? as usize;
        if n > 1 << 16 {
            return Err(ModelError::Corrupt("oversized category set".into()));
        }
        (0..n).map(|_| self.u64()).collect::<Result<_, _>>().map(CategorySet)
    }
}

/// The schema facts a model depends on, written into the model file.
fn schema_signature(schema: &DatasetSchema) -> Vec<u8> {
    let mut o = Out(Vec::new());
    o.u32(schema.features.len() as u32);
    for f in &schema.features {
        o.str(&f.name);
        match &f.kind {
            FeatureKind::Categorical { values } => {
                o.u8(0);
                o.u32(values.len() as u32);
                for v in values {
                    o.str(v);
                }
            }
            FeatureKind::Continuous { min, max, integer } => {
                o.u8(1);
                o.f64(*min);
                o.f64(*max);
                o.u8(u8::from(*integer));
            }
        }
    }
    o.str(&schema.label.name);
    o.str(&schema.label.classes[0]);
    o.str(&schema.label.classes[1]);
    o.u8(schema.label.desired as u8);
    o.0
}

impl ForestModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut o = Out(MAGIC.to_vec());
        let sig = schema_signature(&self.schema);
        o.u32(sig.len() as u32);
        o.0.extend_from_slice(&sig);
        o.u32(self.params.n_trees as u32);
        o.u32(self.params.max_depth as u32);
        o.u32(self.params.min_leaf as u32);
        o.u32(self.params.features_per_split.map_or(0, |v| v as u32));
        o.u8(u8::from(self.params.bootstrap));
        o.u64(self.train_seed);
        o.u32(self.trees.len() as u32);
        for tree in &self.trees {
            o.u32(tree.nodes.len() as u32);
            for node in &tree.nodes {
                match node {
                    Node::Leaf { counts } => {
                        o.u8(0);
                        o.u32(counts[0]);
                        o.u32(counts[1]);
                    }
                    Node::Split {
                        feature,
                        rule,
                        left,
                        right,
                        left_count,
                        right_count,
                    } => {
                        o.u8(1);
                        o.u32(*feature as u32);
                        o.u32(*left);
                        o.u32(*right);
                        o.u32(*left_count);
                        o.u32(*right_count);
                        match rule {
                            SplitRule::Threshold(t) => {
                                o.u8(0);
                                o.f64(*t);
                            }
                            SplitRule::InSet { set, seen } => {
                                o.u8(1);
                                o.set(set);
                                o.set(seen);
                            }
                        }
                    }
                }
            }
        }
        o.0
    }

    /// Decodes a model file written by [`ForestModel::to_bytes`], checking it
    /// against the schema the caller intends to use it with.
    pub fn from_bytes(bytes: &[u8], schema: &DatasetSchema) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut r = In {
            buf: bytes,
            at: MAGIC.len(),
        };
        let sig_len = r.u32()? as usize;
        let sig = r.take(sig_len)?;
        if sig != schema_signature(schema).as_slice() {
            return Err(ModelError::SchemaMismatch(format!(
                "feature layout of `{}` differs from the one stored in the model",
                schema.name
            )));
        }
        let n_trees = r.u32()? as usize;
        let max_depth = r.u32()? as usize;
        let min_leaf = r.u32()? as usize;
        let fps = r.u32()? as usize;
        let bootstrap = r.u8()? != 0;
        let train_seed = r.u64()?;
        let params = ForestParams {
            n_trees,
            max_depth,
            min_leaf,
            features_per_split: (fps != 0).then_some(fps),
            bootstrap,
        };
        let count = r.u32()? as usize;
        if count != n_trees {
            return Err(ModelError::Corrupt(format!(
                "header declares {n_trees} trees, body has {count}"
            )));
        }
        let m = schema.features.len();
        let mut trees = Vec::with_capacity(count);
        for _ in 0..count {
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
            for _ in 0..n_nodes {
                let node = match r.u8()? {
                    0 => Node::Leaf {
                        counts: [r.u32()?, r.u32()?],
                    },
                    1 => {
                        let feature = r.u32()? as usize;
                        let (left, right) = (r.u32()?, r.u32()?);
                        let (left_count, right_count) = (r.u32()?, r.u32()?);
                        let rule = match r.u8()? {
                            0 => SplitRule::Threshold(r.f64()?),
                            1 => SplitRule::InSet {
                                set: r.set()?,
                                seen: r.set()?,
                            },
                            t => return Err(ModelError::Corrupt(format!("unknown rule tag {t}"))),
                        };
                        if feature >= m || left as usize >= n_nodes || right as usize >= n_nodes {
                            return Err(ModelError::Corrupt("node index out of range".into()));
                        }
                        Node::Split {
                            feature,
                            rule,
                            left,
                            right,
                            left_count,
                            right_count,
                        }
                    }
                    t => return Err(ModelError::Corrupt(format!("unknown node tag {t}"))),
                };
                nodes.push(node);
            }
            // Children always follow their parent in growth order, which also rules out cycles.
            for (i, node) in nodes.iter().enumerate() {
                if let Node::Split { left, right, .. } = node {
                    if *left as usize <= i || *right as usize <= i {
                        return Err(ModelError::Corrupt("child precedes parent".into()));
                    }
                }
                if let Node::Leaf { counts: [0, 0] } = node {
                    return Err(ModelError::Corrupt("empty leaf".into()));
                }
            }
            if nodes.is_empty() {
                return Err(ModelError::Corrupt("empty tree".into()));
            }
            trees.push(DecisionTree { nodes });
        }
        if r.at != bytes.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        Ok(ForestModel {
            schema: schema.clone(),
            params,
            train_seed,
            trees,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Self, ModelError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, schema)
    }
}
