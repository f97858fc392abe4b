//! Model-agnostic diverse counterfactual search.
//!
//! A seeded genetic search perturbs the original instance, scoring candidates
//! by a hinge validity term plus proximity. Valid candidates are collected in
//! an archive, sparsified, and the final `k` are picked greedily to trade
//! proximity against set diversity.

use std::collections::{BTreeSet, HashSet};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Classifier;
use crate::tabular::{self, Dataset, DatasetSchema, FeatureKind, Instance, Value};

/// Scale used in place of a zero median absolute deviation.
pub const MAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CfError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("the original instance is already classified in the desired class")]
    AlreadyDesired,
    #[error("found {found} valid counterfactuals, {requested} requested")]
    NotEnoughValid {
        found: usize,
        requested: usize,
        partial: Box<CounterfactualSet>,
    },
    #[error("counterfactual file: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k: usize,
    pub population: usize,
    pub generations: usize,
    pub w_validity: f64,
    pub w_proximity: f64,
    pub w_diversity: f64,
    pub seed: u64,
    pub immutable_features: BTreeSet<String>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 5,
            population: 200,
            generations: 50,
            w_validity: 1.0,
            w_proximity: 0.5,
            w_diversity: 1.0,
            seed: 0,
            immutable_features: BTreeSet::new(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, schema: &DatasetSchema) -> Result<(), CfError> {
        if self.k == 0 {
            return Err(CfError::InvalidConfig("k must be at least 1".into()));
        }
        for (name, w) in [
            ("w_validity", self.w_validity),
            ("w_proximity", self.w_proximity),
            ("w_diversity", self.w_diversity),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(CfError::InvalidConfig(format!("{name} must be a nonnegative number")));
            }
        }
        if self.population < 2 * self.k {
            return Err(CfError::InvalidConfig(format!(
                "population ({}) must be at least 2k ({})",
                self.population,
                2 * self.k
            )));
        }
        if let Some(unknown) = self
            .immutable_features
            .iter()
            .find(|n| schema.feature_index(n).is_none())
        {
            return Err(CfError::InvalidConfig(format!("unknown immutable feature `{unknown}`")));
        }
        Ok(())
    }
}

/// Per-feature scales: the floored MAD for continuous features, `None` for categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScales {
    pub names: Vec<String>,
    pub mad: Vec<Option<f64>>,
}

impl FeatureScales {
    pub fn mad_of(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == name)?;
        self.mad[i]
    }

    pub fn n_features(&self) -> usize {
        self.mad.len()
    }

    /// Unnormalized contribution of feature `f` to the distance between `a` and `b`.
    pub fn term(&self, f: usize, a: &Value, b: &Value) -> f64 {
        match (self.mad[f], a, b) {
            (Some(mad), Value::Num(x), Value::Num(y)) => (x - y).abs() / mad,
            _ => f64::from(u8::from(a != b)),
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median absolute deviation of `column`, floored at [`MAD_FLOOR`].
pub fn mad(column: &[f64]) -> f64 {
    let mut xs = column.to_vec();
    let m = median(&mut xs);
    let mut dev: Vec<f64> = column.iter().map(|x| (x - m).abs()).collect();
    let d = median(&mut dev);
    if d > 0.0 {
        d
    } else {
        MAD_FLOOR
    }
}

pub fn compute_scales(dataset: &Dataset) -> FeatureScales {
    let schema = &dataset.schema;
    let mad = schema
        .features
        .iter()
        .enumerate()
        .map(|(f, spec)| match spec.kind {
            FeatureKind::Continuous { .. } => {
                let column: Vec<f64> = dataset
                    .rows
                    .iter()
                    .filter_map(|r| r.values[f].as_num())
                    .collect();
                Some(mad(&column))
            }
            FeatureKind::Categorical { .. } => None,
        })
        .collect();
    FeatureScales {
        names: schema.features.iter().map(|f| f.name.clone()).collect(),
        mad,
    }
}

/// Mean over features of |a−b|/MAD (continuous) or the 0/1 mismatch (categorical).
pub fn distance(a: &Instance, b: &Instance, scales: &FeatureScales) -> f64 {
    let m = scales.n_features();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = (0..m).map(|f| scales.term(f, &a.values[f], &b.values[f])).sum();
    total / m as f64
}

/// Mean pairwise distance over unordered pairs; 0 for fewer than two instances.
pub fn diversity_score(cfs: &[Instance], scales: &FeatureScales) -> f64 {
    let n = cfs.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += distance(&cfs[i], &cfs[j], scales);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    pub original: Instance,
    pub counterfactuals: Vec<Instance>,
    pub distances: Vec<f64>,
    /// Whether each counterfactual re-predicts to the desired class.
    pub valid: Vec<bool>,
    pub diversity: f64,
    pub changed_features: Vec<Vec<String>>,
    pub desired: usize,
}

impl CounterfactualSet {
    /// Computes distances, validity flags and changed features for a given set.
    pub fn assemble(
        model: &dyn Classifier,
        scales: &FeatureScales,
        original: Instance,
        counterfactuals: Vec<Instance>,
    ) -> Self {
        let schema = model.schema();
        let desired = schema.label.desired;
        let distances = counterfactuals
            .iter()
            .map(|c| distance(c, &original, scales))
            .collect();
        let valid = counterfactuals
            .iter()
            .map(|c| model.predict(c) == desired)
            .collect();
        let changed_features = counterfactuals
            .iter()
            .map(|c| {
                c.changed_from(&original)
                    .into_iter()
                    .map(|f| schema.features[f].name.clone())
                    .collect()
            })
            .collect();
        let diversity = diversity_score(&counterfactuals, scales);
        Self {
            original,
            counterfactuals,
            distances,
            valid,
            diversity,
            changed_features,
            desired,
        }
    }

    pub fn len(&self) -> usize {
        self.counterfactuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counterfactuals.is_empty()
    }

    /// Original row first, then the counterfactuals.
    pub fn to_csv(&self, schema: &DatasetSchema) -> String {
        let rows: Vec<Instance> = std::iter::once(self.original.clone())
            .chain(self.counterfactuals.iter().cloned())
            .collect();
        tabular::csv_string(schema, &rows)
    }

    /// Reads the layout written by [`CounterfactualSet::to_csv`]. Missing labels
    /// default to the undesired class for the original and the desired class
    /// for the counterfactuals.
    pub fn read_csv<R: Read>(
        reader: R,
        model: &dyn Classifier,
        scales: &FeatureScales,
    ) -> Result<Self, CfError> {
        let schema = model.schema();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| CfError::Input(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let names = schema.feature_names();
        if header.len() < names.len() || header[..names.len()] != names[..] {
            return Err(CfError::Input(format!(
                "header must start with {names:?}, found {header:?}"
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CfError::Input(e.to_string()))?;
            let values: Vec<&str> = rec.iter().take(names.len()).collect();
            let label = rec.get(names.len()).filter(|s| !s.is_empty());
            let mut inst = schema
                .instance_from_strs(&values, label)
                .map_err(|e| CfError::Input(format!("row {}: {e}", i + 1)))?;
            if inst.label.is_none() {
                inst.label = Some(if i == 0 {
                    schema.label.undesired()
                } else {
                    schema.label.desired
                });
            }
            rows.push(inst);
        }
        if rows.is_empty() {
            return Err(CfError::Input("no original row".into()));
        }
        let original = rows.remove(0);
        Ok(Self::assemble(model, scales, original, rows))
    }

    /// Human-readable JSON report with distances and changed features.
    pub fn report(&self, schema: &DatasetSchema) -> serde_json::Value {
        let row = |x: &Instance| {
            let mut map = serde_json::Map::new();
            for (name, v) in schema.feature_names().iter().zip(schema.format_instance(x)) {
                map.insert(name.to_string(), serde_json::Value::String(v));
            }
            serde_json::Value::Object(map)
        };
        serde_json::json!({
            "original": row(&self.original),
            "desired_class": schema.label.classes[self.desired],
            "diversity": self.diversity,
            "counterfactuals": self.counterfactuals.iter().enumerate().map(|(i, c)| serde_json::json!({
                "values": row(c),
                "distance": self.distances[i],
                "valid": self.valid[i],
                "changed_features": self.changed_features[i],
            })).collect::<Vec<_>>(),
        })
    }
}

/// Greedily reverts changed features to the original, cheapest first, keeping
/// each reversion only if the prediction stays in the desired class.
pub fn sparsify(
    cf: &Instance,
    original: &Instance,
    model: &dyn Classifier,
    scales: &FeatureScales,
) -> Instance {
    let desired = model.schema().label.desired;
    let mut changed = cf.changed_from(original);
    let cost = |f: usize| scales.term(f, &cf.values[f], &original.values[f]);
    changed.sort_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)));
    let mut current = cf.clone();
    for f in changed {
        let mut trial = current.clone();
        trial.values[f] = original.values[f];
        if model.predict(&trial) == desired {
            current = trial;
        }
    }
    current
}

#[derive(Clone)]
struct Member {
    x: Instance,
    valid: bool,
    fitness: f64,
}

struct Search<'a> {
    model: &'a dyn Classifier,
    original: &'a Instance,
    scales: &'a FeatureScales,
    config: &'a SearchConfig,
    mutable: Vec<usize>,
    desired: usize,
    rng: ChaCha8Rng,
}

impl Search<'_> {
    fn schema(&self) -> &DatasetSchema {
        self.model.schema()
    }

    fn evaluate(&self, x: Instance) -> Member {
        let p = self.model.proba_of(&x, self.desired);
        let valid = self.model.predict(&x) == self.desired;
        let hinge = (0.5 - p).max(0.0);
        let fitness = self.config.w_validity * hinge
            + self.config.w_proximity * distance(&x, self.original, self.scales);
        Member { x, valid, fitness }
    }

    /// Replaces feature `f` of `x` with a different legal value when one exists.
    fn perturb(&mut self, x: &mut Instance, f: usize) {
        let current = x.values[f];
        let new = match &self.schema().features[f].kind {
            FeatureKind::Categorical { values } => {
                let n = values.len() as u32;
                if n < 2 {
                    return;
                }
                let c = current.as_cat().unwrap_or(0);
                let step = self.rng.gen_range(1..n);
                Value::Cat((c + step) % n)
            }
            &FeatureKind::Continuous { min, max, integer } => {
                let mut v = current;
                for _ in 0..8 {
                    let mut y = if max > min { self.rng.gen_range(min..=max) } else { min };
                    if integer {
                        y = y.round().clamp(min.ceil(), max.floor());
                    }
                    v = Value::Num(y);
                    if v != current {
                        break;
                    }
                }
                v
            }
        };
        x.values[f] = new;
    }

    fn random_mutable(&mut self) -> usize {
        self.mutable[self.rng.gen_range(0..self.mutable.len())]
    }

    fn initial(&mut self) -> Instance {
        let mut x = self.original.clone();
        let max_changes = self.mutable.len().min(3);
        let n = self.rng.gen_range(1..=max_changes);
        let mut features = self.mutable.clone();
        features.shuffle(&mut self.rng);
        for &f in &features[..n] {
            self.perturb(&mut x, f);
        }
        x
    }

    fn tournament<'m>(&mut self, pool: &'m [Member]) -> &'m Member {
        let a = &pool[self.rng.gen_range(0..pool.len())];
        let b = &pool[self.rng.gen_range(0..pool.len())];
        if better(a, b) {
            a
        } else {
            b
        }
    }

    fn child(&mut self, p1: &Instance, p2: &Instance) -> Instance {
        let mut x = self.original.clone();
        for i in 0..self.mutable.len() {
            let f = self.mutable[i];
            x.values[f] = if self.rng.gen_bool(0.5) { p1.values[f] } else { p2.values[f] };
        }
        let r: f64 = self.rng.gen();
        if r < 0.4 {
            let f = self.random_mutable();
            self.perturb(&mut x, f);
        } else if r < 0.6 {
            let changed = x.changed_from(self.original);
            if !changed.is_empty() {
                let f = changed[self.rng.gen_range(0..changed.len())];
                x.values[f] = self.original.values[f];
            }
        }
        if x.same_features(self.original) {
            let f = self.random_mutable();
            self.perturb(&mut x, f);
        }
        x
    }

    fn run(&mut self) -> Vec<Member> {
        let size = self.config.population;
        let mut archive: Vec<Member> = Vec::new();
        let mut archived: HashSet<Vec<u64>> = HashSet::new();
        let mut remember = |m: &Member, archive: &mut Vec<Member>| {
            if m.valid && archived.insert(m.x.feature_key()) {
                archive.push(m.clone());
            }
        };

        let mut population: Vec<Member> = Vec::with_capacity(size);
        for _ in 0..size {
            let x = self.initial();
            let m = self.evaluate(x);
            remember(&m, &mut archive);
            population.push(m);
        }

        for _ in 0..self.config.generations {
            population.sort_by(rank_order);
            let mut seen = HashSet::new();
            population.retain(|m| seen.insert(m.x.feature_key()));
            population.truncate((size / 2).max(2));
            let elites = population.clone();
            while population.len() < size {
                let p1 = self.tournament(&elites).x.clone();
                let p2 = self.tournament(&elites).x.clone();
                let x = self.child(&p1, &p2);
                let m = self.evaluate(x);
                remember(&m, &mut archive);
                population.push(m);
            }
        }
        archive
    }
}

fn better(a: &Member, b: &Member) -> bool {
    rank_order(a, b) != std::cmp::Ordering::Greater
}

/// Valid first, then by ascending fitness.
fn rank_order(a: &Member, b: &Member) -> std::cmp::Ordering {
    b.valid
        .cmp(&a.valid)
        .then_with(|| a.fitness.total_cmp(&b.fitness))
}

/// Picks `k` candidates greedily minimizing
/// `w_proximity · mean distance to original − w_diversity · diversity`.
fn select_diverse(
    candidates: &[Instance],
    original: &Instance,
    scales: &FeatureScales,
    config: &SearchConfig,
) -> Vec<usize> {
    let to_orig: Vec<f64> = candidates.iter().map(|c| distance(c, original, scales)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut prox_sum = 0.0;
    let mut pair_sum = 0.0;
    while chosen.len() < config.k && chosen.len() < candidates.len() {
        let n = chosen.len() + 1;
        let mut best: Option<(f64, usize, f64)> = None;
        for (c, cand) in candidates.iter().enumerate() {
            if chosen.contains(&c) {
                continue;
            }
            let added: f64 = chosen.iter().map(|&s| distance(&candidates[s], cand, scales)).sum();
            let diversity = if n < 2 {
                0.0
            } else {
                (pair_sum + added) / (n * (n - 1) / 2) as f64
            };
            let objective = config.w_proximity * (prox_sum + to_orig[c]) / n as f64
                - config.w_diversity * diversity;
            if best.is_none_or(|(b, _, _)| objective < b) {
                best = Some((objective, c, added));
            }
        }
        let (_, c, added) = best.expect("a candidate remains");
        prox_sum += to_orig[c];
        pair_sum += added;
        chosen.push(c);
    }
    chosen
}

/// Generates up to `config.k` diverse, sparse, valid counterfactuals.
///
/// Returns [`CfError::NotEnoughValid`] carrying the partial set when the search
/// budget yields fewer than `k` distinct valid candidates.
pub fn generate_counterfactuals(
    model: &dyn Classifier,
    original: &Instance,
    config: &SearchConfig,
    scales: &FeatureScales,
) -> Result<CounterfactualSet, CfError> {
    let schema = model.schema();
    config.validate(schema)?;
    let desired = schema.label.desired;
    if model.predict(original) == desired {
        return Err(CfError::AlreadyDesired);
    }
    let mut original = original.clone();
    original.label = Some(schema.label.undesired());

    let mutable: Vec<usize> = schema
        .features
        .iter()
        .enumerate()
        .filter(|(_, f)| f.mutable && !config.immutable_features.contains(&f.name))
        .map(|(i, _)| i)
        .collect();

    let mut archive = if mutable.is_empty() {
        Vec::new()
    } else {
        let mut search = Search {
            model,
            original: &original,
            scales,
            config,
            mutable,
            desired,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        search.run()
    };
    archive.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
    archive.truncate(config.population);

    let mut seen = HashSet::new();
    let candidates: Vec<Instance> = archive
        .iter()
        .map(|m| sparsify(&m.x, &original, model, scales))
        .filter(|x| seen.insert(x.feature_key()))
        .collect();
    let picked = select_diverse(&candidates, &original, scales, config);
    let cfs: Vec<Instance> = picked
        .into_iter()
        .map(|i| candidates[i].clone().with_label(desired))
        .collect();

    let set = CounterfactualSet::assemble(model, scales, original, cfs);
    if set.len() < config.k {
        return Err(CfError::NotEnoughValid {
            found: set.len(),
            requested: config.k,
            partial: Box::new(set),
        });
    }
    Ok(set)
}
