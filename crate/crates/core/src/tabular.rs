//! Dataset schema, CSV ingestion, row validation and prompt-oriented serialization.
//!
//! Instances store one [`Value`] per schema feature, in schema order. Categorical
//! values are kept as indices into the feature's allowed-value list, so equality
//! and hashing are cheap and a schema is always needed to render a row as text.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed schema document: {0}")]
    SchemaSyntax(String),
    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),
    #[error("feature name must be non-empty")]
    EmptyFeatureName,
    #[error("categorical feature `{0}` declares no allowed values")]
    NoCategories(String),
    #[error("feature `{feature}`: malformed numeric range `{text}` (expected `lo..hi` with lo <= hi)")]
    BadRange { feature: String, text: String },
    #[error("feature `{feature}`: {message}")]
    BadFeature { feature: String, message: String },
    #[error("label: {0}")]
    BadLabel(String),
    #[error("header mismatch: expected columns {expected:?}, found {found:?}")]
    HeaderMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("row {row}: feature `{feature}`: {message}")]
    InvalidValue {
        row: usize,
        feature: String,
        message: String,
    },
    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = TabularError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical {
        values: Vec<String>,
    },
    Continuous {
        min: f64,
        max: f64,
        /// Values are whole numbers; search proposals are rounded.
        integer: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub mutable: bool,
}

impl FeatureSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    /// Index of a categorical value, if the feature is categorical and allows it.
    pub fn category_index(&self, value: &str) -> Option<u32> {
        match &self.kind {
            FeatureKind::Categorical { values } => {
                values.iter().position(|v| v == value).map(|i| i as u32)
            }
            FeatureKind::Continuous { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub classes: [String; 2],
    /// Index into `classes` of the outcome users want.
    pub desired: usize,
}

impl LabelSpec {
    pub fn undesired(&self) -> usize {
        1 - self.desired
    }

    pub fn class_index(&self, text: &str) -> Option<usize> {
        let text = text.trim();
        self.classes.iter().position(|c| c == text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub features: Vec<FeatureSpec>,
    pub label: LabelSpec,
    pub description: String,
    /// Short phrase naming the decision system, used inside prompts.
    pub task: String,
}

/// One feature value. Categorical values are indices into the allowed-value list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Cat(u32),
    Num(f64),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<u32> {
        match self {
            Value::Cat(c) => Some(*c),
            Value::Num(_) => None,
        }
    }

    fn key_bits(&self) -> u64 {
        match self {
            Value::Cat(c) => *c as u64,
            // -0.0 and 0.0 compare equal, so they must hash equal too.
            Value::Num(x) => (if *x == 0.0 { 0.0 } else { *x }).to_bits(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub values: Vec<Value>,
    /// Class index into `LabelSpec::classes`.
    pub label: Option<usize>,
}

impl Instance {
    pub fn new(values: Vec<Value>) -> Self {
        Self {
            values,
            label: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    /// Hashable identity of the feature vector (label excluded).
    pub fn feature_key(&self) -> Vec<u64> {
        self.values.iter().map(Value::key_bits).collect()
    }

    pub fn same_features(&self, other: &Instance) -> bool {
        self.values == other.values
    }

    /// Indices of features whose value differs from `other`.
    pub fn changed_from(&self, other: &Instance) -> Vec<usize> {
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub rows: Vec<Instance>,
}

// ---------------------------------------------------------------------------
// Schema document
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDoc {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    task: Option<String>,
    #[serde(default)]
    feature: Vec<FeatureDoc>,
    label: LabelDoc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDoc {
    name: String,
    kind: String,
    values: Option<String>,
    range: Option<String>,
    #[serde(default = "default_true")]
    mutable: bool,
    #[serde(default)]
    integer: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelDoc {
    name: String,
    classes: String,
    desired: String,
}

fn default_true() -> bool {
    true
}

fn split_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_range(feature: &str, text: &str) -> Result<(f64, f64)> {
    let bad = || TabularError::BadRange {
        feature: feature.to_string(),
        text: text.to_string(),
    };
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<DatasetSchema> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TabularError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_schema(&text)
}

/// Parses a schema document (see `load_schema`).
pub fn parse_schema(text: &str) -> Result<DatasetSchema> {
    let doc: SchemaDoc =
        toml::from_str(text).map_err(|e| TabularError::SchemaSyntax(e.to_string()))?;

    let mut seen = HashSet::new();
    let mut features = Vec::with_capacity(doc.feature.len());
    for f in doc.feature {
        let name = f.name.trim().to_string();
        if name.is_empty() {
            return Err(TabularError::EmptyFeatureName);
        }
        if !seen.insert(name.clone()) {
            return Err(TabularError::DuplicateFeature(name));
        }
        let kind = match f.kind.trim() {
            "categorical" => {
                if f.range.is_some() {
                    return Err(TabularError::BadFeature {
                        feature: name,
                        message: "categorical feature cannot declare a range".into(),
                    });
                }
                let values = split_list(f.values.as_deref().unwrap_or(""));
                if values.is_empty() {
                    return Err(TabularError::NoCategories(name));
                }
                let mut uniq = HashSet::new();
                if let Some(dup) = values.iter().find(|v| !uniq.insert(v.as_str())) {
                    return Err(TabularError::BadFeature {
                        feature: name,
                        message: format!("value `{dup}` listed twice"),
                    });
                }
                FeatureKind::Categorical { values }
            }
            "continuous" => {
                if f.values.is_some() {
                    return Err(TabularError::BadFeature {
                        feature: name,
                        message: "continuous feature cannot declare values".into(),
                    });
                }
                let range = f.range.as_deref().ok_or_else(|| TabularError::BadRange {
                    feature: name.clone(),
                    text: String::new(),
                })?;
                let (min, max) = parse_range(&name, range)?;
                FeatureKind::Continuous {
                    min,
                    max,
                    integer: f.integer,
                }
            }
            other => {
                return Err(TabularError::BadFeature {
                    feature: name,
                    message: format!("unknown kind `{other}` (expected categorical|continuous)"),
                })
            }
        };
        features.push(FeatureSpec {
            name,
            kind,
            mutable: f.mutable,
        });
    }

    let label_name = doc.label.name.trim().to_string();
    if label_name.is_empty() {
        return Err(TabularError::BadLabel("name must be non-empty".into()));
    }
    if seen.contains(&label_name) {
        return Err(TabularError::BadLabel(format!(
            "`{label_name}` is also a feature name"
        )));
    }
    let classes = split_list(&doc.label.classes);
    if classes.len() != 2 || classes[0] == classes[1] {
        return Err(TabularError::BadLabel(format!(
            "exactly two distinct classes required, got {classes:?}"
        )));
    }
    let desired = classes
        .iter()
        .position(|c| c == doc.label.desired.trim())
        .ok_or_else(|| {
            TabularError::BadLabel(format!(
                "desired class `{}` is not one of {classes:?}",
                doc.label.desired
            ))
        })?;

    Ok(DatasetSchema {
        name: doc.name,
        features,
        label: LabelSpec {
            name: label_name,
            classes: [classes[0].clone(), classes[1].clone()],
            desired,
        },
        description: doc.description.trim().to_string(),
        task: doc.task.unwrap_or_else(|| "ML-system".to_string()),
    })
}

/// Canonical text form of a number: integers without a fractional part.
pub fn format_number(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl DatasetSchema {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    /// Feature names followed by the label name.
    pub fn header(&self) -> Vec<String> {
        self.features
            .iter()
            .map(|f| f.name.clone())
            .chain(std::iter::once(self.label.name.clone()))
            .collect()
    }

    /// Parses and range-checks the text value of feature `index`.
    pub fn parse_value(&self, index: usize, text: &str) -> std::result::Result<Value, String> {
        let text = text.trim();
        let spec = &self.features[index];
        match &spec.kind {
            FeatureKind::Categorical { values } => values
                .iter()
                .position(|v| v == text)
                .map(|i| Value::Cat(i as u32))
                .ok_or_else(|| {
                    format!("value `{text}` not in allowed set {{{}}}", values.join(", "))
                }),
            FeatureKind::Continuous { min, max, integer } => {
                let x: f64 = text
                    .parse()
                    .map_err(|_| format!("unparseable number `{text}`"))?;
                if !x.is_finite() {
                    return Err(format!("non-finite number `{text}`"));
                }
                if x < *min || x > *max {
                    return Err(format!(
                        "{text} outside range {}..{}",
                        format_number(*min),
                        format_number(*max)
                    ));
                }
                if *integer && x.fract() != 0.0 {
                    return Err(format!("{text} is not a whole number"));
                }
                Ok(Value::Num(x))
            }
        }
    }

    pub fn format_value(&self, index: usize, value: &Value) -> String {
        match (&self.features[index].kind, value) {
            (FeatureKind::Categorical { values }, Value::Cat(c)) => values
                .get(*c as usize)
                .cloned()
                .unwrap_or_else(|| format!("<unknown {c}>")),
            (_, Value::Num(x)) => format_number(*x),
            (_, Value::Cat(c)) => format!("<category {c}>"),
        }
    }

    /// Checks that `instance` has exactly one legal value per feature.
    pub fn validate(&self, instance: &Instance) -> std::result::Result<(), String> {
        if instance.values.len() != self.features.len() {
            return Err(format!(
                "expected {} values, found {}",
                self.features.len(),
                instance.values.len()
            ));
        }
        for (spec, value) in self.features.iter().zip(&instance.values) {
            match (&spec.kind, value) {
                (FeatureKind::Categorical { values }, Value::Cat(c)) => {
                    if *c as usize >= values.len() {
                        return Err(format!("`{}`: category index {c} out of range", spec.name));
                    }
                }
                (FeatureKind::Continuous { min, max, .. }, Value::Num(x)) => {
                    if !x.is_finite() || x < min || x > max {
                        return Err(format!("`{}`: {x} outside range", spec.name));
                    }
                }
                _ => return Err(format!("`{}`: value kind does not match feature", spec.name)),
            }
        }
        if let Some(label) = instance.label {
            if label > 1 {
                return Err(format!("label index {label} out of range"));
            }
        }
        Ok(())
    }

    /// Builds an instance from text values given in schema order.
    pub fn instance_from_strs<S: AsRef<str>>(
        &self,
        values: &[S],
        label: Option<&str>,
    ) -> std::result::Result<Instance, String> {
        if values.len() != self.features.len() {
            return Err(format!(
                "expected {} values, found {}",
                self.features.len(),
                values.len()
            ));
        }
        let values = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                self.parse_value(i, v.as_ref())
                    .map_err(|e| format!("`{}`: {e}", self.features[i].name))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let label = match label {
            Some(text) => Some(self.label.class_index(text).ok_or_else(|| {
                format!("label `{text}` is not one of {:?}", self.label.classes)
            })?),
            None => None,
        };
        Ok(Instance { values, label })
    }

    /// The instance's values as text, in schema order.
    pub fn format_instance(&self, instance: &Instance) -> Vec<String> {
        instance
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| self.format_value(i, v))
            .collect()
    }

    /// The "Dataset info" block embedded in prompts.
    pub fn dataset_info(&self) -> String {
        let mut out = String::new();
        if !self.description.is_empty() {
            out.push_str(&self.description);
            out.push('\n');
        }
        out.push_str("Columns:\n");
        for f in &self.features {
            match &f.kind {
                FeatureKind::Categorical { values } => {
                    let _ = writeln!(
                        out,
                        "- {} (categorical): one of {}",
                        f.name,
                        values.join(", ")
                    );
                }
                FeatureKind::Continuous { min, max, integer } => {
                    let _ = writeln!(
                        out,
                        "- {} (continuous{}): from {} to {}",
                        f.name,
                        if *integer { ", whole numbers" } else { "" },
                        format_number(*min),
                        format_number(*max)
                    );
                }
            }
        }
        let _ = write!(
            out,
            "- {} (label): {} or {}; the desired outcome is {}",
            self.label.name,
            self.label.classes[0],
            self.label.classes[1],
            self.label.classes[self.label.desired]
        );
        out
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| TabularError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(file, schema)
}

/// Reads a labeled CSV. Columns may appear in any order but must be exactly
/// the schema features plus the label.
pub fn read_dataset<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected = schema.header();

    let mut column_of = vec![usize::MAX; expected.len()];
    let mut matched = found.len() == expected.len();
    if matched {
        for (slot, name) in expected.iter().enumerate() {
            match found.iter().position(|f| f == name) {
                Some(col) => column_of[slot] = col,
                None => {
                    matched = false;
                    break;
                }
            }
        }
    }
    if !matched {
        return Err(TabularError::HeaderMismatch { expected, found });
    }
    let label_col = column_of[schema.n_features()];

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let mut values = Vec::with_capacity(schema.n_features());
        for (f, spec) in schema.features.iter().enumerate() {
            let text = record.get(column_of[f]).unwrap_or("");
            let value = schema
                .parse_value(f, text)
                .map_err(|message| TabularError::InvalidValue {
                    row,
                    feature: spec.name.clone(),
                    message,
                })?;
            values.push(value);
        }
        let label_text = record.get(label_col).unwrap_or("");
        let label =
            schema
                .label
                .class_index(label_text)
                .ok_or_else(|| TabularError::InvalidRow {
                    row,
                    message: format!(
                        "label `{label_text}` is not one of {:?}",
                        schema.label.classes
                    ),
                })?;
        rows.push(Instance {
            values,
            label: Some(label),
        });
    }
    Ok(Dataset {
        schema: schema.clone(),
        rows,
    })
}

/// Writes instances as RFC-4180 CSV with the schema header. Missing labels
/// are written as empty fields.
pub fn write_csv<W: std::io::Write>(
    writer: W,
    schema: &DatasetSchema,
    instances: &[Instance],
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(schema.header())?;
    for inst in instances {
        let mut record = schema.format_instance(inst);
        record.push(
            inst.label
                .map(|l| schema.label.classes[l].clone())
                .unwrap_or_default(),
        );
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| TabularError::Csv(e.into()))?;
    Ok(())
}

pub fn csv_string(schema: &DatasetSchema, instances: &[Instance]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, schema, instances).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Plain-text table of instances for prompts: a header line and one line per
/// instance. The label column is included when every instance carries a label.
pub fn serialize_instances(instances: &[Instance], schema: &DatasetSchema) -> String {
    let with_label = instances.iter().all(|i| i.label.is_some());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    if with_label {
        header.push(schema.label.name.clone());
    }
    w.write_record(&header).expect("in-memory write");
    for inst in instances {
        let mut record = schema.format_instance(inst);
        if with_label {
            record.push(schema.label.classes[inst.label.unwrap_or(0)].clone());
        }
        w.write_record(&record).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    let mut text = String::from_utf8(bytes).expect("csv output is utf-8");
    if text.ends_with('\n') {
        text.pop();
    }
    text
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|source| TabularError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        write_csv(std::io::BufWriter::new(file), &self.schema, &self.rows)
    }

    /// Count of rows per class index.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for row in &self.rows {
            if let Some(l) = row.label {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// True iff some row has exactly the instance's feature values (label ignored).
pub fn contains_instance(dataset: &Dataset, instance: &Instance) -> bool {
    dataset.rows.iter().any(|row| row.same_features(instance))
}

/// Hash-set view of a dataset's feature vectors for repeated membership tests.
#[derive(Debug, Clone, Default)]
pub struct MembershipIndex {
    keys: HashSet<Vec<u64>>,
}

impl MembershipIndex {
    pub fn new(dataset: &Dataset) -> Self {
        Self {
            keys: dataset.rows.iter().map(Instance::feature_key).collect(),
        }
    }

    pub fn contains(&self, instance: &Instance) -> bool {
        self.keys.contains(&instance.feature_key())
    }
}

/// Seeded shuffled split into (train, test) row indices; `train_fraction` of
/// the rows (rounded down) go to train.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * train_fraction).floor() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}
