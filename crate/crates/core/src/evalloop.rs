//! Closed-loop evaluation: the model regenerates a counterfactual from the
//! explanation alone, which is scored for validity, consistency with the
//! ranked causes and novelty, then aggregated across cases.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LanguageModel, Stage};
use crate::model::Classifier;
use crate::pipeline::{correction, render_prompt, Asker, CaseResult, Exchange, PipelineError, PromptContext, Strategy};
use crate::ruledsl::{rule_satisfied, validate_rules, ValidatedRule};
use crate::tabular::{self, DatasetSchema, Instance, MembershipIndex};

pub const TEMP_CSV: &str = "temp_csv.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const EVALUATION_HEADER: [&str; 3] = ["Rule", "Importance", "In explanation"];

/// Where the consistency flags come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Flags computed by evaluating each rule on the final example.
    #[default]
    Native,
    /// Flags read from the language model's evaluation table; importances stay native.
    LlmTable,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "native" => Ok(EvalMode::Native),
            "llm_table" => Ok(EvalMode::LlmTable),
            _ => Err(format!("unknown evaluation mode `{s}` (expected native or llm_table)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("case rules fail validation: {0}")]
    Rules(String),
    #[error("no records to aggregate")]
    Empty,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub rule: String,
    pub importance: usize,
    pub in_explanation: u8,
}

/// Rows in rank order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub rows: Vec<EvaluationRow>,
}

impl EvaluationTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(EVALUATION_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.rule.clone(), r.importance.to_string(), r.in_explanation.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Parses the `Rule,Importance,In explanation` layout.
    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .map(str::to_string)
            .collect();
        if header != EVALUATION_HEADER {
            return Err(format!("header must be `{}`, found `{}`", EVALUATION_HEADER.join(","), header.join(",")));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| format!("row {}: {e}", i + 1))?;
            let importance = rec[1]
                .parse()
                .map_err(|_| format!("row {}: importance `{}` is not a count", i + 1, &rec[1]))?;
            let in_explanation = match &rec[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(format!("row {}: `In explanation` must be 0 or 1, found `{other}`", i + 1)),
            };
            rows.push(EvaluationRow { rule: rec[0].to_string(), importance, in_explanation });
        }
        Ok(Self { rows })
    }

    pub fn flags(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.in_explanation).collect()
    }
}

/// One row per ranked rule; the flag is whether the rule holds on the final
/// example (observational rules never do).
pub fn build_evaluation_table(ranked: &[ValidatedRule], final_example: &Instance) -> EvaluationTable {
    let mut rules: Vec<&ValidatedRule> = ranked.iter().collect();
    rules.sort_by_key(|r| (r.rule.rank.unwrap_or(usize::MAX), r.rule.id));
    EvaluationTable {
        rows: rules
            .iter()
            .map(|r| EvaluationRow {
                rule: r.rule.prose.clone(),
                importance: r.rule.importance,
                in_explanation: u8::from(rule_satisfied(r, final_example)),
            })
            .collect(),
    }
}

pub fn check_validity(model: &dyn Classifier, final_example: &Instance) -> bool {
    model.predict(final_example) == model.schema().label.desired
}

fn csv_lines(answer: &str) -> Vec<&str> {
    let mut fenced = Vec::new();
    let mut in_fence = false;
    for line in answer.lines() {
        if line.trim_start().starts_with("```") {
            if in_fence {
                break;
            }
            in_fence = true;
            continue;
        }
        if in_fence {
            fenced.push(line);
        }
    }
    if fenced.is_empty() {
        answer.lines().collect()
    } else {
        fenced
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(line.as_bytes());
    rdr.records()
        .next()
        .and_then(Result::ok)
        .map(|r| r.iter().map(str::to_string).collect())
        .unwrap_or_default()
}

/// Reads the single data row following the schema header in a CSV answer.
pub fn parse_final_example(answer: &str, schema: &DatasetSchema) -> Result<Instance, String> {
    let names = schema.feature_names();
    let lines = csv_lines(answer);
    let header_at = lines
        .iter()
        .position(|l| {
            let fields = split_csv_line(l);
            fields.len() >= names.len() && fields[..names.len()] == names[..]
        })
        .ok_or_else(|| format!("no header line `{}` found", schema.header().join(",")))?;
    let header = split_csv_line(lines[header_at]);
    let with_label = match header.len() - names.len() {
        0 => false,
        1 if header[names.len()] == schema.label.name => true,
        _ => return Err(format!("unexpected columns in header `{}`", lines[header_at])),
    };
    let row = lines[header_at + 1..]
        .iter()
        .find(|l| !l.trim().is_empty())
        .ok_or("the header is not followed by a data row")?;
    let fields = split_csv_line(row);
    if fields.len() != header.len() {
        return Err(format!("expected {} fields, found {} in `{}`", header.len(), fields.len(), row.trim()));
    }
    let label = with_label.then(|| fields[names.len()].as_str());
    schema.instance_from_strs(&fields[..names.len()], label)
}

/// The `temp_csv.csv` contents: feature names and label, one data row.
pub fn temp_csv_text(schema: &DatasetSchema, final_example: &Instance) -> String {
    let x = final_example.clone().with_label(final_example.label.unwrap_or(schema.label.desired));
    tabular::csv_string(schema, &[x])
}

/// Asks for a final example from the original row, the explanation and the
/// dataset description only.
pub fn generate_final_example(
    backend: &dyn LanguageModel,
    schema: &DatasetSchema,
    original: &Instance,
    explanation: &str,
) -> Result<(Instance, Vec<Exchange>), PipelineError> {
    let mut asker = Asker::new(backend, None, 0.0);
    let x = final_example_with(&mut asker, schema, original, explanation)?;
    Ok((x, asker.exchanges))
}

fn final_example_with(
    asker: &mut Asker,
    schema: &DatasetSchema,
    original: &Instance,
    explanation: &str,
) -> Result<Instance, PipelineError> {
    if explanation.trim().is_empty() {
        return Err(PipelineError::Precondition("empty explanation".into()));
    }
    let mut ctx = PromptContext::new(schema, original, Strategy::ZeroShot);
    ctx.explanation = Some(explanation);
    let prompt = render_prompt(Stage::FinalExample, &ctx)?;
    ask_parsed(asker, Stage::FinalExample, prompt, |a| parse_final_example(a, schema))
}

fn ask_parsed<T>(
    asker: &mut Asker,
    stage: Stage,
    prompt: String,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, PipelineError> {
    let answer = asker.ask(stage, prompt.clone(), 1)?;
    match parse(&answer) {
        Ok(v) => Ok(v),
        Err(problem) => {
            log::warn!("{stage} answer rejected: {problem}");
            let retry = asker.ask(stage, correction(&prompt, &problem), 2)?;
            parse(&retry).map_err(|message| PipelineError::BadAnswer { stage, message })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub case_id: String,
    pub strategy: Strategy,
    pub k: usize,
    /// Values as dataset text, in schema order.
    pub final_example: Vec<String>,
    pub validity: bool,
    pub causes_identified: usize,
    pub causes_used: usize,
    /// Whether the rank-1/2/3 rule is used; `None` when the case has fewer rules.
    pub top_used: [Option<bool>; 3],
    pub in_data: bool,
    pub eval_mode: EvalMode,
}

impl ClosedLoopRecord {
    pub fn check(&self) -> Result<(), EvalError> {
        if self.causes_used > self.causes_identified {
            return Err(EvalError::InvalidRecord(format!(
                "case {}: causes used ({}) exceed causes identified ({})",
                self.case_id, self.causes_used, self.causes_identified
            )));
        }
        for (r, used) in self.top_used.iter().enumerate() {
            if used.is_some() != (r < self.causes_identified) {
                return Err(EvalError::InvalidRecord(format!(
                    "case {}: rank {} flag inconsistent with {} causes",
                    self.case_id,
                    r + 1,
                    self.causes_identified
                )));
            }
        }
        Ok(())
    }

    /// Metric rows in the layout of a single-case report.
    pub fn metric_rows(&self) -> Vec<(&'static str, String)> {
        let flag = |v: Option<bool>| v.map_or("NA".to_string(), |b| u8::from(b).to_string());
        let title = |b: bool| if b { "True" } else { "False" }.to_string();
        vec![
            ("Validity", title(self.validity)),
            ("Causes Identified", self.causes_identified.to_string()),
            ("Causes used", self.causes_used.to_string()),
            ("1st Cause used", flag(self.top_used[0])),
            ("2nd Cause used", flag(self.top_used[1])),
            ("3rd Cause used", flag(self.top_used[2])),
            ("In the data", title(self.in_data)),
        ]
    }
}

fn record_from(
    case: &CaseResult,
    schema: &DatasetSchema,
    final_example: &Instance,
    validity: bool,
    table: &EvaluationTable,
    in_data: bool,
    eval_mode: EvalMode,
) -> ClosedLoopRecord {
    let flags = table.flags();
    let top = |r: usize| flags.get(r).map(|&f| f == 1);
    ClosedLoopRecord {
        case_id: case.case_id.clone(),
        strategy: case.strategy,
        k: case.k,
        final_example: schema.format_instance(final_example),
        validity,
        causes_identified: table.rows.len(),
        causes_used: flags.iter().map(|&f| usize::from(f)).sum(),
        top_used: [top(0), top(1), top(2)],
        in_data,
        eval_mode,
    }
}

/// Everything produced by evaluating one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEvaluation {
    pub record: ClosedLoopRecord,
    pub final_example: Instance,
    pub table: EvaluationTable,
    pub temp_csv: String,
    pub evaluation_csv: String,
    pub exchanges: Vec<Exchange>,
}

fn table_from_answer(answer: &str, native: &EvaluationTable) -> Result<EvaluationTable, String> {
    let text = csv_lines(answer).join("\n");
    let parsed = EvaluationTable::parse_csv(&text)?;
    if parsed.rows.len() != native.rows.len() {
        return Err(format!(
            "the table must have one row per rule ({} rows), found {}",
            native.rows.len(),
            parsed.rows.len()
        ));
    }
    let rows = native
        .rows
        .iter()
        .zip(&parsed.rows)
        .map(|(n, p)| EvaluationRow { in_explanation: p.in_explanation, ..n.clone() })
        .collect();
    Ok(EvaluationTable { rows })
}

/// Final example, validity, consistency table and novelty for one case.
pub fn evaluate_case(
    backend: &dyn LanguageModel,
    model: &dyn Classifier,
    membership: &MembershipIndex,
    case: &CaseResult,
    mode: EvalMode,
) -> Result<CaseEvaluation, EvalError> {
    let schema = model.schema();
    let ranked = validate_rules(&case.rules, schema).map_err(|e| EvalError::Rules(e.to_string()))?;
    let mut asker = Asker::new(backend, None, 0.0);
    let final_example = final_example_with(&mut asker, schema, case.original(), &case.explanation)?;
    let validity = check_validity(model, &final_example);
    let native = build_evaluation_table(&ranked, &final_example);
    let table = match mode {
        EvalMode::Native => native,
        EvalMode::LlmTable => {
            let mut ctx = PromptContext::new(schema, case.original(), case.strategy);
            ctx.cfs = Some(&case.counterfactuals.counterfactuals);
            ctx.rules = Some(&case.rules);
            ctx.support_text = Some(&case.support_text);
            ctx.final_example = Some(&final_example);
            let prompt = render_prompt(Stage::EvalTable, &ctx)?;
            ask_parsed(&mut asker, Stage::EvalTable, prompt, |a| table_from_answer(a, &native))?
        }
    };
    let in_data = membership.contains(&final_example);
    let record = record_from(case, schema, &final_example, validity, &table, in_data, mode);
    record.check()?;
    Ok(CaseEvaluation {
        temp_csv: temp_csv_text(schema, &final_example),
        evaluation_csv: table.to_csv(),
        record,
        final_example,
        table,
        exchanges: asker.exchanges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Strategy,
    K,
}

impl std::str::FromStr for GroupKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strategy" => Ok(GroupKey::Strategy),
            "k" => Ok(GroupKey::K),
            _ => Err(format!("unknown group key `{s}` (expected strategy or k)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Option<Strategy>,
    pub k: Option<usize>,
    pub n_cases: usize,
    pub validity_pct: f64,
    pub mean_causes_identified: f64,
    /// Mean of per-case used/identified ratios over cases with at least one cause.
    pub causes_used_pct: Option<f64>,
    /// Total used over total identified.
    pub causes_used_pooled_pct: Option<f64>,
    pub first_cause_used_pct: Option<f64>,
    pub second_cause_used_pct: Option<f64>,
    pub third_cause_used_pct: Option<f64>,
    pub in_data_pct: f64,
}

fn pct(count: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * count as f64 / n as f64)
}

/// Summed in ascending order so the result does not depend on record order.
fn stable_mean(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

fn metrics(records: &[&ClosedLoopRecord], strategy: Option<Strategy>, k: Option<usize>) -> MetricsReport {
    let n = records.len();
    let count = |f: &dyn Fn(&ClosedLoopRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let rank = |i: usize| {
        let having: Vec<bool> = records.iter().filter_map(|r| r.top_used[i]).collect();
        pct(having.iter().filter(|&&b| b).count(), having.len())
    };
    let ratios: Vec<f64> = records
        .iter()
        .filter(|r| r.causes_identified > 0)
        .map(|r| r.causes_used as f64 / r.causes_identified as f64)
        .collect();
    let identified: usize = records.iter().map(|r| r.causes_identified).sum();
    let used: usize = records.iter().map(|r| r.causes_used).sum();
    MetricsReport {
        strategy,
        k,
        n_cases: n,
        validity_pct: pct(count(&|r| r.validity), n).unwrap_or(0.0),
        mean_causes_identified: identified as f64 / n as f64,
        causes_used_pct: stable_mean(ratios).map(|m| 100.0 * m),
        causes_used_pooled_pct: pct(used, identified),
        first_cause_used_pct: rank(0),
        second_cause_used_pct: rank(1),
        third_cause_used_pct: rank(2),
        in_data_pct: pct(count(&|r| r.in_data), n).unwrap_or(0.0),
    }
}

/// One report per group, groups in ascending key order.
pub fn aggregate(records: &[ClosedLoopRecord], group_by: &[GroupKey]) -> Result<Vec<MetricsReport>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    for r in records {
        r.check()?;
    }
    let by_strategy = group_by.contains(&GroupKey::Strategy);
    let by_k = group_by.contains(&GroupKey::K);
    let mut groups: BTreeMap<(Option<Strategy>, Option<usize>), Vec<&ClosedLoopRecord>> = BTreeMap::new();
    for r in records {
        let key = (by_strategy.then_some(r.strategy), by_k.then_some(r.k));
        groups.entry(key).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((s, k), rs)| metrics(&rs, s, k))
        .collect())
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "Validity",
    "Causes Identified",
    "Causes used",
    "1st Cause used",
    "2nd Cause used",
    "3rd Cause used",
    "In the data",
];

pub const RANK_FOOTNOTE: &str =
    "Rank usage percentages exclude cases with fewer causes than the rank; NA marks groups where no case has that rank.";

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.2}%"))
}

impl MetricsReport {
    pub fn group_label(&self) -> String {
        match (self.strategy, self.k) {
            (Some(s), Some(k)) => format!("{s} {k} CF{}", if k == 1 { "" } else { "s" }),
            (Some(s), None) => s.to_string(),
            (None, Some(k)) => format!("{k} CF{}", if k == 1 { "" } else { "s" }),
            (None, None) => "all".into(),
        }
    }

    pub fn cells(&self) -> [String; 7] {
        [
            fmt_pct(Some(self.validity_pct)),
            format!("{:.2}", self.mean_causes_identified),
            fmt_pct(self.causes_used_pct),
            fmt_pct(self.first_cause_used_pct),
            fmt_pct(self.second_cause_used_pct),
            fmt_pct(self.third_cause_used_pct),
            fmt_pct(Some(self.in_data_pct)),
        ]
    }
}

/// CSV with one row per group and the metric columns.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["Strategy", "CFs", "Cases"];
    header.extend(REPORT_COLUMNS);
    w.write_record(&header).expect("in-memory write");
    for r in reports {
        let mut row = vec![
            r.strategy.map_or("all".into(), |s| s.to_string()),
            r.k.map_or("all".into(), |k| k.to_string()),
            r.n_cases.to_string(),
        ];
        row.extend(r.cells());
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Aligned text table: metrics as rows, groups as columns.
pub fn report_text(reports: &[MetricsReport]) -> String {
    let mut columns: Vec<Vec<String>> = vec![std::iter::once("Mean Values".to_string())
        .chain(std::iter::once("Cases".to_string()))
        .chain(REPORT_COLUMNS.iter().map(|c| c.to_string()))
        .collect()];
    for r in reports {
        columns.push(
            [r.group_label(), r.n_cases.to_string()]
                .into_iter()
                .chain(r.cells())
                .collect(),
        );
    }
    let widths: Vec<usize> = columns
        .iter()
        .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in 0..columns[0].len() {
        let cells: Vec<String> = columns
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{:<w$}", c[row]) } else { format!("{:>w$}", c[row]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    let _ = writeln!(out, "{RANK_FOOTNOTE}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfgen::CounterfactualSet;
    use crate::llm::{ChatRequest, FnModel, LlmError};
    use crate::model::tests::{stump_params, toy_dataset, toy_instance};
    use crate::model::train_forest;
    use crate::pipeline::tests::worked_backend;
    use crate::pipeline::{explain_with_counterfactuals, WorkedExample};
    use crate::ruledsl::parse_rules;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy as PropStrategy};
    use std::sync::Mutex;

    fn worked_case(backend: &dyn LanguageModel) -> CaseResult {
        let w = WorkedExample::bundled();
        let n = w.counterfactuals.len();
        let cfs = CounterfactualSet {
            original: w.original.clone(),
            counterfactuals: w.counterfactuals.clone(),
            distances: vec![0.0; n],
            valid: vec![true; n],
            diversity: 0.0,
            changed_features: vec![Vec::new(); n],
            desired: 1,
        };
        explain_with_counterfactuals(backend, &w.schema, "worked", cfs, Strategy::ZeroShot, 0).unwrap()
    }

    #[test]
    fn validity_on_the_stump() {
        let d = toy_dataset();
        let stump = train_forest(&d, stump_params(), 7).unwrap();
        assert!(check_validity(&stump, &toy_instance(&d.schema, "School", 45)));
        assert!(!check_validity(&stump, &toy_instance(&d.schema, "School", 30)));
    }

    #[test]
    fn native_table_on_the_worked_example() {
        let w = WorkedExample::bundled();
        let final_example = parse_final_example(w.final_example_answer, &w.schema).unwrap();
        let table = build_evaluation_table(&w.ranked_rules(), &final_example);
        assert_eq!(table.rows.iter().map(|r| r.importance).collect::<Vec<_>>(), [3, 1, 1, 1, 0]);
        assert_eq!(table.flags(), [1, 0, 1, 1, 0]);
        assert_eq!(EvaluationTable::parse_csv(&table.to_csv()).unwrap(), table);
        assert_eq!(build_evaluation_table(&[], &final_example).to_csv(), "Rule,Importance,In explanation\n");
        let nothing = parse_rules("RULE race eq {Other} :: r\nRULE age gt 80 :: a").unwrap();
        let nothing = validate_rules(&nothing, &w.schema).unwrap();
        assert_eq!(build_evaluation_table(&nothing, &final_example).flags(), [0, 0]);
    }

    #[test]
    fn final_example_parsing() {
        let w = WorkedExample::bundled();
        let x = parse_final_example(w.final_example_answer, &w.schema).unwrap();
        assert_eq!(x.label, Some(1));
        assert_eq!(
            w.schema.format_instance(&x),
            ["41", "Self-Employed", "Bachelors", "Married", "Professional", "White", "Male", "30"]
        );
        let bare = "age,workclass,education,marital_status,occupation,race,gender,hours_per_week\n\
                    41,Private,School,Married,Blue-Collar,White,Male,30";
        let same = parse_final_example(bare, &w.schema).unwrap();
        assert!(same.same_features(&w.original));
        assert_eq!(same.label, None);
        let phd = bare.replace("School", "PhD");
        let err = parse_final_example(&phd, &w.schema).unwrap_err();
        assert!(err.contains("PhD") && err.contains("Doctorate"));
        assert!(parse_final_example("no table here", &w.schema).is_err());
    }

    #[test]
    fn bad_final_example_is_reprompted_with_legal_values() {
        let w = WorkedExample::bundled();
        let prompts = Mutex::new(Vec::<String>::new());
        let backend = FnModel(|r: &ChatRequest| -> Result<String, LlmError> {
            let mut p = prompts.lock().unwrap();
            p.push(r.user_text.clone());
            Ok(if p.len() == 1 {
                "age,workclass,education,marital_status,occupation,race,gender,hours_per_week\n\
                 41,Private,PhD,Married,Blue-Collar,White,Male,30"
                    .to_string()
            } else {
                w.final_example_answer.to_string()
            })
        });
        let (x, ex) = generate_final_example(&backend, &w.schema, &w.original, "study more").unwrap();
        assert_eq!(ex.len(), 2);
        assert!(prompts.lock().unwrap()[1].contains("Prof-school"));
        assert_eq!(x.values[2], w.schema.parse_value(2, "Bachelors").unwrap());
    }

    #[test]
    fn final_example_prompt_has_no_counterfactuals_or_rules() {
        let w = WorkedExample::bundled();
        let mut ctx = PromptContext::new(&w.schema, &w.original, Strategy::ZeroShot);
        ctx.explanation = Some("Pursue higher education.");
        let p = render_prompt(Stage::FinalExample, &ctx).unwrap();
        assert!(!p.contains(crate::pipeline::COUNTERFACTUALS));
        assert!(!p.contains(crate::pipeline::RULES));
        assert!(p.contains("temp_csv.csv") && p.contains(crate::pipeline::DATASET_INFO));
    }

    #[test]
    fn worked_case_in_both_modes() {
        let backend = worked_backend();
        let case = worked_case(&backend);
        let w = WorkedExample::bundled();
        // single-class forest: predicts the desired class everywhere
        let data = tabular::Dataset {
            schema: w.schema.clone(),
            rows: w.counterfactuals.iter().map(|c| c.clone().with_label(1)).collect(),
        };
        let always_one = crate::model::grow_forest(&data, stump_params_for(8), 1);
        let membership = MembershipIndex::new(&data);

        let native = evaluate_case(&backend, &always_one, &membership, &case, EvalMode::Native).unwrap();
        assert_eq!(native.table.flags(), [1, 0, 1, 1, 0]);
        assert_eq!(native.record.causes_used, 3);
        assert!(native.record.validity);
        assert!(!native.record.in_data);

        let scripted = evaluate_case(&backend, &always_one, &membership, &case, EvalMode::LlmTable).unwrap();
        assert_eq!(scripted.table.flags(), [1, 0, 1, 1, 1]);
        assert_eq!(scripted.record.causes_identified, 5);
        assert_eq!(scripted.record.causes_used, 4);
        assert_eq!(scripted.record.top_used, [Some(true), Some(false), Some(true)]);
        assert_eq!(
            scripted.temp_csv,
            "age,workclass,education,marital_status,occupation,race,gender,hours_per_week,income\n\
             41,Self-Employed,Bachelors,Married,Professional,White,Male,30,1\n"
        );
    }

    fn stump_params_for(features: usize) -> crate::model::ForestParams {
        crate::model::ForestParams { features_per_split: Some(features), ..stump_params() }
    }

    #[test]
    fn copied_dataset_row_is_in_data() {
        let w = WorkedExample::bundled();
        let backend = FnModel(|r: &ChatRequest| -> Result<String, LlmError> {
            Ok(match r.stage {
                Stage::FinalExample => {
                    "age,workclass,education,marital_status,occupation,race,gender,hours_per_week\n\
                     41,Private,Prof-school,Married,Blue-Collar,White,Male,16"
                        .to_string()
                }
                s => WorkedExample::bundled().answer(s).to_string(),
            })
        });
        let case = worked_case(&backend);
        let data = tabular::Dataset {
            schema: w.schema.clone(),
            rows: w.counterfactuals.iter().map(|c| c.clone().with_label(1)).collect(),
        };
        let model = crate::model::grow_forest(&data, stump_params_for(8), 1);
        let ev = evaluate_case(&backend, &model, &MembershipIndex::new(&data), &case, EvalMode::Native).unwrap();
        assert!(ev.record.in_data);
    }

    fn record(validity: bool, identified: usize, flags: &[bool], in_data: bool) -> ClosedLoopRecord {
        let top = |i: usize| (i < identified).then(|| flags.get(i).copied().unwrap_or(false));
        ClosedLoopRecord {
            case_id: "c".into(),
            strategy: Strategy::ZeroShot,
            k: 5,
            final_example: Vec::new(),
            validity,
            causes_identified: identified,
            causes_used: flags.iter().filter(|&&f| f).count(),
            top_used: [top(0), top(1), top(2)],
            in_data,
            eval_mode: EvalMode::Native,
        }
    }

    #[test]
    fn single_worked_record_aggregate() {
        let r = record(true, 5, &[true, false, true, true, true], false);
        let m = &aggregate(&[r], &[]).unwrap()[0];
        assert_eq!(m.validity_pct, 100.0);
        assert_eq!(m.mean_causes_identified, 5.0);
        assert_eq!(m.causes_used_pct, Some(80.0));
        assert_eq!(m.first_cause_used_pct, Some(100.0));
        assert_eq!(m.second_cause_used_pct, Some(0.0));
        assert_eq!(m.third_cause_used_pct, Some(100.0));
        assert_eq!(m.in_data_pct, 0.0);
    }

    #[test]
    fn aggregate_edge_cases() {
        assert!(matches!(aggregate(&[], &[]), Err(EvalError::Empty)));
        let two = [record(true, 1, &[true], false), record(false, 1, &[false], true)];
        let m = &aggregate(&two, &[]).unwrap()[0];
        assert_eq!(m.validity_pct, 50.0);
        assert_eq!(m.third_cause_used_pct, None);
        assert!(report_csv(std::slice::from_ref(m)).contains("NA"));
        let mut bad = record(true, 1, &[true], false);
        bad.causes_used = 2;
        assert!(aggregate(&[bad], &[]).is_err());
    }

    #[test]
    fn grouping_by_strategy() {
        let mut a = record(true, 3, &[true], false);
        let mut b = a.clone();
        let c = a.clone();
        a.strategy = Strategy::OneShot;
        b.strategy = Strategy::Tot;
        let reports = aggregate(&[a, b, c], &[GroupKey::Strategy]).unwrap();
        assert_eq!(reports.len(), 3);
        let text = report_text(&reports);
        for col in REPORT_COLUMNS {
            assert!(text.contains(col));
        }
    }

    fn arb_record() -> impl PropStrategy<Value = ClosedLoopRecord> {
        (any::<bool>(), 0usize..7, proptest::collection::vec(any::<bool>(), 6), any::<bool>(), 0usize..3)
            .prop_map(|(v, n, flags, d, s)| {
                let mut r = record(v, n, &flags[..n], d);
                r.strategy = [Strategy::ZeroShot, Strategy::OneShot, Strategy::Tot][s];
                r
            })
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            records in proptest::collection::vec(arb_record(), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for keys in [&[][..], &[GroupKey::Strategy][..], &[GroupKey::Strategy, GroupKey::K][..]] {
                prop_assert_eq!(aggregate(&records, keys).unwrap(), aggregate(&shuffled, keys).unwrap());
            }
            for m in aggregate(&records, &[]).unwrap() {
                for p in [Some(m.validity_pct), m.causes_used_pct, m.first_cause_used_pct, Some(m.in_data_pct)].into_iter().flatten() {
                    prop_assert!((0.0..=100.0).contains(&p));
                }
            }
        }

        #[test]
        fn evaluation_csv_round_trips(rows in proptest::collection::vec(("[ -~]{1,30}", 0usize..6, 0u8..2), 0..6)) {
            let table = EvaluationTable {
                rows: rows.into_iter().map(|(rule, importance, f)| EvaluationRow {
                    rule: rule.trim().to_string(), importance, in_explanation: f,
                }).filter(|r| !r.rule.is_empty()).collect(),
            };
            prop_assert_eq!(EvaluationTable::parse_csv(&table.to_csv()).unwrap(), table);
        }
    }
}
