//! Cause rules: a small predicate language the language model must answer in,
//! evaluated natively against counterfactual rows.
//!
//! One rule per line:
//!
//! ```text
//! RULE <feature> <op> <operand> [AND <feature> <op> <operand>]* :: <prose>
//! OBSERVATION :: <prose>
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfgen::CounterfactualSet;
use crate::tabular::{DatasetSchema, FeatureKind, Instance, Value};

/// Grammar description embedded in the cause-extraction prompt.
pub const GRAMMAR: &str = "\
Write one rule per line using exactly this format:
RULE <feature> <op> <operand> [AND <feature> <op> <operand>]* :: <short description of the rule>
OBSERVATION :: <short description of an observation that is not a checkable rule>
<op> is one of eq, in, lt, le, gt, ge. Use eq and in only with categorical features and write \
their operand as a set of dataset values, for example {Bachelors, Doctorate}. Use lt, le, gt and \
ge only with numeric features and a number operand.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Eq,
    In,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    fn parse(word: &str) -> Option<Self> {
        Some(match word {
            "eq" => Op::Eq,
            "in" => Op::In,
            "lt" => Op::Lt,
            "le" => Op::Le,
            "gt" => Op::Gt,
            "ge" => Op::Ge,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Eq => "eq",
            Op::In => "in",
            Op::Lt => "lt",
            Op::Le => "le",
            Op::Gt => "gt",
            Op::Ge => "ge",
        }
    }

    fn is_ordered(self) -> bool {
        !matches!(self, Op::Eq | Op::In)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operand {
    Scalar(String),
    Set(Vec<String>),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Scalar(s) => f.write_str(s),
            Operand::Set(vs) => write!(f, "{{{}}}", vs.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicPredicate {
    pub feature: String,
    pub op: Op,
    pub operand: Operand,
}

impl fmt::Display for AtomicPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.feature, self.op.as_str(), self.operand)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseRule {
    /// 1-based listing order.
    pub id: usize,
    pub prose: String,
    /// `None` for observational rules.
    pub predicate: Option<Vec<AtomicPredicate>>,
    pub importance: usize,
    pub rank: Option<usize>,
}

impl CauseRule {
    pub fn is_observation(&self) -> bool {
        self.predicate.is_none()
    }

    /// The rule written back in block syntax.
    pub fn to_line(&self) -> String {
        match &self.predicate {
            None => format!("OBSERVATION :: {}", self.prose),
            Some(atoms) => {
                let body: Vec<String> = atoms.iter().map(ToString::to_string).collect();
                format!("RULE {} :: {}", body.join(" AND "), self.prose)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("the rule block contains no rules")]
    Empty,
    #[error("invalid rules: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<RuleIssue>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleIssue {
    pub rule_id: usize,
    pub message: String,
}

impl fmt::Display for RuleIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule {}: {}", self.rule_id, self.message)
    }
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn column(&self) -> usize {
        self.text[..self.pos].chars().count() + 1
    }

    fn error(&self, message: impl Into<String>) -> RuleError {
        RuleError::Syntax {
            line: self.line,
            column: self.column(),
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    /// Next whitespace-delimited word; `None` at end of line.
    fn word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        if self.at_end() {
            return None;
        }
        let rest = self.rest();
        let len = rest.find(char::is_whitespace).unwrap_or(rest.len());
        self.pos += len;
        Some(&rest[..len])
    }

    fn expect_separator(&mut self) -> Result<(), RuleError> {
        self.skip_ws();
        if self.rest().starts_with("::") {
            self.pos += 2;
            Ok(())
        } else {
            Err(self.error("expected `::` before the rule description"))
        }
    }

    fn prose(&mut self) -> Result<String, RuleError> {
        self.expect_separator()?;
        self.skip_ws();
        let prose = self.rest().trim_end();
        if prose.is_empty() {
            return Err(self.error("empty rule description after `::`"));
        }
        self.pos = self.text.len();
        Ok(prose.to_string())
    }

    fn operand(&mut self) -> Result<Operand, RuleError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("missing operand")),
            Some('{') => {
                let close = self
                    .rest()
                    .find('}')
                    .ok_or_else(|| self.error("unclosed `{` in set operand"))?;
                let inner = &self.rest()[1..close];
                let values: Vec<String> = inner.split(',').map(|v| v.trim().to_string()).collect();
                if values.iter().any(String::is_empty) {
                    return Err(self.error("empty value in set operand"));
                }
                self.pos += close + 1;
                Ok(Operand::Set(values))
            }
            Some(_) => {
                let start = self.pos;
                let rest = self.rest();
                let len = rest
                    .find(|c: char| c.is_whitespace() || c == ':')
                    .unwrap_or(rest.len());
                if len == 0 {
                    return Err(self.error("missing operand"));
                }
                self.pos = start + len;
                Ok(Operand::Scalar(rest[..len].to_string()))
            }
        }
    }

    fn atom(&mut self) -> Result<AtomicPredicate, RuleError> {
        self.skip_ws();
        let feature = match self.word() {
            Some(w) if !w.starts_with("::") => w.to_string(),
            _ => return Err(self.error("expected a feature name")),
        };
        self.skip_ws();
        let op_col = self.pos;
        let word = self.word().ok_or_else(|| self.error("expected an operator"))?;
        let op = Op::parse(word).ok_or_else(|| {
            self.pos = op_col;
            self.error(format!(
                "unknown operator `{word}` (expected one of eq, in, lt, le, gt, ge)"
            ))
        })?;
        let operand = self.operand()?;
        Ok(AtomicPredicate { feature, op, operand })
    }
}

/// Parses a rule block. Blank lines and lines starting with `#` are skipped.
pub fn parse_rules(text: &str) -> Result<Vec<CauseRule>, RuleError> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cur = Cursor { text: line, pos: 0, line: i + 1 };
        cur.skip_ws();
        let keyword_pos = cur.pos;
        let predicate = match cur.word() {
            Some("OBSERVATION") => None,
            Some("RULE") => {
                let mut atoms = vec![cur.atom()?];
                loop {
                    cur.skip_ws();
                    let save = cur.pos;
                    match cur.word() {
                        Some("AND") => atoms.push(cur.atom()?),
                        _ => {
                            cur.pos = save;
                            break;
                        }
                    }
                }
                Some(atoms)
            }
            _ => {
                cur.pos = keyword_pos;
                return Err(cur.error("expected `RULE` or `OBSERVATION`"));
            }
        };
        let prose = cur.prose()?;
        rules.push(CauseRule {
            id: rules.len() + 1,
            prose,
            predicate,
            importance: 0,
            rank: None,
        });
    }
    if rules.is_empty() {
        return Err(RuleError::Empty);
    }
    Ok(rules)
}

/// Pulls the rule lines out of a free-form answer: the first fenced block if
/// one contains rules, otherwise every line starting with a rule keyword
/// (list markers such as `1.` or `-` are dropped).
pub fn extract_rule_block(answer: &str) -> String {
    let mut in_fence = false;
    let mut fenced = Vec::new();
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
    if fenced.iter().any(|l| is_rule_line(l.trim())) {
        return fenced.join("\n");
    }
    answer
        .lines()
        .map(strip_list_marker)
        .filter(|l| is_rule_line(l))
        .collect::<Vec<_>>()
        .join("\n")
}

fn is_rule_line(line: &str) -> bool {
    line.starts_with("RULE ") || line.starts_with("OBSERVATION ") || line.starts_with("OBSERVATION::")
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim().trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let after = &t[digits..];
        if let Some(rest) = after.strip_prefix('.').or_else(|| after.strip_prefix(')')) {
            return rest.trim_start();
        }
    }
    t.trim_matches('`')
}

#[derive(Debug, Clone, PartialEq)]
enum Test {
    /// Category indices the feature must take.
    InSet(Vec<u32>),
    Cmp(Op, f64),
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledAtom {
    feature: usize,
    test: Test,
}

impl CompiledAtom {
    fn holds(&self, x: &Instance) -> bool {
        match (&self.test, x.values[self.feature]) {
            (Test::InSet(set), Value::Cat(c)) => set.contains(&c),
            (Test::Cmp(op, t), Value::Num(v)) => match op {
                Op::Lt => v < *t,
                Op::Le => v <= *t,
                Op::Gt => v > *t,
                Op::Ge => v >= *t,
                Op::Eq | Op::In => false,
            },
            _ => false,
        }
    }
}

/// A rule whose predicate has been checked against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedRule {
    pub rule: CauseRule,
    atoms: Vec<CompiledAtom>,
}

fn compile_atom(atom: &AtomicPredicate, schema: &DatasetSchema) -> Result<CompiledAtom, String> {
    let f = schema
        .feature_index(&atom.feature)
        .ok_or_else(|| format!("unknown feature `{}`", atom.feature))?;
    let spec = &schema.features[f];
    match (&spec.kind, atom.op.is_ordered()) {
        (FeatureKind::Categorical { .. }, false) => {
            let values: Vec<&String> = match &atom.operand {
                Operand::Scalar(v) => vec![v],
                Operand::Set(vs) => vs.iter().collect(),
            };
            if atom.op == Op::Eq && values.len() != 1 {
                return Err(format!("`eq` on `{}` takes exactly one value", spec.name));
            }
            let mut set = Vec::with_capacity(values.len());
            for v in values {
                let c = spec
                    .category_index(v)
                    .ok_or_else(|| format!("`{v}` is not a legal value of `{}`", spec.name))?;
                set.push(c);
            }
            Ok(CompiledAtom { feature: f, test: Test::InSet(set) })
        }
        (FeatureKind::Continuous { .. }, true) => {
            let text = match &atom.operand {
                Operand::Scalar(v) => v.as_str(),
                Operand::Set(vs) if vs.len() == 1 => vs[0].as_str(),
                Operand::Set(_) => {
                    return Err(format!("`{}` needs a single number operand", atom.op.as_str()))
                }
            };
            let t: f64 = text
                .parse()
                .ok()
                .filter(|t: &f64| t.is_finite())
                .ok_or_else(|| format!("`{text}` is not a number"))?;
            Ok(CompiledAtom { feature: f, test: Test::Cmp(atom.op, t) })
        }
        (FeatureKind::Categorical { .. }, true) => Err(format!(
            "type mismatch: ordered operator `{}` on categorical feature `{}`",
            atom.op.as_str(),
            spec.name
        )),
        (FeatureKind::Continuous { .. }, false) => Err(format!(
            "type mismatch: `{}` on continuous feature `{}`",
            atom.op.as_str(),
            spec.name
        )),
    }
}

/// Checks every predicate against the schema, reporting every offending rule.
pub fn validate_rules(
    rules: &[CauseRule],
    schema: &DatasetSchema,
) -> Result<Vec<ValidatedRule>, RuleError> {
    let mut issues = Vec::new();
    let mut out = Vec::with_capacity(rules.len());
    for rule in rules {
        let mut atoms = Vec::new();
        for atom in rule.predicate.iter().flatten() {
            match compile_atom(atom, schema) {
                Ok(c) => atoms.push(c),
                Err(message) => issues.push(RuleIssue { rule_id: rule.id, message }),
            }
        }
        out.push(ValidatedRule { rule: rule.clone(), atoms });
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(RuleError::Invalid(issues))
    }
}

/// Conjunction of the rule's atoms on the row; observational rules never hold.
pub fn rule_satisfied(rule: &ValidatedRule, instance: &Instance) -> bool {
    !rule.rule.is_observation() && rule.atoms.iter().all(|a| a.holds(instance))
}

/// Fills each rule's importance with the number of counterfactuals satisfying it.
pub fn count_support(rules: &[ValidatedRule], cfs: &CounterfactualSet) -> Vec<ValidatedRule> {
    count_support_rows(rules, &cfs.counterfactuals)
}

pub fn count_support_rows(rules: &[ValidatedRule], rows: &[Instance]) -> Vec<ValidatedRule> {
    rules
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.rule.importance = rows.iter().filter(|x| rule_satisfied(&r, x)).count();
            r
        })
        .collect()
}

/// Descending importance, ties by ascending id; sets `rank` to 1..n.
pub fn rank_rules(rules: &[ValidatedRule]) -> Vec<ValidatedRule> {
    let mut out = rules.to_vec();
    out.sort_by(|a, b| {
        b.rule
            .importance
            .cmp(&a.rule.importance)
            .then(a.rule.id.cmp(&b.rule.id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rule.rank = Some(i + 1);
    }
    out
}

/// Support counts in the form fed back to the language model, one line per
/// checkable rule in listing order.
pub fn support_lines(rules: &[ValidatedRule]) -> String {
    let mut rules: Vec<&ValidatedRule> = rules.iter().filter(|r| !r.rule.is_observation()).collect();
    rules.sort_by_key(|r| r.rule.id);
    rules
        .iter()
        .map(|r| {
            format!(
                "Number of counterfactuals following Rule {} ({}): {}",
                r.rule.id, r.rule.prose, r.rule.importance
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Numbered rule list in listing order.
pub fn rule_list(rules: &[CauseRule]) -> String {
    let mut rules: Vec<&CauseRule> = rules.iter().collect();
    rules.sort_by_key(|r| r.id);
    rules
        .iter()
        .map(|r| format!("{}. {}", r.id, r.to_line()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renumbers rules 1..n in the given order, clearing importance and rank.
pub fn renumber(rules: impl IntoIterator<Item = CauseRule>) -> Vec<CauseRule> {
    rules
        .into_iter()
        .enumerate()
        .map(|(i, r)| CauseRule { id: i + 1, importance: 0, rank: None, ..r })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::parse_schema;
    use proptest::prelude::*;

    fn schema() -> DatasetSchema {
        parse_schema(include_str!("../fixtures/adult/adult.schema.toml")).unwrap()
    }

    fn row(s: &DatasetSchema, v: [&str; 8]) -> Instance {
        s.instance_from_strs(&v, None).unwrap()
    }

    const WORKED_RULES: &str = "\
RULE education in {Prof-school, Bachelors, Doctorate} :: Higher education leads to higher income
RULE marital_status eq {Divorced} :: Marital status being Divorced
RULE workclass eq {Self-Employed} :: Self-Employed workclass
RULE occupation eq {Professional} :: Occupation being Professional
OBSERVATION :: Hours per week less influential in this case";

    fn worked_cfs(s: &DatasetSchema) -> Vec<Instance> {
        [
            ["41", "Private", "Prof-school", "Married", "Blue-Collar", "White", "Male", "16"],
            ["41", "Private", "School", "Divorced", "Professional", "White", "Male", "30"],
            ["41", "Private", "Bachelors", "Married", "Blue-Collar", "White", "Male", "19"],
            ["41", "Self-Employed", "School", "Married", "Blue-Collar", "White", "Female", "30"],
            ["41", "Private", "Doctorate", "Married", "Blue-Collar", "White", "Male", "30"],
        ]
        .into_iter()
        .map(|v| row(s, v))
        .collect()
    }

    #[test]
    fn parses_in_set_rule() {
        let rules = parse_rules(
            "RULE education in {Prof-school, Bachelors, Doctorate} :: Higher education leads to higher income",
        )
        .unwrap();
        assert_eq!(rules.len(), 1);
        let atoms = rules[0].predicate.as_ref().unwrap();
        assert_eq!(atoms[0].op, Op::In);
        assert_eq!(
            atoms[0].operand,
            Operand::Set(vec!["Prof-school".into(), "Bachelors".into(), "Doctorate".into()])
        );
        assert_eq!(rules[0].prose, "Higher education leads to higher income");
    }

    #[test]
    fn parses_observation() {
        let rules = parse_rules("OBSERVATION :: Hours per week less influential in this case").unwrap();
        assert!(rules[0].is_observation());
        assert_eq!(rules[0].importance, 0);
    }

    #[test]
    fn unknown_operator_is_named() {
        let err = parse_rules("RULE education frobnicate {X}").unwrap_err();
        match err {
            RuleError::Syntax { line: 1, column: 16, message } => assert!(message.contains("frobnicate")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(parse_rules("\n# nothing\n"), Err(RuleError::Empty));
        assert!(matches!(parse_rules("FOO x"), Err(RuleError::Syntax { line: 1, column: 1, .. })));
        assert!(matches!(
            parse_rules("RULE age gt 3 :: fine\nRULE age gt 3"),
            Err(RuleError::Syntax { line: 2, .. })
        ));
        assert!(parse_rules("RULE education in {A, :: x").is_err());
        assert!(parse_rules("RULE age gt 3 ::   ").is_err());
    }

    #[test]
    fn conjunction_round_trips() {
        let text = "RULE age ge 30 AND education in {Bachelors, Masters} :: older graduates";
        let rules = parse_rules(text).unwrap();
        assert_eq!(rules[0].predicate.as_ref().unwrap().len(), 2);
        assert_eq!(rules[0].to_line(), text);
        assert_eq!(parse_rules(&rules[0].to_line()).unwrap(), rules);
    }

    #[test]
    fn validation() {
        let s = schema();
        assert!(validate_rules(&parse_rules("RULE education eq {Doctorate} :: d").unwrap(), &s).is_ok());
        let unknown = validate_rules(&parse_rules("RULE salary gt 100 :: s").unwrap(), &s).unwrap_err();
        assert!(unknown.to_string().contains("unknown feature `salary`"));
        let mismatch = validate_rules(&parse_rules("RULE education gt 3 :: e").unwrap(), &s).unwrap_err();
        assert!(mismatch.to_string().contains("type mismatch"));
        let illegal = validate_rules(&parse_rules("RULE education eq {PhD} :: e").unwrap(), &s).unwrap_err();
        assert!(illegal.to_string().contains("`PhD`"));
        let both = validate_rules(
            &parse_rules("RULE salary gt 1 :: a\nRULE age in {3} :: b").unwrap(),
            &s,
        )
        .unwrap_err();
        match both {
            RuleError::Invalid(issues) => {
                assert_eq!(issues.iter().map(|i| i.rule_id).collect::<Vec<_>>(), [1, 2])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn satisfaction_on_worked_rows() {
        let s = schema();
        let rules = validate_rules(&parse_rules(WORKED_RULES).unwrap(), &s).unwrap();
        let cfs = worked_cfs(&s);
        let original = row(&s, ["41", "Private", "School", "Married", "Blue-Collar", "White", "Male", "30"]);
        assert!(rule_satisfied(&rules[1], &cfs[1]));
        assert!(!rule_satisfied(&rules[1], &original));
        assert!(cfs.iter().all(|c| !rule_satisfied(&rules[4], c)));
    }

    #[test]
    fn worked_support_and_rank() {
        let s = schema();
        let rules = validate_rules(&parse_rules(WORKED_RULES).unwrap(), &s).unwrap();
        let counted = count_support_rows(&rules, &worked_cfs(&s));
        let imp: Vec<usize> = counted.iter().map(|r| r.rule.importance).collect();
        assert_eq!(imp, [3, 1, 1, 1, 0]);
        let ranked = rank_rules(&counted);
        let ids: Vec<usize> = ranked.iter().map(|r| r.rule.id).collect();
        assert_eq!(ids, [1, 2, 3, 4, 5]);
        assert_eq!(ranked[0].rule.rank, Some(1));
        let lines = support_lines(&counted);
        assert_eq!(lines.lines().count(), 4);
        assert!(lines.starts_with(
            "Number of counterfactuals following Rule 1 (Higher education leads to higher income): 3"
        ));
    }

    #[test]
    fn support_of_universal_rule_is_row_count() {
        let s = schema();
        let rules = validate_rules(&parse_rules("RULE age ge 41 :: all").unwrap(), &s).unwrap();
        assert_eq!(count_support_rows(&rules, &worked_cfs(&s))[0].rule.importance, 5);
        let none = validate_rules(&parse_rules("RULE race eq {Other} :: none").unwrap(), &s).unwrap();
        assert_eq!(count_support_rows(&none, &worked_cfs(&s))[0].rule.importance, 0);
    }

    #[test]
    fn rank_tie_and_strict() {
        let s = schema();
        let base = validate_rules(
            &parse_rules("RULE age ge 1 :: a\nRULE age ge 2 :: b\nRULE age ge 3 :: c").unwrap(),
            &s,
        )
        .unwrap();
        let with = |imps: &[usize]| -> Vec<usize> {
            let rs: Vec<ValidatedRule> = base
                .iter()
                .zip(imps)
                .map(|(r, &i)| {
                    let mut r = r.clone();
                    r.rule.importance = i;
                    r
                })
                .collect();
            rank_rules(&rs).iter().map(|r| r.rule.id).collect()
        };
        assert_eq!(with(&[0, 5]), [2, 1]);
        assert_eq!(with(&[2, 2, 2]), [1, 2, 3]);
    }

    #[test]
    fn extracts_rules_from_chatty_answers() {
        let answer = "Here are the rules:\n\n1. RULE age ge 30 :: older\n- OBSERVATION :: hours matter less\nThanks.";
        assert_eq!(extract_rule_block(answer), "RULE age ge 30 :: older\nOBSERVATION :: hours matter less");
        let fenced = "Sure.\n```\nRULE age ge 30 :: older\n```\nRULE age ge 99 :: ignored";
        assert_eq!(extract_rule_block(fenced), "RULE age ge 30 :: older");
    }

    fn atom_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            (17u32..90).prop_map(|a| format!("age ge {a}")),
            (1u32..99).prop_map(|h| format!("hours_per_week lt {h}")),
            proptest::sample::subsequence(
                vec!["Assoc", "Bachelors", "Doctorate", "HS-grad", "Masters", "Prof-school", "School", "Some-college"],
                1..4
            )
            .prop_map(|vs| format!("education in {{{}}}", vs.join(", "))),
            proptest::sample::select(vec!["Divorced", "Married", "Single"])
                .prop_map(|v| format!("marital_status eq {{{v}}}")),
        ]
    }

    fn rule_block() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                4 => proptest::collection::vec(atom_strategy(), 1..3)
                    .prop_map(|atoms| format!("RULE {} :: r", atoms.join(" AND "))),
                1 => Just("OBSERVATION :: o".to_string()),
            ],
            1..6,
        )
        .prop_map(|lines| lines.join("\n"))
    }

    fn random_row() -> impl Strategy<Value = [String; 8]> {
        (
            17u32..91,
            proptest::sample::select(vec!["Government", "Private", "Self-Employed"]),
            proptest::sample::select(vec!["Bachelors", "Doctorate", "School", "Masters"]),
            proptest::sample::select(vec!["Divorced", "Married", "Single"]),
            1u32..100,
        )
            .prop_map(|(a, w, e, m, h)| {
                [
                    a.to_string(),
                    w.to_string(),
                    e.to_string(),
                    m.to_string(),
                    "Sales".to_string(),
                    "White".to_string(),
                    "Male".to_string(),
                    h.to_string(),
                ]
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn support_matches_brute_force(block in rule_block(), rows in proptest::collection::vec(random_row(), 1..8)) {
            let s = schema();
            let rules = validate_rules(&parse_rules(&block).unwrap(), &s).unwrap();
            let rows: Vec<Instance> = rows.iter().map(|r| s.instance_from_strs(r, None).unwrap()).collect();
            let counted = count_support_rows(&rules, &rows);
            for (r, parsed) in counted.iter().zip(parse_rules(&block).unwrap()) {
                let mut brute = 0;
                for x in &rows {
                    let Some(atoms) = &parsed.predicate else { continue };
                    let all = atoms.iter().all(|a| {
                        let f = s.feature_index(&a.feature).unwrap();
                        let text = s.format_value(f, &x.values[f]);
                        match (&a.operand, a.op) {
                            (Operand::Set(vs), _) => vs.contains(&text),
                            (Operand::Scalar(t), op) => {
                                let (v, t): (f64, f64) = (text.parse().unwrap(), t.parse().unwrap());
                                match op { Op::Lt => v < t, Op::Le => v <= t, Op::Gt => v > t, Op::Ge => v >= t, _ => unreachable!() }
                            }
                        }
                    });
                    brute += usize::from(all);
                }
                prop_assert_eq!(r.rule.importance, brute);
            }
        }

        #[test]
        fn ranking_is_a_permutation(block in rule_block(), rows in proptest::collection::vec(random_row(), 1..8)) {
            let s = schema();
            let rules = validate_rules(&parse_rules(&block).unwrap(), &s).unwrap();
            let rows: Vec<Instance> = rows.iter().map(|r| s.instance_from_strs(r, None).unwrap()).collect();
            let ranked = rank_rules(&count_support_rows(&rules, &rows));
            let mut ids: Vec<usize> = ranked.iter().map(|r| r.rule.id).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (1..=rules.len()).collect::<Vec<_>>());
            prop_assert!(ranked.windows(2).all(|w| w[0].rule.importance >= w[1].rule.importance));
            let ranks: Vec<usize> = ranked.iter().map(|r| r.rule.rank.unwrap()).collect();
            prop_assert_eq!(ranks, (1..=rules.len()).collect::<Vec<_>>());
        }

        #[test]
        fn adding_a_satisfying_row_is_monotone(block in rule_block(), rows in proptest::collection::vec(random_row(), 1..6), extra in random_row()) {
            let s = schema();
            let rules = validate_rules(&parse_rules(&block).unwrap(), &s).unwrap();
            let mut rows: Vec<Instance> = rows.iter().map(|r| s.instance_from_strs(r, None).unwrap()).collect();
            let before = count_support_rows(&rules, &rows);
            let extra = s.instance_from_strs(&extra, None).unwrap();
            rows.push(extra.clone());
            let after = count_support_rows(&rules, &rows);
            for (b, a) in before.iter().zip(&after) {
                let expected = b.rule.importance + usize::from(rule_satisfied(b, &extra));
                prop_assert_eq!(a.rule.importance, expected);
            }
        }
    }
}
