//! Prompt rendering and stage orchestration: cause extraction, explanation
//! (zero-shot or one-shot) and the branch-and-merge variant.

use std::collections::HashSet;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfgen::{generate_counterfactuals, CfError, CounterfactualSet, FeatureScales, SearchConfig};
use crate::llm::{canonical_key, ChatRequest, LanguageModel, LlmError, Stage};
use crate::model::Classifier;
use crate::ruledsl::{
    count_support_rows, extract_rule_block, parse_rules, rank_rules, support_lines, validate_rules,
    CauseRule, RuleError, ValidatedRule,
};
use crate::tabular::{self, parse_schema, DatasetSchema, Instance};

pub const USER_DATA: &str = "----- User Data Negative outcome -----";
pub const COUNTERFACTUALS: &str = "----- Positive counterfactual outcome -----";
pub const RULES: &str = "----- Rules -----";
pub const RESULTS: &str = "----- Results -----";
pub const DATASET_INFO: &str = "----- Dataset info -----";
pub const EXPLANATION: &str = "----- Explanation -----";
pub const EXAMPLE: &str = "----- Example -----";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    OneShot,
    Tot,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::OneShot => "one_shot",
            Strategy::Tot => "tot",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "zero_shot" => Ok(Strategy::ZeroShot),
            "one_shot" => Ok(Strategy::OneShot),
            "tot" => Ok(Strategy::Tot),
            _ => Err(format!("unknown strategy `{s}` (expected zero_shot, one_shot or tot)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: prompt needs `{field}`")]
    MissingField { stage: Stage, field: &'static str },
    #[error("{stage}: {source}")]
    Llm {
        stage: Stage,
        #[source]
        source: LlmError,
    },
    #[error("no parseable rules after a reprompt: {diagnostic}")]
    NoRules { diagnostic: String },
    #[error("rules still invalid after a reprompt: {0}")]
    InvalidRules(RuleError),
    #[error("empty explanation after a retry")]
    EmptyExplanation,
    #[error("{stage}: unusable answer after a reprompt: {message}")]
    BadAnswer { stage: Stage, message: String },
    #[error("counterfactual search: {0}")]
    Counterfactuals(CfError),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("branch {branch}: {source}")]
    Branch {
        branch: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub fn is_precondition(&self) -> bool {
        match self {
            PipelineError::Precondition(_) => true,
            PipelineError::Branch { source, .. } => source.is_precondition(),
            _ => false,
        }
    }

    pub fn is_llm(&self) -> bool {
        match self {
            PipelineError::Llm { .. } => true,
            PipelineError::Branch { source, .. } => source.is_llm(),
            _ => false,
        }
    }
}

impl From<CfError> for PipelineError {
    fn from(e: CfError) -> Self {
        match e {
            CfError::AlreadyDesired => PipelineError::Precondition(e.to_string()),
            other => PipelineError::Counterfactuals(other),
        }
    }
}

/// One branch's outputs as embedded in the merge prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub index: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub counterfactuals: CounterfactualSet,
    pub cf_shortfall: bool,
    pub rules: Vec<CauseRule>,
    pub support_text: String,
    pub explanation: String,
}

/// Inputs available to a prompt; each stage requires a subset.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub schema: &'a DatasetSchema,
    pub original: &'a Instance,
    pub cfs: Option<&'a [Instance]>,
    pub rules: Option<&'a [CauseRule]>,
    pub support_text: Option<&'a str>,
    pub explanation: Option<&'a str>,
    pub branches: Option<&'a [BranchResult]>,
    pub final_example: Option<&'a Instance>,
    pub strategy: Strategy,
}

impl<'a> PromptContext<'a> {
    pub fn new(schema: &'a DatasetSchema, original: &'a Instance, strategy: Strategy) -> Self {
        Self {
            schema,
            original,
            cfs: None,
            rules: None,
            support_text: None,
            explanation: None,
            branches: None,
            final_example: None,
            strategy,
        }
    }
}

fn need<T: Copy>(v: Option<T>, stage: Stage, field: &'static str) -> Result<T, PipelineError> {
    v.ok_or(PipelineError::MissingField { stage, field })
}

fn original_block(ctx: &PromptContext) -> String {
    let x = ctx.original.clone().with_label(ctx.schema.label.undesired());
    tabular::serialize_instances(&[x], ctx.schema)
}

fn cfs_block(ctx: &PromptContext, cfs: &[Instance]) -> String {
    let desired = ctx.schema.label.desired;
    let rows: Vec<Instance> = cfs.iter().map(|c| c.clone().with_label(desired)).collect();
    tabular::serialize_instances(&rows, ctx.schema)
}

fn prose_list(rules: &[CauseRule]) -> String {
    let mut rules: Vec<&CauseRule> = rules.iter().collect();
    rules.sort_by_key(|r| r.id);
    rules
        .iter()
        .map(|r| format!("Rule {}: {}", r.id, r.prose))
        .collect::<Vec<_>>()
        .join("\n")
}

fn rules_and_results(rules: &[CauseRule], support: &str, n: usize) -> String {
    format!(
        "{RULES}\nBy generating counterfactual, we obtained the following rules:\n{}\n\n\
         {RESULTS}\nWe have checked that the rules are followed by {n} counterfactual:\n{support}\n",
        prose_list(rules)
    )
}

fn info_block(schema: &DatasetSchema) -> String {
    format!(
        "{DATASET_INFO}\nThe following info about the dataset is available:\n{}\n",
        schema.dataset_info()
    )
}

fn zero_shot(stage: Stage, ctx: &PromptContext) -> Result<String, PipelineError> {
    let task = &ctx.schema.task;
    Ok(match stage {
        Stage::ExtractCauses => {
            let cfs = need(ctx.cfs, stage, "counterfactuals")?;
            format!(
                "I'm providing a negative outcome from a {task} and your task is to extract the most \
                 important observed rules based on a set of counterfactual cases.\n\
                 {USER_DATA}\n{}\n\n{COUNTERFACTUALS}\n{}\n\n{}\n{RULES}\n{}\n",
                original_block(ctx),
                cfs_block(ctx, cfs),
                info_block(ctx.schema),
                crate::ruledsl::GRAMMAR,
            )
        }
        Stage::Explanation => {
            let cfs = need(ctx.cfs, stage, "counterfactuals")?;
            let rules = need(ctx.rules, stage, "rules")?;
            let support = need(ctx.support_text, stage, "support_text")?;
            format!(
                "A person has been classified in the negative class of {task}. The data is the following.\n\
                 {USER_DATA}\n{}\n\n{COUNTERFACTUALS}\n{}\n\n{}\n{}\
                 {EXPLANATION}\nGiven this information, provide an explanation to the user in plain \
                 language so that he/she can improve their chances of changing class. It should be as \
                 clear as possible and call to action. Consider that the higher amount of counterfactual \
                 that follow the rule, the more important that rule is.\n",
                original_block(ctx),
                cfs_block(ctx, cfs),
                rules_and_results(rules, support, cfs.len()),
                info_block(ctx.schema),
            )
        }
        Stage::TotMerge => {
            let branches = need(ctx.branches, stage, "branches")?;
            let mut out = format!(
                "A negative outcome from a {task} was provided to several systems that explain why that \
                 case is negative analyzing counterfactuals, generating rules and evaluating them.\n\
                 The results of the system are the following.\n"
            );
            for (i, b) in branches.iter().enumerate() {
                out.push_str(&format!(
                    "System {}:\n{}\n{EXPLANATION}\n{}\n\n",
                    i + 1,
                    rules_and_results(&b.rules, &b.support_text, b.counterfactuals.len()),
                    b.explanation.trim_end(),
                ));
            }
            out.push_str(
                "Given this information, provide an explanation to the user in plain language so that \
                 he/she can improve their chances of changing class. It should be as clear as possible \
                 and call to action. Consider that the higher amount of counterfactuals that follow the \
                 rule, the more important that rule is.\n",
            );
            out
        }
        Stage::FinalExample => {
            let explanation = need(ctx.explanation, stage, "explanation")?;
            format!(
                "A person has been classified in the negative class of {task}. The data is the following:\n\
                 {USER_DATA}\n{}\n\n{EXPLANATION}\nThe following explanation was given in order to try \
                 and change the class.\n{}\n\n{}\n{EXAMPLE}\nGiven this information, provide an example \
                 that would be in the positive class. Answer with a CSV block holding the header line \
                 below and exactly one data row; it will be saved as 'temp_csv.csv'.\n{}\n",
                original_block(ctx),
                explanation.trim_end(),
                info_block(ctx.schema),
                ctx.schema.header().join(","),
            )
        }
        Stage::EvalTable => {
            let rules = need(ctx.rules, stage, "rules")?;
            let support = need(ctx.support_text, stage, "support_text")?;
            let example = need(ctx.final_example, stage, "final_example")?;
            let n = ctx.cfs.map_or(0, <[Instance]>::len);
            let example = example.clone().with_label(example.label.unwrap_or(ctx.schema.label.desired));
            format!(
                "I'm providing a negative outcome from a {task}. A counterfactual example in the format \
                 of a single row was created in temp_csv.csv from the rules that are also provided. Check \
                 the number of rules followed by the example. The result must be given as a CSV table \
                 with columns 'Rule' with the text of the rule, 'Importance' with the number of \
                 counterfactuals that follow each rule, and 'In explanation' (1 or 0) depending if the \
                 final example follows the rule or not, with one row per rule in the order given. It \
                 will be saved as 'evaluation.csv'.\n\
                 {USER_DATA}\n{}\n\n{EXAMPLE}\n{}\n\n{}\n{}",
                original_block(ctx),
                tabular::serialize_instances(&[example], ctx.schema),
                rules_and_results(rules, support, n),
                info_block(ctx.schema),
            )
        }
    })
}

/// Renders the prompt for `stage`. The one-shot strategy prepends the bundled
/// worked example to the cause-extraction and explanation prompts.
pub fn render_prompt(stage: Stage, ctx: &PromptContext) -> Result<String, PipelineError> {
    let body = zero_shot(stage, ctx)?;
    let one_shot = ctx.strategy == Strategy::OneShot
        && matches!(stage, Stage::ExtractCauses | Stage::Explanation);
    if one_shot {
        Ok(format!("{}{body}", exemplar_block(stage)))
    } else {
        Ok(body)
    }
}

/// The bundled worked case: an original row, five counterfactuals and the
/// recorded answer of every stage.
pub struct WorkedExample {
    pub schema: DatasetSchema,
    pub original: Instance,
    pub counterfactuals: Vec<Instance>,
    pub causes_answer: &'static str,
    pub explanation_answer: &'static str,
    pub final_example_answer: &'static str,
    pub eval_table_answer: &'static str,
}

impl WorkedExample {
    pub fn bundled() -> &'static WorkedExample {
        static CELL: OnceLock<WorkedExample> = OnceLock::new();
        CELL.get_or_init(|| {
            let schema = parse_schema(include_str!("../fixtures/adult/adult.schema.toml"))
                .expect("bundled schema parses");
            let rows = tabular::read_dataset(
                include_str!("../fixtures/worked_example/counterfactuals.csv").as_bytes(),
                &schema,
            )
            .expect("bundled counterfactuals parse")
            .rows;
            WorkedExample {
                original: rows[0].clone(),
                counterfactuals: rows[1..].to_vec(),
                schema,
                causes_answer: include_str!("../fixtures/worked_example/causes_answer.txt"),
                explanation_answer: include_str!("../fixtures/worked_example/explanation_answer.txt"),
                final_example_answer: include_str!("../fixtures/worked_example/final_example_answer.txt"),
                eval_table_answer: include_str!("../fixtures/worked_example/eval_table_answer.txt"),
            }
        })
    }

    /// The recorded rules, validated, counted on the bundled counterfactuals and ranked.
    pub fn ranked_rules(&self) -> Vec<ValidatedRule> {
        let parsed = parse_rules(&extract_rule_block(self.causes_answer)).expect("bundled rules parse");
        let valid = validate_rules(&parsed, &self.schema).expect("bundled rules validate");
        rank_rules(&count_support_rows(&valid, &self.counterfactuals))
    }

    /// The scripted answer of this example for a stage.
    pub fn answer(&self, stage: Stage) -> &'static str {
        match stage {
            Stage::ExtractCauses => self.causes_answer,
            Stage::Explanation | Stage::TotMerge => self.explanation_answer,
            Stage::FinalExample => self.final_example_answer,
            Stage::EvalTable => self.eval_table_answer,
        }
    }
}

fn exemplar_block(stage: Stage) -> &'static str {
    static CAUSES: OnceLock<String> = OnceLock::new();
    static EXPLAIN: OnceLock<String> = OnceLock::new();
    let cell = if stage == Stage::ExtractCauses { &CAUSES } else { &EXPLAIN };
    cell.get_or_init(|| {
        let w = WorkedExample::bundled();
        let ranked = w.ranked_rules();
        let rules: Vec<CauseRule> = ranked.iter().map(|r| r.rule.clone()).collect();
        let support = support_lines(&ranked);
        let mut ctx = PromptContext::new(&w.schema, &w.original, Strategy::ZeroShot);
        ctx.cfs = Some(&w.counterfactuals);
        ctx.rules = Some(&rules);
        ctx.support_text = Some(&support);
        let prompt = zero_shot(stage, &ctx).expect("exemplar context is complete");
        format!(
            "Below is a solved example of this task.\n\
             ----- Example task -----\n{prompt}\n----- Example answer -----\n{}\n\
             ----- End of example -----\n\nNow solve the following task.\n",
            w.answer(stage).trim_end()
        )
    })
}

/// One request/response pair as issued by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub branch: Option<usize>,
    pub attempt: u8,
    pub key: String,
    pub prompt: String,
    pub response: String,
}

pub(crate) struct Asker<'a> {
    pub backend: &'a dyn LanguageModel,
    pub branch: Option<usize>,
    pub temperature: f64,
    pub exchanges: Vec<Exchange>,
}

impl<'a> Asker<'a> {
    pub(crate) fn new(backend: &'a dyn LanguageModel, branch: Option<usize>, temperature: f64) -> Self {
        Self { backend, branch, temperature, exchanges: Vec::new() }
    }

    pub(crate) fn ask(&mut self, stage: Stage, prompt: String, attempt: u8) -> Result<String, PipelineError> {
        let req = ChatRequest::new(stage, "", prompt).with_temperature(self.temperature);
        let completion = self
            .backend
            .complete(&req)
            .map_err(|source| PipelineError::Llm { stage, source })?;
        self.exchanges.push(Exchange {
            stage,
            branch: self.branch,
            attempt,
            key: canonical_key(&req),
            prompt: req.user_text,
            response: completion.text.clone(),
        });
        Ok(completion.text)
    }
}

/// Appended to a prompt whose answer failed validation.
pub fn correction(prompt: &str, problem: &str) -> String {
    format!(
        "{prompt}\n----- Correction -----\nYour previous answer could not be used: {problem}\n\
         Answer again and follow the required format exactly.\n"
    )
}

fn rules_from_answer(answer: &str, schema: &DatasetSchema) -> Result<Vec<ValidatedRule>, RuleError> {
    let parsed = parse_rules(&extract_rule_block(answer))?;
    validate_rules(&parsed, schema)
}

pub(crate) fn extract_causes_with(
    asker: &mut Asker,
    ctx: &PromptContext,
) -> Result<Vec<ValidatedRule>, PipelineError> {
    let cfs = need(ctx.cfs, Stage::ExtractCauses, "counterfactuals")?;
    if cfs.is_empty() {
        return Err(PipelineError::Precondition("no counterfactuals to extract causes from".into()));
    }
    let prompt = render_prompt(Stage::ExtractCauses, ctx)?;
    let answer = asker.ask(Stage::ExtractCauses, prompt.clone(), 1)?;
    let rules = match rules_from_answer(&answer, ctx.schema) {
        Ok(r) => r,
        Err(first) => {
            log::warn!("cause extraction rejected: {first}");
            let retry = asker.ask(Stage::ExtractCauses, correction(&prompt, &first.to_string()), 2)?;
            match rules_from_answer(&retry, ctx.schema) {
                Ok(r) => r,
                Err(e @ (RuleError::Empty | RuleError::Syntax { .. })) => {
                    return Err(PipelineError::NoRules { diagnostic: e.to_string() })
                }
                Err(e) => return Err(PipelineError::InvalidRules(e)),
            }
        }
    };
    Ok(rank_rules(&count_support_rows(&rules, cfs)))
}

/// Extracts, validates, counts and ranks the causes behind a counterfactual set.
pub fn extract_causes(
    backend: &dyn LanguageModel,
    ctx: &PromptContext,
) -> Result<(Vec<ValidatedRule>, Vec<Exchange>), PipelineError> {
    let mut asker = Asker::new(backend, None, 0.0);
    let rules = extract_causes_with(&mut asker, ctx)?;
    Ok((rules, asker.exchanges))
}

pub(crate) fn explain_with(
    asker: &mut Asker,
    stage: Stage,
    ctx: &PromptContext,
) -> Result<String, PipelineError> {
    let prompt = render_prompt(stage, ctx)?;
    let answer = asker.ask(stage, prompt.clone(), 1)?;
    if !answer.trim().is_empty() {
        return Ok(answer);
    }
    let retry = asker.ask(stage, correction(&prompt, "the answer was empty"), 2)?;
    if retry.trim().is_empty() {
        return Err(PipelineError::EmptyExplanation);
    }
    Ok(retry)
}

pub fn generate_explanation(
    backend: &dyn LanguageModel,
    ctx: &PromptContext,
) -> Result<(String, Vec<Exchange>), PipelineError> {
    let mut asker = Asker::new(backend, None, 0.0);
    let text = explain_with(&mut asker, Stage::Explanation, ctx)?;
    Ok((text, asker.exchanges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// `k` and `seed` of the search are the case's counterfactual count and seed.
    pub search: SearchConfig,
    pub tot_branches: Vec<Strategy>,
    pub tot_temperature: f64,
    pub dedupe_rules: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            tot_branches: vec![Strategy::ZeroShot, Strategy::ZeroShot, Strategy::OneShot],
            tot_temperature: 0.7,
            dedupe_rules: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    pub counterfactuals: CounterfactualSet,
    /// Fewer than `k` counterfactuals were found.
    pub cf_shortfall: bool,
    /// Ranked, with importance.
    pub rules: Vec<CauseRule>,
    pub support_text: String,
    pub explanation: String,
    pub branches: Vec<BranchResult>,
    pub exchanges: Vec<Exchange>,
}

impl CaseResult {
    pub fn original(&self) -> &Instance {
        &self.counterfactuals.original
    }

    /// Audit document with values written as dataset text.
    pub fn audit_json(&self, schema: &DatasetSchema) -> serde_json::Value {
        serde_json::json!({
            "case_id": self.case_id,
            "strategy": self.strategy,
            "k": self.k,
            "seed": self.seed,
            "counterfactuals": self.counterfactuals.report(schema),
            "cf_shortfall": self.cf_shortfall,
            "rules": self.rules,
            "support_text": self.support_text,
            "explanation": self.explanation,
            "branches": self.branches.iter().map(|b| serde_json::json!({
                "index": b.index,
                "strategy": b.strategy,
                "seed": b.seed,
                "counterfactuals": b.counterfactuals.report(schema),
                "cf_shortfall": b.cf_shortfall,
                "rules": b.rules,
                "support_text": b.support_text,
                "explanation": b.explanation,
            })).collect::<Vec<_>>(),
            "exchanges": self.exchanges,
        })
    }
}

struct BranchOutput {
    rules: Vec<ValidatedRule>,
    support_text: String,
    explanation: String,
}

fn run_branch(
    asker: &mut Asker,
    schema: &DatasetSchema,
    cfs: &CounterfactualSet,
    strategy: Strategy,
) -> Result<BranchOutput, PipelineError> {
    let mut ctx = PromptContext::new(schema, &cfs.original, strategy);
    ctx.cfs = Some(&cfs.counterfactuals);
    let ranked = extract_causes_with(asker, &ctx)?;
    let rules: Vec<CauseRule> = ranked.iter().map(|r| r.rule.clone()).collect();
    let support_text = support_lines(&ranked);
    ctx.rules = Some(&rules);
    ctx.support_text = Some(&support_text);
    let explanation = explain_with(asker, Stage::Explanation, &ctx)?;
    Ok(BranchOutput { rules: ranked, support_text, explanation })
}

/// Runs cause extraction and explanation on a given counterfactual set.
pub fn explain_with_counterfactuals(
    backend: &dyn LanguageModel,
    schema: &DatasetSchema,
    case_id: &str,
    counterfactuals: CounterfactualSet,
    strategy: Strategy,
    seed: u64,
) -> Result<CaseResult, PipelineError> {
    if strategy == Strategy::Tot {
        return Err(PipelineError::Precondition(
            "the tot strategy generates its own counterfactual sets".into(),
        ));
    }
    let mut asker = Asker::new(backend, None, 0.0);
    let out = run_branch(&mut asker, schema, &counterfactuals, strategy)?;
    Ok(CaseResult {
        case_id: case_id.to_string(),
        strategy,
        k: counterfactuals.len(),
        seed,
        cf_shortfall: false,
        counterfactuals,
        rules: out.rules.into_iter().map(|r| r.rule).collect(),
        support_text: out.support_text,
        explanation: out.explanation,
        branches: Vec::new(),
        exchanges: asker.exchanges,
    })
}

fn search_for(
    model: &dyn Classifier,
    scales: &FeatureScales,
    original: &Instance,
    search: &SearchConfig,
) -> Result<(CounterfactualSet, bool), PipelineError> {
    match generate_counterfactuals(model, original, search, scales) {
        Ok(set) => Ok((set, false)),
        Err(CfError::NotEnoughValid { found, requested, partial }) if found > 0 => {
            log::warn!("only {found} of {requested} counterfactuals found; continuing with the partial set");
            Ok((*partial, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// End to end for one case: counterfactual search, cause extraction and
/// explanation, or the branch-and-merge variant for [`Strategy::Tot`].
#[allow(clippy::too_many_arguments)]
pub fn explain_case(
    backend: &dyn LanguageModel,
    model: &dyn Classifier,
    scales: &FeatureScales,
    case_id: &str,
    original: &Instance,
    k: usize,
    strategy: Strategy,
    seed: u64,
    options: &PipelineOptions,
) -> Result<CaseResult, PipelineError> {
    let schema = model.schema();
    if model.predict(original) == schema.label.desired {
        return Err(PipelineError::Precondition(format!(
            "case {case_id} is already classified in the desired class"
        )));
    }
    if strategy == Strategy::Tot {
        return tot_explain(backend, model, scales, case_id, original, k, seed, options);
    }
    let search = SearchConfig { k, seed, ..options.search.clone() };
    let (cfs, shortfall) = search_for(model, scales, original, &search)?;
    let mut result = explain_with_counterfactuals(backend, schema, case_id, cfs, strategy, seed)?;
    result.k = k;
    result.cf_shortfall = shortfall;
    Ok(result)
}

fn dedupe_key(rule: &CauseRule) -> String {
    match &rule.predicate {
        Some(_) => rule.to_line().split(" :: ").next().unwrap_or_default().to_string(),
        None => format!("OBSERVATION {}", rule.prose.to_lowercase()),
    }
}

/// Branch-and-merge: each branch searches its own counterfactual set (seed
/// `seed + branch index`), extracts causes and explains; one merge prompt
/// combines the branches. Rules are concatenated across branches.
#[allow(clippy::too_many_arguments)]
pub fn tot_explain(
    backend: &dyn LanguageModel,
    model: &dyn Classifier,
    scales: &FeatureScales,
    case_id: &str,
    original: &Instance,
    k: usize,
    seed: u64,
    options: &PipelineOptions,
) -> Result<CaseResult, PipelineError> {
    let schema = model.schema();
    if options.tot_branches.is_empty() || options.tot_branches.contains(&Strategy::Tot) {
        return Err(PipelineError::Precondition(
            "tot branches must be a non-empty list of zero_shot/one_shot".into(),
        ));
    }
    type BranchOutput = (BranchResult, Vec<ValidatedRule>, Vec<Exchange>);
    let outputs: Vec<Result<BranchOutput, PipelineError>> = options
        .tot_branches
        .par_iter()
        .enumerate()
        .map(|(i, &strategy)| {
            let wrap = |e: PipelineError| PipelineError::Branch { branch: i + 1, source: Box::new(e) };
            let branch_seed = seed.wrapping_add(i as u64);
            let search = SearchConfig { k, seed: branch_seed, ..options.search.clone() };
            let (cfs, shortfall) = search_for(model, scales, original, &search).map_err(wrap)?;
            let mut asker = Asker::new(backend, Some(i + 1), options.tot_temperature);
            let out = run_branch(&mut asker, schema, &cfs, strategy).map_err(wrap)?;
            let branch = BranchResult {
                index: i + 1,
                strategy,
                seed: branch_seed,
                counterfactuals: cfs,
                cf_shortfall: shortfall,
                rules: out.rules.iter().map(|r| r.rule.clone()).collect(),
                support_text: out.support_text,
                explanation: out.explanation,
            };
            Ok((branch, out.rules, asker.exchanges))
        })
        .collect();

    let mut branches = Vec::new();
    let mut merged = Vec::new();
    let mut exchanges = Vec::new();
    let mut seen = HashSet::new();
    for output in outputs {
        let (branch, rules, ex) = output?;
        let mut in_listing_order = rules;
        in_listing_order.sort_by_key(|r| r.rule.id);
        for r in in_listing_order {
            if options.dedupe_rules && !seen.insert(dedupe_key(&r.rule)) {
                continue;
            }
            merged.push(r);
        }
        branches.push(branch);
        exchanges.extend(ex);
    }
    for (i, r) in merged.iter_mut().enumerate() {
        r.rule.id = i + 1;
        r.rule.rank = None;
    }
    let ranked = rank_rules(&merged);
    let support_text = support_lines(&ranked);

    let mut ctx = PromptContext::new(schema, original, Strategy::Tot);
    ctx.branches = Some(&branches);
    let mut asker = Asker::new(backend, None, 0.0);
    let explanation = explain_with(&mut asker, Stage::TotMerge, &ctx)?;
    exchanges.extend(asker.exchanges);

    Ok(CaseResult {
        case_id: case_id.to_string(),
        strategy: Strategy::Tot,
        k,
        seed,
        counterfactuals: branches[0].counterfactuals.clone(),
        cf_shortfall: branches.iter().any(|b| b.cf_shortfall),
        rules: ranked.into_iter().map(|r| r.rule).collect(),
        support_text,
        explanation,
        branches,
        exchanges,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cfgen::compute_scales;
    use crate::llm::FnModel;
    use crate::model::tests::{stump_params, toy_dataset, toy_instance};
    use crate::model::train_forest;
    use std::sync::Mutex;

    /// Answers each stage with the worked example's recorded answer.
    pub(crate) fn worked_backend() -> FnModel<impl Fn(&ChatRequest) -> Result<String, LlmError>> {
        FnModel(|r: &ChatRequest| Ok(WorkedExample::bundled().answer(r.stage).to_string()))
    }

    fn worked_ctx(w: &WorkedExample) -> PromptContext<'_> {
        let mut ctx = PromptContext::new(&w.schema, &w.original, Strategy::ZeroShot);
        ctx.cfs = Some(&w.counterfactuals);
        ctx
    }

    #[test]
    fn extract_prompt_layout() {
        let w = WorkedExample::bundled();
        let p = render_prompt(Stage::ExtractCauses, &worked_ctx(w)).unwrap();
        assert!(p.contains(USER_DATA) && p.contains(COUNTERFACTUALS) && p.contains(RULES));
        assert!(p.contains(crate::ruledsl::GRAMMAR));
        let block = p.split(COUNTERFACTUALS).nth(1).unwrap().trim_start();
        let lines: Vec<&str> = block.lines().take_while(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "41,Private,Prof-school,Married,Blue-Collar,White,Male,16,1");
        assert!(p.contains("41,Private,School,Married,Blue-Collar,White,Male,30,0"));
        assert!(p.starts_with("I'm providing a negative outcome from a ML-system that predicts"));
    }

    #[test]
    fn rendering_is_deterministic_and_checks_fields() {
        let w = WorkedExample::bundled();
        let ctx = worked_ctx(w);
        assert_eq!(
            render_prompt(Stage::ExtractCauses, &ctx).unwrap(),
            render_prompt(Stage::ExtractCauses, &ctx).unwrap()
        );
        assert!(matches!(
            render_prompt(Stage::Explanation, &ctx),
            Err(PipelineError::MissingField { field: "rules", .. })
        ));
        assert!(matches!(
            render_prompt(Stage::FinalExample, &ctx),
            Err(PipelineError::MissingField { field: "explanation", .. })
        ));
        assert!(matches!(
            render_prompt(Stage::TotMerge, &ctx),
            Err(PipelineError::MissingField { field: "branches", .. })
        ));
    }

    #[test]
    fn one_shot_only_prepends_the_example() {
        let w = WorkedExample::bundled();
        let ranked = w.ranked_rules();
        let rules: Vec<CauseRule> = ranked.iter().map(|r| r.rule.clone()).collect();
        let support = support_lines(&ranked);
        for stage in [Stage::ExtractCauses, Stage::Explanation] {
            let mut ctx = worked_ctx(w);
            ctx.rules = Some(&rules);
            ctx.support_text = Some(&support);
            let zero = render_prompt(stage, &ctx).unwrap();
            ctx.strategy = Strategy::OneShot;
            let one = render_prompt(stage, &ctx).unwrap();
            let prefix = one.strip_suffix(zero.as_str()).expect("zero-shot text is a suffix");
            assert_eq!(prefix, exemplar_block(stage));
            assert!(prefix.contains(w.answer(stage).trim_end()));
        }
        let mut ctx = worked_ctx(w);
        ctx.explanation = Some("x");
        let zero = render_prompt(Stage::FinalExample, &ctx).unwrap();
        ctx.strategy = Strategy::OneShot;
        assert_eq!(render_prompt(Stage::FinalExample, &ctx).unwrap(), zero);
    }

    #[test]
    fn worked_causes_and_explanation() {
        let w = WorkedExample::bundled();
        let backend = worked_backend();
        let (rules, ex) = extract_causes(&backend, &worked_ctx(w)).unwrap();
        let imp: Vec<usize> = rules.iter().map(|r| r.rule.importance).collect();
        assert_eq!(imp, [3, 1, 1, 1, 0]);
        assert_eq!(ex.len(), 1);
        let plain: Vec<CauseRule> = rules.iter().map(|r| r.rule.clone()).collect();
        let support = support_lines(&rules);
        let mut ctx = worked_ctx(w);
        ctx.rules = Some(&plain);
        ctx.support_text = Some(&support);
        let (text, _) = generate_explanation(&backend, &ctx).unwrap();
        assert!(text.starts_with("Based on the analysis of your current situation"));
        let prompt = render_prompt(Stage::Explanation, &ctx).unwrap();
        assert!(prompt.contains(RESULTS) && prompt.contains(DATASET_INFO));
        assert!(prompt.contains("We have checked that the rules are followed by 5 counterfactual:"));
    }

    #[test]
    fn hallucinated_feature_triggers_one_reprompt() {
        let w = WorkedExample::bundled();
        let prompts = Mutex::new(Vec::new());
        let backend = FnModel(|r: &ChatRequest| {
            let mut p = prompts.lock().unwrap();
            p.push(r.user_text.clone());
            Ok(if p.len() == 1 {
                "RULE salary gt 100 :: more salary".to_string()
            } else {
                "RULE education eq {Doctorate} :: doctorate".to_string()
            })
        });
        let (rules, ex) = extract_causes(&backend, &worked_ctx(w)).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].rule.importance, 1);
        assert_eq!(ex.len(), 2);
        assert!(prompts.lock().unwrap()[1].contains("unknown feature `salary`"));
    }

    #[test]
    fn no_rules_twice_aborts() {
        let w = WorkedExample::bundled();
        let backend = FnModel(|_: &ChatRequest| Ok("I cannot find any rules.".to_string()));
        assert!(matches!(
            extract_causes(&backend, &worked_ctx(w)),
            Err(PipelineError::NoRules { .. })
        ));
        let invalid = FnModel(|_: &ChatRequest| Ok("RULE salary gt 1 :: s".to_string()));
        assert!(matches!(
            extract_causes(&invalid, &worked_ctx(w)),
            Err(PipelineError::InvalidRules(_))
        ));
    }

    #[test]
    fn empty_explanation_is_retried_once() {
        let w = WorkedExample::bundled();
        let calls = Mutex::new(0);
        let backend = FnModel(|r: &ChatRequest| {
            if r.stage == Stage::ExtractCauses {
                return Ok(w.causes_answer.to_string());
            }
            let mut c = calls.lock().unwrap();
            *c += 1;
            Ok(if *c == 1 { "  ".into() } else { "second try".into() })
        });
        let cfs = CounterfactualSet {
            original: w.original.clone(),
            counterfactuals: w.counterfactuals.clone(),
            distances: vec![0.0; 5],
            valid: vec![true; 5],
            diversity: 0.0,
            changed_features: vec![Vec::new(); 5],
            desired: 1,
        };
        let result =
            explain_with_counterfactuals(&backend, &w.schema, "w", cfs.clone(), Strategy::ZeroShot, 0).unwrap();
        assert_eq!(result.explanation, "second try");
        let silent = FnModel(|r: &ChatRequest| {
            Ok(if r.stage == Stage::ExtractCauses { w.causes_answer.to_string() } else { String::new() })
        });
        assert!(matches!(
            explain_with_counterfactuals(&silent, &w.schema, "w", cfs, Strategy::ZeroShot, 0),
            Err(PipelineError::EmptyExplanation)
        ));
    }

    fn toy_backend() -> FnModel<impl Fn(&ChatRequest) -> Result<String, LlmError>> {
        FnModel(|r: &ChatRequest| {
            Ok(match r.stage {
                Stage::ExtractCauses => [
                    "RULE hpw gt 40 :: more hours",
                    "RULE hpw ge 60 :: many more hours",
                    "RULE education in {Bachelors, Doctorate} :: degree",
                    "RULE education eq {Doctorate} :: doctorate",
                    "OBSERVATION :: nothing else matters",
                ]
                .join("\n"),
                _ => format!("explanation for a prompt of {} bytes", r.user_text.len()),
            })
        })
    }

    #[test]
    fn tot_concatenates_branches_and_merges_in_order() {
        let d = toy_dataset();
        let stump = train_forest(&d, stump_params(), 7).unwrap();
        let scales = compute_scales(&d);
        let original = toy_instance(&d.schema, "School", 30);
        let options = PipelineOptions {
            search: SearchConfig { population: 20, generations: 5, ..SearchConfig::default() },
            ..PipelineOptions::default()
        };
        let backend = toy_backend();
        let r = explain_case(&backend, &stump, &scales, "c", &original, 2, Strategy::Tot, 11, &options).unwrap();
        assert_eq!(r.branches.len(), 3);
        assert_eq!(r.rules.len(), 15);
        assert_eq!(r.branches.iter().map(|b| b.seed).collect::<Vec<_>>(), [11, 12, 13]);
        let merge = r.exchanges.iter().find(|e| e.stage == Stage::TotMerge).unwrap();
        let positions: Vec<usize> = (1..=3).map(|i| merge.prompt.find(&format!("System {i}:")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(r.rules.windows(2).all(|w| w[0].importance >= w[1].importance));

        let dedup = PipelineOptions { dedupe_rules: true, ..options.clone() };
        let r2 = explain_case(&backend, &stump, &scales, "c", &original, 2, Strategy::Tot, 11, &dedup).unwrap();
        assert_eq!(r2.rules.len(), 5);

        let same_seed = PipelineOptions { tot_branches: vec![Strategy::ZeroShot; 2], ..options };
        let r3 = explain_case(&backend, &stump, &scales, "c", &original, 2, Strategy::Tot, 11, &same_seed).unwrap();
        assert_eq!(r3.branches[0].counterfactuals, r.branches[0].counterfactuals);
    }

    #[test]
    fn single_counterfactual_case_and_precondition() {
        let d = toy_dataset();
        let stump = train_forest(&d, stump_params(), 7).unwrap();
        let scales = compute_scales(&d);
        let options = PipelineOptions {
            search: SearchConfig { population: 20, generations: 5, ..SearchConfig::default() },
            ..PipelineOptions::default()
        };
        let backend = toy_backend();
        let original = toy_instance(&d.schema, "School", 30);
        let r = explain_case(&backend, &stump, &scales, "c", &original, 1, Strategy::ZeroShot, 3, &options).unwrap();
        assert_eq!(r.counterfactuals.len(), 1);
        assert!(!r.rules.is_empty());
        assert!(!r.explanation.is_empty());
        let rich = toy_instance(&d.schema, "School", 60);
        let err = explain_case(&backend, &stump, &scales, "c", &rich, 1, Strategy::ZeroShot, 3, &options).unwrap_err();
        assert!(err.is_precondition());
    }
}
