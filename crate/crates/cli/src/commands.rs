use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cfx_core::cfgen::{compute_scales, CounterfactualSet, FeatureScales};
use cfx_core::derive_seed;
use cfx_core::evalloop::{
    aggregate, evaluate_case, report_csv, report_text, CaseEvaluation, ClosedLoopRecord, GroupKey,
    EVALUATION_CSV, TEMP_CSV,
};
use cfx_core::llm::{Backend, Mode, OpenAiClient, Transcript};
use cfx_core::model::{accuracy, train_forest, Classifier, ForestModel, ForestParams};
use cfx_core::pipeline::{explain_case, explain_with_counterfactuals, CaseResult, Strategy};
use cfx_core::ruledsl::rule_list;
use cfx_core::tabular::{self, train_test_split, Dataset, DatasetSchema, MembershipIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::config::{NoveltySplit, RunConfig};
use crate::failure::{CliResult, Failure, OrStatus, Status};

pub const TRAIN_FRACTION: f64 = 0.8;
pub const RECORDS_FILE: &str = "records.jsonl";

pub struct Session {
    pub cfg: RunConfig,
    pub run_name: Option<String>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::new(Status::Internal, anyhow::anyhow!("writing {}: {e}", path.display())))
}

fn mkdir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::new(Status::Internal, anyhow::anyhow!("creating {}: {e}", path.display())))
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| serde_json::to_string(&x).expect("serializable") + "\n")
        .collect()
}

fn pretty<T: serde::Serialize>(x: &T) -> String {
    serde_json::to_string_pretty(x).expect("serializable") + "\n"
}

impl Session {
    pub fn schema(&self) -> CliResult<DatasetSchema> {
        let path = self.cfg.require(&self.cfg.schema, "schema")?;
        tabular::load_schema(path).or_usage()
    }

    pub fn dataset(&self, schema: &DatasetSchema) -> CliResult<Dataset> {
        let path = self.cfg.require(&self.cfg.dataset, "dataset")?;
        tabular::load_dataset(path, schema).or_usage()
    }

    pub fn model(&self, schema: &DatasetSchema) -> CliResult<ForestModel> {
        let path = self.cfg.require(&self.cfg.model, "model")?;
        ForestModel::load(path, schema)
            .or_usage()
            .map_err(|f| f.context(format!("loading model {}", path.display())))
    }

    pub fn backend(&self) -> CliResult<Backend> {
        let cfg = &self.cfg;
        let transcript = || cfg.require(&cfg.transcript, "transcript");
        let backend = match cfg.llm_mode {
            Mode::Replay => Backend::replay(Transcript::open_existing(transcript()?)?),
            Mode::Record => Backend::record(Arc::new(OpenAiClient::from_env()?), Transcript::open(transcript()?)?),
            Mode::Live => Backend::live(Arc::new(OpenAiClient::from_env()?)),
        };
        Ok(backend.with_concurrency(cfg.llm_concurrency))
    }

    /// A fresh directory under `out`: the run name if given (which must not
    /// exist yet), else `<utc timestamp>-seed<seed>` with a numeric suffix on collision.
    pub fn run_dir(&self) -> CliResult<PathBuf> {
        let out = &self.cfg.out;
        mkdir(out)?;
        let dir = match &self.run_name {
            Some(name) => {
                let dir = out.join(name);
                if dir.exists() {
                    return Err(Failure::usage(format!("run directory {} already exists", dir.display())));
                }
                dir
            }
            None => {
                let stem = format!("{}-seed{}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"), self.cfg.seed);
                let mut dir = out.join(&stem);
                let mut n = 1;
                while dir.exists() {
                    dir = out.join(format!("{stem}-{n}"));
                    n += 1;
                }
                dir
            }
        };
        mkdir(&dir)?;
        Ok(dir)
    }

    fn membership(&self, dataset: &Dataset, model: &ForestModel) -> MembershipIndex {
        match self.cfg.novelty_split {
            NoveltySplit::Full => MembershipIndex::new(dataset),
            NoveltySplit::Train => {
                let (train, _) = train_test_split(dataset.len(), TRAIN_FRACTION, model.train_seed);
                MembershipIndex::new(&dataset.subset(&train))
            }
        }
    }
}

pub fn train(session: &Session, force: bool) -> CliResult<()> {
    let cfg = &session.cfg;
    let model_path = cfg.require(&cfg.model, "model")?;
    if model_path.exists() && !force {
        return Err(Failure::usage(format!(
            "{} already exists (pass --force to replace it)",
            model_path.display()
        )));
    }
    let schema = session.schema()?;
    let dataset = session.dataset(&schema)?;
    let (train_idx, test_idx) = train_test_split(dataset.len(), TRAIN_FRACTION, cfg.seed);
    let train = dataset.subset(&train_idx);
    let test = dataset.subset(&test_idx);
    let params = ForestParams::default();
    let model = train_forest(&train, params, cfg.seed).or_usage()?;
    let acc = accuracy(&model, &test.rows);
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    model.save(model_path).or_status(Status::Internal)?;
    println!(
        "trained {} trees on {} rows (seed {}); held-out accuracy {:.4} on {} rows",
        params.n_trees,
        train.len(),
        cfg.seed,
        acc,
        test.len()
    );
    println!("model written to {}", model_path.display());
    Ok(())
}

pub struct ExplainArgs {
    pub case: Option<usize>,
    pub counterfactuals: Option<PathBuf>,
    pub case_id: Option<String>,
    pub evaluate: bool,
}

fn write_case_dir(dir: &Path, schema: &DatasetSchema, case: &CaseResult) -> CliResult<()> {
    mkdir(dir)?;
    write(&dir.join("counterfactuals.csv"), case.counterfactuals.to_csv(schema))?;
    write(&dir.join("rules.txt"), rule_list(&case.rules) + "\n")?;
    write(&dir.join("supports.txt"), case.support_text.clone() + "\n")?;
    write(&dir.join("explanation.txt"), case.explanation.trim_end().to_string() + "\n")?;
    write(&dir.join("exchanges.jsonl"), jsonl(&case.exchanges))?;
    write(&dir.join("case.json"), pretty(case))?;
    write(&dir.join("audit.json"), pretty(&case.audit_json(schema)))?;
    for b in &case.branches {
        let bdir = dir.join(format!("branch-{}", b.index));
        mkdir(&bdir)?;
        write(&bdir.join("counterfactuals.csv"), b.counterfactuals.to_csv(schema))?;
        write(&bdir.join("rules.txt"), rule_list(&b.rules) + "\n")?;
        write(&bdir.join("supports.txt"), b.support_text.clone() + "\n")?;
        write(&bdir.join("explanation.txt"), b.explanation.trim_end().to_string() + "\n")?;
    }
    Ok(())
}

fn write_evaluation(dir: &Path, ev: &CaseEvaluation) -> CliResult<()> {
    write(&dir.join(TEMP_CSV), &ev.temp_csv)?;
    write(&dir.join(EVALUATION_CSV), &ev.evaluation_csv)?;
    write(&dir.join("record.json"), pretty(&ev.record))?;
    write(&dir.join("evaluation_exchanges.jsonl"), jsonl(&ev.exchanges))
}

fn print_record(record: &ClosedLoopRecord) {
    println!("final example: {}", record.final_example.join(","));
    for (name, value) in record.metric_rows() {
        println!("{name}: {value}");
    }
}

pub fn explain(session: &Session, args: ExplainArgs) -> CliResult<()> {
    let cfg = &session.cfg;
    let schema = session.schema()?;
    let dataset = session.dataset(&schema)?;
    let model = session.model(&schema)?;
    let scales = compute_scales(&dataset);
    let backend = session.backend()?;
    let case = match (args.case, &args.counterfactuals) {
        (Some(_), Some(_)) => return Err(Failure::usage("pass either --case or --counterfactuals, not both")),
        (None, None) => return Err(Failure::usage("pass --case <row> or --counterfactuals <csv>")),
        (Some(row), None) => {
            let original = dataset
                .rows
                .get(row)
                .ok_or_else(|| Failure::usage(format!("case {row} is out of range (dataset has {} rows)", dataset.len())))?;
            let case_id = args.case_id.clone().unwrap_or_else(|| format!("row-{row}"));
            let seed = derive_seed(cfg.seed, row as u64);
            explain_case(&backend, &model, &scales, &case_id, original, cfg.k, cfg.strategy, seed, &cfg.pipeline())?
        }
        (None, Some(path)) => {
            if cfg.strategy == Strategy::Tot {
                return Err(Failure::usage("the tot strategy searches its own counterfactuals; use --case"));
            }
            let file = fs::File::open(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            let cfs = CounterfactualSet::read_csv(file, &model, &scales).or_usage()?;
            if model.predict(&cfs.original) == schema.label.desired {
                return Err(Failure::new(
                    Status::Precondition,
                    anyhow::anyhow!("the original row is already classified in the desired class"),
                ));
            }
            let case_id = args.case_id.clone().unwrap_or_else(|| "custom".into());
            explain_with_counterfactuals(&backend, &schema, &case_id, cfs, cfg.strategy, cfg.seed)?
        }
    };
    let run = session.run_dir()?;
    let dir = run.join(&case.case_id);
    write_case_dir(&dir, &schema, &case)?;
    if case.cf_shortfall {
        eprintln!("warning: only {} of {} counterfactuals found", case.counterfactuals.len(), cfg.k);
    }
    println!("{}", case.support_text);
    println!("{}", case.explanation.trim_end());
    if args.evaluate {
        let membership = session.membership(&dataset, &model);
        let ev = evaluate_case(&backend, &model, &membership, &case, cfg.eval_mode)?;
        write_evaluation(&dir, &ev)?;
        print_record(&ev.record);
    }
    println!("case directory: {}", dir.display());
    Ok(())
}

pub fn evaluate(session: &Session, case_dir: &Path, force: bool) -> CliResult<()> {
    let case_path = case_dir.join("case.json");
    let text = fs::read_to_string(&case_path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", case_path.display())))?;
    let case: CaseResult = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", case_path.display())))?;
    if case_dir.join(EVALUATION_CSV).exists() && !force {
        return Err(Failure::usage(format!(
            "{} is already evaluated (pass --force to replace the evaluation)",
            case_dir.display()
        )));
    }
    let schema = session.schema()?;
    let dataset = session.dataset(&schema)?;
    let model = session.model(&schema)?;
    let backend = session.backend()?;
    let membership = session.membership(&dataset, &model);
    let ev = evaluate_case(&backend, &model, &membership, &case, session.cfg.eval_mode)?;
    write_evaluation(case_dir, &ev)?;
    print_record(&ev.record);
    Ok(())
}

/// The first `n` rows, in seeded shuffle order, that the model puts in the
/// undesired class.
pub fn select_cases(model: &dyn Classifier, dataset: &Dataset, seed: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let desired = model.schema().label.desired;
    order
        .into_iter()
        .filter(|&i| model.predict(&dataset.rows[i]) != desired)
        .take(n)
        .collect()
}

fn write_reports(dir: &Path, records: &[ClosedLoopRecord], group_by: &[GroupKey]) -> CliResult<String> {
    let reports = aggregate(records, group_by)?;
    let text = report_text(&reports);
    write(&dir.join("report.csv"), report_csv(&reports))?;
    write(&dir.join("report.json"), pretty(&reports))?;
    write(&dir.join("report.txt"), &text)?;
    Ok(text)
}

pub fn experiment(session: &Session, n_cases: usize, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &session.cfg;
    if n_cases == 0 {
        return Err(Failure::usage("--n-cases must be at least 1"));
    }
    let schema = session.schema()?;
    let dataset = session.dataset(&schema)?;
    let model = session.model(&schema)?;
    let backend = session.backend()?;
    let scales: FeatureScales = compute_scales(&dataset);
    let membership = session.membership(&dataset, &model);
    let options = cfg.pipeline();
    options.search.validate(&schema).or_usage()?;

    let cases = select_cases(&model, &dataset, cfg.seed, n_cases);
    if cases.len() < n_cases {
        eprintln!("warning: only {} eligible cases, running all of them", cases.len());
    }
    let mut threads = jobs.unwrap_or_else(rayon::current_num_threads).max(1);
    if cfg.llm_mode != Mode::Replay {
        threads = threads.min(cfg.llm_concurrency);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .or_status(Status::Internal)?;

    let run = session.run_dir()?;
    let cases_dir = run.join("cases");
    let outcomes: Vec<(String, CliResult<ClosedLoopRecord>)> = pool.install(|| {
        cases
            .par_iter()
            .map(|&row| {
                let case_id = format!("row-{row}");
                let outcome = (|| {
                    let seed = derive_seed(cfg.seed, row as u64);
                    let original = &dataset.rows[row];
                    let case = explain_case(&backend, &model, &scales, &case_id, original, cfg.k, cfg.strategy, seed, &options)?;
                    let ev = evaluate_case(&backend, &model, &membership, &case, cfg.eval_mode)?;
                    let dir = cases_dir.join(&case_id);
                    write_case_dir(&dir, &schema, &case)?;
                    write_evaluation(&dir, &ev)?;
                    Ok(ev.record)
                })();
                (case_id, outcome)
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut worst = None;
    for (case_id, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(f) => {
                eprintln!("case {case_id} failed: {f}");
                failures.push(serde_json::json!({ "case_id": case_id, "exit_code": f.status as u8, "error": f.to_string() }));
                worst.get_or_insert(f);
            }
        }
    }
    write(&run.join(RECORDS_FILE), jsonl(&records))?;
    if !failures.is_empty() {
        write(&run.join("failures.jsonl"), jsonl(&failures))?;
    }
    write(&run.join("config.toml"), toml::to_string(cfg).or_status(Status::Internal)?)?;
    if records.is_empty() {
        let f = worst.unwrap_or_else(|| Failure::usage("no eligible cases"));
        return Err(f.context("every case failed"));
    }
    let text = write_reports(&run, &records, &[GroupKey::Strategy, GroupKey::K])?;
    print!("{text}");
    println!("{} cases, {} failed; run directory: {}", records.len() + failures.len(), failures.len(), run.display());
    Ok(())
}

/// Parses a records file; errors name the offending line.
pub fn read_records(path: &Path) -> CliResult<Vec<ClosedLoopRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ClosedLoopRecord = serde_json::from_str(line)
            .map_err(|e| Failure::usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        r.check().map_err(|e| Failure::usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Failure::usage(format!("{} contains no records", path.display())));
    }
    Ok(records)
}

pub fn report(session: &Session, records_path: &Path, group_by: &[GroupKey]) -> CliResult<()> {
    let records = read_records(records_path)?;
    let run = session.run_dir()?;
    let text = write_reports(&run, &records, group_by)?;
    print!("{text}");
    println!("report written to {}", run.join("report.csv").display());
    Ok(())
}
