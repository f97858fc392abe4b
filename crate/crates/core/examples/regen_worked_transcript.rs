//! Rebuilds `fixtures/worked_example/transcript.jsonl` from the recorded
//! stage answers. Run after any change to the prompt templates:
//!
//!     cargo run -p cfx-core --example regen_worked_transcript

use std::sync::Arc;

use cfx_core::cfgen::CounterfactualSet;
use cfx_core::evalloop::{evaluate_case, EvalMode};
use cfx_core::llm::{Backend, ChatRequest, FnModel, LlmError, Transcript};
use cfx_core::model::{train_forest, ForestParams};
use cfx_core::pipeline::{explain_with_counterfactuals, Strategy, WorkedExample};
use cfx_core::tabular::{Dataset, MembershipIndex};

fn main() -> anyhow::Result<()> {
    let path = cfx_core::fixtures::worked_example_dir().join("transcript.jsonl");
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let scripted = FnModel(|r: &ChatRequest| -> Result<String, LlmError> {
        Ok(WorkedExample::bundled().answer(r.stage).to_string())
    });
    let backend = Backend::record(Arc::new(scripted), Transcript::open(&path)?);

    let w = WorkedExample::bundled();
    let n = w.counterfactuals.len();
    // the evaluation stages only need a classifier to score validity
    let rows = w.counterfactuals.iter().map(|c| c.clone().with_label(1));
    let data = Dataset { schema: w.schema.clone(), rows: rows.chain([w.original.clone().with_label(0)]).collect() };
    let model = train_forest(&data, ForestParams { n_trees: 1, ..Default::default() }, 0)?;
    let membership = MembershipIndex::new(&data);

    for strategy in [Strategy::ZeroShot, Strategy::OneShot] {
        let cfs = CounterfactualSet {
            original: w.original.clone(),
            counterfactuals: w.counterfactuals.clone(),
            distances: vec![0.0; n],
            valid: vec![true; n],
            diversity: 0.0,
            changed_features: vec![Vec::new(); n],
            desired: 1,
        };
        let case = explain_with_counterfactuals(&backend, &w.schema, "worked", cfs, strategy, 0)?;
        for mode in [EvalMode::Native, EvalMode::LlmTable] {
            evaluate_case(&backend, &model, &membership, &case, mode)?;
        }
    }
    println!("{} upstream calls recorded to {}", backend.upstream_calls(), path.display());
    Ok(())
}
