//! Counterfactual explanation pipeline for tabular binary classifiers.
//!
//! The crate generates diverse counterfactual examples against a classifier,
//! stages an LLM through cause extraction and explanation synthesis, verifies
//! the extracted causes natively with a small predicate DSL, and scores the
//! resulting explanation with a closed-loop evaluation.

pub mod cfgen;
pub mod evalloop;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod ruledsl;
pub mod tabular;

mod seed;

pub use seed::derive_seed;

/// Paths of the fixtures bundled with the crate.
pub mod fixtures {
    use std::path::PathBuf;

    pub fn dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
    }

    pub fn adult_csv() -> PathBuf {
        dir().join("adult").join("adult.csv")
    }

    pub fn adult_schema() -> PathBuf {
        dir().join("adult").join("adult.schema.toml")
    }

    pub fn worked_example_dir() -> PathBuf {
        dir().join("worked_example")
    }
}
