//! Run configuration: a flat TOML key-value file, overridden by flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cfx_core::cfgen::SearchConfig;
use cfx_core::evalloop::EvalMode;
use cfx_core::llm::{Mode, DEFAULT_CONCURRENCY};
use cfx_core::pipeline::{PipelineOptions, Strategy};
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

pub const MAX_K: usize = 20;

/// Which rows the "In the data" check searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NoveltySplit {
    #[default]
    Full,
    /// Only the training split the model was fit on.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub k: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub llm_mode: Mode,
    pub transcript: Option<PathBuf>,
    pub llm_concurrency: usize,
    pub out: PathBuf,
    pub novelty_split: NoveltySplit,
    pub eval_mode: EvalMode,
    pub population: usize,
    pub generations: usize,
    pub w_validity: f64,
    pub w_proximity: f64,
    pub w_diversity: f64,
    pub immutable_features: Vec<String>,
    pub tot_branches: Vec<Strategy>,
    pub tot_temperature: f64,
    pub dedupe_rules: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        let pipeline = PipelineOptions::default();
        Self {
            dataset: None,
            schema: None,
            model: None,
            k: search.k,
            strategy: Strategy::ZeroShot,
            seed: 0,
            llm_mode: Mode::Replay,
            transcript: None,
            llm_concurrency: DEFAULT_CONCURRENCY,
            out: PathBuf::from("runs"),
            novelty_split: NoveltySplit::Full,
            eval_mode: EvalMode::Native,
            population: search.population,
            generations: search.generations,
            w_validity: search.w_validity,
            w_proximity: search.w_proximity,
            w_diversity: search.w_diversity,
            immutable_features: Vec::new(),
            tot_branches: pipeline.tot_branches,
            tot_temperature: pipeline.tot_temperature,
            dedupe_rules: pipeline.dedupe_rules,
        }
    }
}

impl RunConfig {
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.schema, &mut cfg.model, &mut cfg.transcript]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(1..=MAX_K).contains(&self.k) {
            return Err(Failure::usage(format!("k must be in 1..={MAX_K}, got {}", self.k)));
        }
        if self.llm_mode != Mode::Live && self.transcript.is_none() {
            return Err(Failure::usage(format!("llm mode {:?} requires a transcript path", self.llm_mode)));
        }
        if self.llm_concurrency == 0 {
            return Err(Failure::usage("llm_concurrency must be at least 1"));
        }
        Ok(())
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> CliResult<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Failure::usage(format!("missing `{name}` (set it in the config or pass --{name})")))
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            k: self.k,
            population: self.population,
            generations: self.generations,
            w_validity: self.w_validity,
            w_proximity: self.w_proximity,
            w_diversity: self.w_diversity,
            seed: self.seed,
            immutable_features: self.immutable_features.iter().cloned().collect::<BTreeSet<_>>(),
        }
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            search: self.search(),
            tot_branches: self.tot_branches.clone(),
            tot_temperature: self.tot_temperature,
            dedupe_rules: self.dedupe_rules,
        }
    }
}
