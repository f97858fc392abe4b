use std::fmt;
use std::process::ExitCode;

use cfx_core::cfgen::CfError;
use cfx_core::evalloop::EvalError;
use cfx_core::llm::LlmError;
use cfx_core::pipeline::PipelineError;

/// Stable exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Internal = 1,
    Usage = 2,
    Precondition = 3,
    Llm = 4,
}

/// An error with the exit status it maps to.
pub struct Failure {
    pub status: Status,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn new(status: Status, error: impl Into<anyhow::Error>) -> Self {
        Self { status, error: error.into() }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(Status::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status as u8)
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { status: self.status, error: self.error.context(msg) }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // causes already spelled out by their parent message are skipped
        let mut shown = String::new();
        for cause in self.error.chain() {
            let text = cause.to_string();
            if shown.contains(&text) {
                continue;
            }
            if !shown.is_empty() {
                shown.push_str(": ");
            }
            shown.push_str(&text);
        }
        f.write_str(&shown)
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {self}", self.status)
    }
}

pub trait OrStatus<T> {
    fn or_status(self, status: Status) -> CliResult<T>;
    fn or_usage(self) -> CliResult<T>
    where
        Self: Sized,
    {
        self.or_status(Status::Usage)
    }
}

impl<T, E: Into<anyhow::Error>> OrStatus<T> for Result<T, E> {
    fn or_status(self, status: Status) -> CliResult<T> {
        self.map_err(|e| Failure::new(status, e))
    }
}

fn llm_status(e: &LlmError) -> Status {
    match e {
        LlmError::Config(_) | LlmError::Transcript { .. } => Status::Usage,
        _ => Status::Llm,
    }
}

impl From<LlmError> for Failure {
    fn from(e: LlmError) -> Self {
        Failure::new(llm_status(&e), e)
    }
}

fn pipeline_status(e: &PipelineError) -> Status {
    match e {
        PipelineError::Precondition(_) => Status::Precondition,
        PipelineError::MissingField { .. } => Status::Internal,
        PipelineError::Llm { source, .. } => llm_status(source),
        PipelineError::Counterfactuals(CfError::InvalidConfig(_) | CfError::Input(_)) => Status::Usage,
        PipelineError::Counterfactuals(_) => Status::Precondition,
        PipelineError::Branch { source, .. } => pipeline_status(source),
        PipelineError::NoRules { .. }
        | PipelineError::InvalidRules(_)
        | PipelineError::EmptyExplanation
        | PipelineError::BadAnswer { .. } => Status::Llm,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::new(pipeline_status(&e), e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::Pipeline(p) => pipeline_status(p),
            EvalError::Rules(_) => Status::Llm,
            EvalError::Empty | EvalError::InvalidRecord(_) => Status::Usage,
        };
        Failure::new(status, e)
    }
}
