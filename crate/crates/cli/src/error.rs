use std::fmt;

use abc_core::checkpoint::CheckpointError;
use abc_core::corpus::CorpusError;
use abc_core::eval::EvalError;
use abc_core::jsonl::JsonlError;
use abc_core::mining::MiningError;
use abc_core::trainer::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Config,
    Run,
}

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn config(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn run(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind: Kind::Run,
            message: message.into(),
        }
    }

    /// Config-classified errors exit 3, everything else 1.
    pub fn from_error<E: Classify>(stage: &'static str, e: E) -> Self {
        let kind = if e.is_config() { Kind::Config } else { Kind::Run };
        Self {
            stage,
            kind,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::Run => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            Kind::Usage => write!(f, "{}: {}", self.stage, self.message),
            Kind::Config => write!(f, "{}: invalid config: {}", self.stage, self.message),
            Kind::Run => write!(f, "{} failed: {}", self.stage, self.message),
        }
    }
}

/// Whether an error stems from a bad configuration value.
pub trait Classify: fmt::Display {
    fn is_config(&self) -> bool {
        false
    }
}

impl Classify for RunError {
    fn is_config(&self) -> bool {
        match self {
            RunError::Config(_) => true,
            RunError::Mining(e) => e.is_config(),
            RunError::Corpus(e) => e.is_config(),
            _ => false,
        }
    }
}

impl Classify for MiningError {
    fn is_config(&self) -> bool {
        matches!(self, MiningError::InvalidConfig(_))
    }
}

impl Classify for CorpusError {
    fn is_config(&self) -> bool {
        matches!(
            self,
            CorpusError::InvalidConfig(_)
                | CorpusError::VocabularyTooSmall { .. }
                | CorpusError::InsufficientBenchImages { .. }
                | CorpusError::MissingPlaceholder(_)
                | CorpusError::UnknownTemplateWord(_)
        )
    }
}

impl Classify for EvalError {
    fn is_config(&self) -> bool {
        match self {
            EvalError::KTooLarge { .. } | EvalError::ZeroK => true,
            EvalError::Corpus(e) => e.is_config(),
            _ => false,
        }
    }
}
impl Classify for CheckpointError {}
impl Classify for JsonlError {}
impl Classify for std::io::Error {}
impl Classify for serde_json::Error {}

pub trait Staged<T> {
    fn at(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Classify> Staged<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_error(stage, e))
    }
}
