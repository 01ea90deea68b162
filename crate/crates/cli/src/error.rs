// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use tarot_core::analysis::AnalysisError;
use tarot_core::bayesopt::{BayesOptError, FailureCause, OptFailure};
use tarot_core::intervention::InterventionError;
use tarot_core::memlab::MemlabError;
use tarot_core::model::ModelError;
use tarot_core::objectives::ObjectiveError;
use tarot_core::taskforge::TaskError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Io,
    Validation,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Io => 1,
            Kind::Validation => 2,
            Kind::Numerical => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: Kind::Validation, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self { kind: Kind::Numerical, message: message.into() }
    }

    pub fn io(context: &str, err: impl fmt::Display) -> Self {
        Self { kind: Kind::Io, message: format!("{context}: {err}") }
    }

    pub fn context(mut self, context: &str) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn with(kind: Kind, e: impl fmt::Display) -> CliError {
    CliError { kind, message: e.to_string() }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::NonFiniteLoss | ModelError::Linalg(_) => Kind::Numerical,
        ModelError::Io(_) => Kind::Io,
        _ => Kind::Validation,
    }
}

fn objective_kind(e: &ObjectiveError) -> Kind {
    match e {
        ObjectiveError::Model(m) => model_kind(m),
        ObjectiveError::Io(_) => Kind::Io,
        _ => Kind::Validation,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        with(model_kind(&e), e)
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        with(objective_kind(&e), e)
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        let kind = match &e {
            TaskError::Dataset(o) => objective_kind(o),
            _ => Kind::Validation,
        };
        with(kind, e)
    }
}

impl From<BayesOptError> for CliError {
    fn from(e: BayesOptError) -> Self {
        let kind = match e {
            BayesOptError::Factorization { .. } | BayesOptError::NonFiniteValue(..) => Kind::Numerical,
            _ => Kind::Validation,
        };
        with(kind, e)
    }
}

impl From<OptFailure<ObjectiveError>> for CliError {
    fn from(e: OptFailure<ObjectiveError>) -> Self {
        let at = e.history.len();
        let err: CliError = match e.cause {
            FailureCause::Objective(o) => o.into(),
            FailureCause::Optimizer(b) => b.into(),
        };
        err.context(&format!("search failed after {at} evaluations"))
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let kind = match &e {
            AnalysisError::Model(m) => model_kind(m),
            AnalysisError::Linalg(_) => Kind::Numerical,
            _ => Kind::Validation,
        };
        with(kind, e)
    }
}

impl From<InterventionError> for CliError {
    fn from(e: InterventionError) -> Self {
        with(Kind::Validation, e)
    }
}

impl From<MemlabError> for CliError {
    fn from(e: MemlabError) -> Self {
        let kind = match e {
            MemlabError::Diverged(_) | MemlabError::Linalg(_) => Kind::Numerical,
            _ => Kind::Validation,
        };
        with(kind, e)
    }
}
