//! Language-model client interface and a fixture-driven deterministic mock.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which prompt a request was built from. Mock fixtures key on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CoreTask,
    Contributions,
    PrimaryQuery,
    QueryVariants,
    PublicationDate,
    Taxonomy,
    TaxonomyRepair,
    Narrative,
    OneLiner,
    Similarity,
    ContributionComparison,
    OverallAssessment,
    SiblingDistinction,
    SubtopicComparison,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub task: Task,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(task: Task, system_prompt: impl Into<String>, user_prompt: impl Into<String>, temperature: f64) -> Self {
        LlmRequest {
            task,
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("llm transport failure: {0}")]
    Transport(String),
    #[error("no canned response for {0} request")]
    NoResponse(Task),
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

/// Adapts a closure into a client. Handy for tests.
pub struct FnLlm<F>(pub F);

impl<F> LlmClient for FnLlm<F>
where
    F: Fn(&LlmRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (self.0)(request)
    }
}

/// One canned reply. JSON values other than strings are serialized compactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CannedResponse {
    Error { error: String },
    Text(String),
    Json(serde_json::Value),
}

impl CannedResponse {
    fn resolve(&self) -> Result<String, LlmError> {
        match self {
            CannedResponse::Error { error } => Err(LlmError::Transport(error.clone())),
            CannedResponse::Text(s) => Ok(s.clone()),
            CannedResponse::Json(v) => Ok(v.to_string()),
        }
    }
}

/// Fixture rule: applies to requests of `task` whose prompts contain every
/// string in `contains`. Responses are served in order; the last one repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub task: Task,
    #[serde(default)]
    pub contains: Vec<String>,
    pub responses: Vec<CannedResponse>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockLlmFixture {
    pub rules: Vec<MockRule>,
}

/// Deterministic client backed by [`MockLlmFixture`]. Rules are matched in
/// order, so more specific rules should come first.
#[derive(Debug, Default)]
pub struct MockLlm {
    rules: Vec<MockRule>,
    served: Mutex<HashMap<usize, usize>>,
    calls: Mutex<Vec<LlmRequest>>,
}

impl MockLlm {
    pub fn new(fixture: MockLlmFixture) -> Self {
        MockLlm {
            rules: fixture.rules,
            ..Default::default()
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    /// Builder shortcut for tests.
    pub fn rule(mut self, task: Task, contains: &[&str], responses: Vec<CannedResponse>) -> Self {
        self.rules.push(MockRule {
            task,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            responses,
        });
        self
    }

    pub fn reply(self, task: Task, contains: &[&str], response: impl Into<String>) -> Self {
        self.rule(task, contains, vec![CannedResponse::Text(response.into())])
    }

    pub fn calls(&self) -> Vec<LlmRequest> {
        self.calls.lock().unwrap().clone()
    }

    pub fn calls_for(&self, task: Task) -> usize {
        self.calls.lock().unwrap().iter().filter(|r| r.task == task).count()
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.calls.lock().unwrap().push(request.clone());
        let matched = self.rules.iter().enumerate().find(|(_, rule)| {
            rule.task == request.task
                && rule
                    .contains
                    .iter()
                    .all(|s| request.user_prompt.contains(s) || request.system_prompt.contains(s))
        });
        let Some((idx, rule)) = matched else {
            return Err(LlmError::NoResponse(request.task));
        };
        if rule.responses.is_empty() {
            return Err(LlmError::NoResponse(request.task));
        }
        let mut served = self.served.lock().unwrap();
        let n = served.entry(idx).or_insert(0);
        let response = &rule.responses[(*n).min(rule.responses.len() - 1)];
        *n += 1;
        response.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(task: Task, user: &str) -> LlmRequest {
        LlmRequest::new(task, "sys", user, 0.0)
    }

    #[test]
    fn rules_match_by_task_and_substring() {
        let mock = MockLlm::default()
            .reply(Task::SiblingDistinction, &["Paper B"], "b")
            .reply(Task::SiblingDistinction, &[], "any");
        assert_eq!(mock.complete(&req(Task::SiblingDistinction, "about Paper B")).unwrap(), "b");
        assert_eq!(mock.complete(&req(Task::SiblingDistinction, "about Paper C")).unwrap(), "any");
        assert_eq!(
            mock.complete(&req(Task::Taxonomy, "x")),
            Err(LlmError::NoResponse(Task::Taxonomy))
        );
        assert_eq!(mock.calls().len(), 3);
    }

    #[test]
    fn responses_are_sequential_then_sticky() {
        let mock = MockLlm::default().rule(
            Task::CoreTask,
            &[],
            vec![
                CannedResponse::Error { error: "boom".into() },
                CannedResponse::Text("one".into()),
            ],
        );
        assert!(mock.complete(&req(Task::CoreTask, "")).is_err());
        assert_eq!(mock.complete(&req(Task::CoreTask, "")).unwrap(), "one");
        assert_eq!(mock.complete(&req(Task::CoreTask, "")).unwrap(), "one");
        assert_eq!(mock.calls_for(Task::CoreTask), 3);
    }

    #[test]
    fn fixture_json_accepts_objects_as_responses() {
        let mock = MockLlm::from_json(
            r#"{"rules":[{"task":"narrative","responses":[{"narrative":"hi"}]},
                         {"task":"core_task","responses":[{"error":"down"}]}]}"#,
        )
        .unwrap();
        assert_eq!(mock.complete(&req(Task::Narrative, "")).unwrap(), r#"{"narrative":"hi"}"#);
        assert_eq!(
            mock.complete(&req(Task::CoreTask, "")),
            Err(LlmError::Transport("down".into()))
        );
    }
}
