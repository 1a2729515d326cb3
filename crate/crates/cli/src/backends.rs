//! HTTP implementations of the model and search clients.

use std::time::Duration;

use novelty_core::llm::{LlmClient, LlmError, LlmRequest};
use novelty_core::retrieval::{SearchClient, SearchError, SearchHit};
use serde::Deserialize;
use serde_json::{json, Value};

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct ChatCompletions {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl ChatCompletions {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        ChatCompletions {
            agent: agent(timeout),
            url,
            model: model.to_string(),
            api_key,
        }
    }
}

impl LlmClient for ChatCompletions {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        let body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": messages,
        });
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Transport(format!("status {status}: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Transport(format!("status {status}: {value}")));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Transport("response has no message content".into()))
    }
}

/// Search service taking `POST {"query": ...}` and answering `{"hits": [...]}`.
pub struct HttpSearch {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct SearchResponse {
    hits: Vec<SearchHit>,
}

impl HttpSearch {
    pub fn new(url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        HttpSearch {
            agent: agent(timeout),
            url: url.to_string(),
            api_key,
        }
    }
}

impl SearchClient for HttpSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&json!({ "query": query }))
            .map_err(|e| SearchError::new(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(SearchError {
                message: format!("status {status}: {text}"),
                status: Some(status),
            });
        }
        let parsed: SearchResponse = resp.body_mut().read_json().map_err(|e| SearchError {
            message: e.to_string(),
            status: Some(status),
        })?;
        Ok(parsed.hits)
    }
}
