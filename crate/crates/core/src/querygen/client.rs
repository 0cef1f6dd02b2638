use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mock::document_prefix_completion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<CompletionChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
}

impl CompletionResponse {
    pub fn single(text: impl Into<String>) -> Self {
        Self {
            choices: vec![CompletionChoice { text: text.into() }],
        }
    }
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String>;

    fn model_name(&self) -> &str;
}

/// Completion endpoint reached over HTTP with a JSON body.
pub struct HttpClient {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| Error::Endpoint(format!("{}: {e}", self.url)))?;
        let body: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Endpoint(format!("{}: bad response body: {e}", self.url)))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| Error::Endpoint(format!("{}: response has no choices", self.url)))
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// In-process stand-ins for an LLM endpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum MockClient {
    /// Always returns the same text.
    Fixed(String),
    /// Every request fails.
    Failing,
    /// First `words` words of the target document, see
    /// [`document_prefix_completion`].
    DocumentPrefix { words: usize },
    /// Looks the prompt up in a recorded transcript.
    Replay(HashMap<String, String>),
}

impl CompletionClient for MockClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        match self {
            MockClient::Fixed(text) => Ok(text.clone()),
            MockClient::Failing => Err(Error::Endpoint("mock endpoint configured to fail".into())),
            MockClient::DocumentPrefix { words } => {
                Ok(document_prefix_completion(&request.prompt, *words))
            }
            MockClient::Replay(map) => map
                .get(&request.prompt)
                .cloned()
                .ok_or_else(|| Error::Endpoint("prompt not in replay transcript".into())),
        }
    }

    fn model_name(&self) -> &str {
        "mock"
    }
}
