//! Chat-completion client over HTTP.
//!
//! `POST {base_url}/chat` with `{model, messages, temperature, max_tokens}`;
//! the reply text is `choices[0].message.content`.

use std::time::Duration;

use divgen_core::{ChatRequest, LlmClient, PromptError};
use serde::Deserialize;

pub const LLM_KEY_ENV: &str = "DIVGEN_LLM_KEY";

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

pub struct HttpLlm {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpLlm {
    /// Reads the bearer token from `DIVGEN_LLM_KEY` if set.
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self::with_key(base_url, timeout, std::env::var(LLM_KEY_ENV).ok())
    }

    pub fn with_key(base_url: &str, timeout: Duration, api_key: Option<String>) -> Self {
        HttpLlm {
            endpoint: format!("{}/chat", base_url.trim_end_matches('/')),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl LlmClient for HttpLlm {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PromptError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(request)
            .map_err(|e| PromptError::Llm(format!("POST {}: {e}", self.endpoint)))?;
        let body: ChatResponse = resp
            .into_json()
            .map_err(|e| PromptError::Llm(format!("malformed chat response: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| PromptError::Llm("chat response has no choices".into()))
    }
}
