//! OpenAI-compatible chat-completions transport over blocking HTTP.

use std::time::Duration;

use serde_json::{json, Value};

use capfuse::llm::{ChatRequest, ChatTransport, GatewayConfig};
use capfuse::{Error, Result};

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &GatewayConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key.clone(),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let reply: Value = call
            .send_json(body)
            .map_err(|e| Error::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Transport(format!("unreadable response body: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| Error::Transport(format!("no message content in response: {reply}")))
    }
}
