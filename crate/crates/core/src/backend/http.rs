use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    ApproxTokenCounter, Backend, BackendError, BackendRequest, BackendResponse, TokenCounter,
    UsageSource,
};

/// Field-name dialect of a chat-completion endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    /// `messages` in, `choices[0].message.content` and
    /// `usage.{prompt,completion}_tokens` out. Also covers most hosted
    /// open-weight model gateways.
    OpenAi,
    /// `content[].text` and `usage.{input,output}_tokens`.
    Anthropic,
}

impl Provider {
    pub fn body(self, req: &BackendRequest) -> Value {
        let messages = json!([{ "role": "user", "content": req.prompt }]);
        match self {
            Provider::OpenAi => json!({
                "model": req.model,
                "messages": messages,
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
            }),
            Provider::Anthropic => json!({
                "model": req.model,
                "max_tokens": req.max_output_tokens,
                "temperature": req.temperature,
                "messages": messages,
            }),
        }
    }

    /// Completion text and, when reported, `(input, output)` token usage.
    pub fn parse(self, body: &Value) -> Result<(String, Option<(u64, u64)>), BackendError> {
        let malformed = |what: &str| BackendError::Malformed(format!("missing {what}"));
        let (text, usage_fields) = match self {
            Provider::OpenAi => {
                let text = body
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| malformed("choices[0].message.content"))?
                    .to_owned();
                (text, ("prompt_tokens", "completion_tokens"))
            }
            Provider::Anthropic => {
                let blocks = body
                    .get("content")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("content"))?;
                let text: String = blocks
                    .iter()
                    .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
                    .filter_map(|b| b.get("text").and_then(Value::as_str))
                    .collect();
                (text, ("input_tokens", "output_tokens"))
            }
        };
        let usage = body.get("usage").and_then(|u| {
            let i = u.get(usage_fields.0)?.as_u64()?;
            let o = u.get(usage_fields.1)?.as_u64()?;
            Some((i, o))
        });
        Ok((text, usage))
    }
}

#[derive(Clone)]
pub struct HttpConfig {
    /// Backend id; also names the credential variable `EPIBENCH_<ID>_KEY`.
    pub name: String,
    pub endpoint: String,
    pub api_key: String,
    pub provider: Provider,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn credential_var(name: &str) -> String {
        let upper: String = name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_uppercase()
                } else {
                    '_'
                }
            })
            .collect();
        format!("EPIBENCH_{upper}_KEY")
    }

    /// Reads the credential from the environment.
    pub fn from_env(name: &str, endpoint: &str, provider: Provider) -> Result<Self, BackendError> {
        let var = Self::credential_var(name);
        let api_key = std::env::var(&var)
            .map_err(|_| BackendError::Config(format!("credential variable {var} is not set")))?;
        Ok(Self {
            name: name.to_owned(),
            endpoint: endpoint.to_owned(),
            api_key,
            provider,
            timeout: Duration::from_secs(120),
        })
    }
}

/// Blocking chat-completion client.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    counter: Arc<dyn TokenCounter>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            counter: Arc::new(ApproxTokenCounter),
        }
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let started = Instant::now();
        let mut call = self
            .agent
            .post(&self.config.endpoint)
            .header("content-type", "application/json");
        call = match self.config.provider {
            Provider::OpenAi => {
                call.header("authorization", format!("Bearer {}", self.config.api_key))
            }
            Provider::Anthropic => call
                .header("x-api-key", &self.config.api_key)
                .header("anthropic-version", "2023-06-01"),
        };
        let mut resp = call
            .send_json(self.config.provider.body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("status {status}"))),
            429 => return Err(BackendError::RateLimited { retry_after }),
            500..=599 => return Err(BackendError::Transport(format!("status {status}"))),
            _ => return Err(BackendError::Rejected { status, body }),
        }
        let value: Value =
            serde_json::from_str(&body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let (text, usage) = self.config.provider.parse(&value)?;
        let (input_tokens, output_tokens, usage_source) = match usage {
            Some((i, o)) => (i, o, UsageSource::Reported),
            None => (
                self.counter.count(&request.prompt),
                self.counter.count(&text),
                UsageSource::Counted,
            ),
        };
        Ok(BackendResponse {
            text,
            input_tokens,
            output_tokens,
            usage_source,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
