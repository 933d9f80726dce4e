//! HTTPS text-completion backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendReply, CompletionRequest, ModelTag};
use crate::error::{PgtError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiveConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub seed_model: String,
    pub bootstrap_model: String,
    pub timeout_s: u64,
    /// JSON pointer to the completion text in the response body.
    pub text_pointer: String,
    /// JSON pointer to an array of per-token log-probabilities, if any.
    pub logprobs_pointer: String,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/completions".into(),
            api_key_env: "PGT_API_KEY".into(),
            seed_model: "gpt-4".into(),
            bootstrap_model: "flan-t5-xxl".into(),
            timeout_s: 60,
            text_pointer: "/choices/0/text".into(),
            logprobs_pointer: "/choices/0/logprobs/token_logprobs".into(),
        }
    }
}

pub struct LiveBackend {
    cfg: LiveConfig,
    key: String,
    agent: ureq::Agent,
}

impl LiveBackend {
    /// Fails when the credential variable is unset.
    pub fn from_env(cfg: LiveConfig) -> Result<Self> {
        let key = std::env::var(&cfg.api_key_env).map_err(|_| PgtError::Auth(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(cfg.timeout_s)).build();
        Ok(Self { cfg, key, agent })
    }

    fn model(&self, tag: ModelTag) -> &str {
        match tag {
            ModelTag::SeedTeacher => &self.cfg.seed_model,
            ModelTag::BootstrapTeacher => &self.cfg.bootstrap_model,
        }
    }
}

/// Extracts text and mean token log-probability from a response body.
pub fn parse_response(body: &Value, text_pointer: &str, logprobs_pointer: &str) -> Result<BackendReply> {
    let text = body
        .pointer(text_pointer)
        .and_then(Value::as_str)
        .ok_or_else(|| PgtError::Backend(format!("response has no string at {text_pointer}")))?
        .to_string();
    let logprob = body.pointer(logprobs_pointer).and_then(Value::as_array).and_then(|xs| {
        let vals: Vec<f64> = xs.iter().filter_map(Value::as_f64).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    });
    Ok(BackendReply { text, logprob })
}

impl Backend for LiveBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply> {
        let payload = json!({
            "model": self.model(req.model_tag),
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "logprobs": 1,
        });
        let resp = self.agent.post(&self.cfg.endpoint).set("Authorization", &format!("Bearer {}", self.key)).send_json(payload);
        match resp {
            Ok(r) => {
                let body: Value = r.into_json().map_err(|e| PgtError::Backend(format!("unreadable response: {e}")))?;
                parse_response(&body, &self.cfg.text_pointer, &self.cfg.logprobs_pointer)
            }
            Err(ureq::Error::Status(code @ (401 | 403), _)) => Err(PgtError::Auth(format!("endpoint returned {code}"))),
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => Err(PgtError::Backend(format!("endpoint returned {code}"))),
            Err(ureq::Error::Status(code, r)) => Err(PgtError::InvalidInput(format!("endpoint returned {code}: {}", r.into_string().unwrap_or_default()))),
            Err(e) => Err(PgtError::Backend(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_text_and_mean_logprob() {
        let body = json!({"choices": [{"text": "QUESTION: x", "logprobs": {"token_logprobs": [-1.0, -0.5]}}]});
        let r = parse_response(&body, "/choices/0/text", "/choices/0/logprobs/token_logprobs").unwrap();
        assert_eq!(r.text, "QUESTION: x");
        assert_eq!(r.logprob, Some(-0.75));
    }

    #[test]
    fn missing_credentials_are_fatal() {
        let cfg = LiveConfig { api_key_env: "PGT_TEST_UNSET_KEY_VARIABLE".into(), ..Default::default() };
        assert!(matches!(LiveBackend::from_env(cfg), Err(PgtError::Auth(_))));
    }
}
