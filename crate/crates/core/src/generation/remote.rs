//! HTTP client for a remote generation endpoint.
//!
//! Protocol (JSON over POST):
//!
//! * `{base}/generate` takes `{query, image_ref?, temperature, top_p, seed?,
//!   want_logprobs: true}` and returns `{steps, answer, full_token_logprobs,
//!   answer_token_logprobs}`.
//! * `{base}/score` takes `{query, image_ref?, steps, answer}` and returns
//!   `{answer_token_logprobs}`. It is called only when a generation response
//!   omits the answer view.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Capabilities, GeneratedSequence, GenerationBackend, GenerationError, SamplerConfig};
use crate::data::Example;
use crate::seed::SeedTree;

/// Environment variable holding a bearer token for the endpoint.
pub const CREDENTIALS_ENV: &str = "CORAP_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Whether the server honors the `seed` field. When false, no seed is
    /// sent and the backend reports itself as non-reproducible.
    #[serde(default)]
    pub honors_seed: bool,
    #[serde(default)]
    pub model_tag: Option<String>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            honors_seed: false,
            model_tag: None,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.trim_end_matches('/'), path)
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    tag: String,
    agent: ureq::Agent,
    token: Option<String>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("config", &self.config)
            .field("has_token", &self.token.is_some())
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(
                config.timeout_secs.max(0.001),
            )))
            .build()
            .into();
        let tag = config
            .model_tag
            .clone()
            .unwrap_or_else(|| format!("remote:{}", config.endpoint));
        Self {
            token: std::env::var(CREDENTIALS_ENV)
                .ok()
                .filter(|t| !t.is_empty()),
            config,
            tag,
            agent,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GenerationError> {
        let url = self.config.url(path);
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            let mut req = self.agent.post(&url);
            if let Some(token) = &self.token {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<Value>()
                        .map_err(|e| GenerationError::Malformed(format!("{url}: {e}")));
                }
                Err(e) => {
                    log::debug!("POST {url} attempt {} failed: {e}", attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        Err(GenerationError::Unavailable(format!("{url}: {last_err}")))
    }
}

fn number_list(obj: &Value, field: &str) -> Result<Option<Vec<f64>>, GenerationError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| {
                    GenerationError::Malformed(format!("`{field}` must contain numbers"))
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(GenerationError::Malformed(format!(
            "`{field}` must be an array"
        ))),
    }
}

/// Parses a generation response; a missing answer view is returned as `None`.
pub fn parse_generation(
    resp: &Value,
) -> Result<(Vec<String>, String, Vec<f64>, Option<Vec<f64>>), GenerationError> {
    let steps = match resp.get("steps") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str().map(str::to_owned).ok_or_else(|| {
                    GenerationError::Malformed("`steps` must contain strings".into())
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        None | Some(Value::Null) => return Err(GenerationError::MissingField("steps".into())),
        Some(_) => {
            return Err(GenerationError::Malformed(
                "`steps` must be an array".into(),
            ))
        }
    };
    let answer = resp
        .get("answer")
        .and_then(Value::as_str)
        .ok_or_else(|| GenerationError::MissingField("answer".into()))?
        .to_owned();
    let full = number_list(resp, "full_token_logprobs")?
        .ok_or_else(|| GenerationError::MissingField("full_token_logprobs".into()))?;
    let answer_view = number_list(resp, "answer_token_logprobs")?;
    Ok((steps, answer, full, answer_view))
}

impl GenerationBackend for RemoteBackend {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            reproducible: self.config.honors_seed,
            two_phase_scoring: true,
        }
    }

    fn sample(
        &self,
        example: &Example,
        config: &SamplerConfig,
        stream: &SeedTree,
    ) -> Result<GeneratedSequence, GenerationError> {
        let mut request = json!({
            "query": example.query,
            "temperature": config.temperature,
            "top_p": config.top_p,
            "want_logprobs": true,
        });
        if let Some(img) = &example.image_ref {
            request["image_ref"] = json!(img);
        }
        if self.config.honors_seed {
            request["seed"] = json!(stream.seed_u64());
        }
        let resp = self.post("generate", &request)?;
        let (steps, answer, full, answer_view) = parse_generation(&resp)?;

        let answer_lps = match answer_view {
            Some(v) => v,
            None => {
                let mut score_req =
                    json!({ "query": example.query, "steps": steps, "answer": answer });
                if let Some(img) = &example.image_ref {
                    score_req["image_ref"] = json!(img);
                }
                let scored = self.post("score", &score_req)?;
                number_list(&scored, "answer_token_logprobs")?
                    .ok_or_else(|| GenerationError::MissingField("answer_token_logprobs".into()))?
            }
        };
        GeneratedSequence::new(steps, answer, full, answer_lps, 1)
            .map_err(|e| GenerationError::Malformed(e.to_string()))
    }
}
