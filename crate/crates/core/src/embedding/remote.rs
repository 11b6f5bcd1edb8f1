//! Client for an embeddings REST endpoint of the common shape
//! `POST {base}/embeddings {"model", "input": [...]}` returning
//! `{"data": [{"embedding": [...]}, ...]}`.

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};

pub const ENV_URL: &str = "SCHEMADAPT_EMBED_URL";
pub const ENV_KEY: &str = "SCHEMADAPT_EMBED_KEY";
pub const ENV_MODEL: &str = "SCHEMADAPT_EMBED_MODEL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub dimension: usize,
    pub max_batch: usize,
    pub max_attempts: u32,
    pub timeout_secs: u64,
}

impl RemoteConfig {
    /// Read endpoint, key and model from the environment.
    pub fn from_env(dimension: usize) -> Result<Self> {
        let base_url = std::env::var(ENV_URL)
            .map_err(|_| Error::Validation(format!("{ENV_URL} is not set")))?;
        Ok(RemoteConfig {
            base_url,
            api_key: std::env::var(ENV_KEY).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "text-embedding-3-large".into()),
            dimension,
            max_batch: 64,
            max_attempts: 3,
            timeout_secs: 60,
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

pub struct RemoteProvider {
    config: RemoteConfig,
    agent: ureq::Agent,
    name: String,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let name = format!("remote-{}", config.model);
        RemoteProvider {
            config,
            agent,
            name,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/embeddings", self.config.base_url.trim_end_matches('/'))
    }

    fn request_once(&self, input: &[String]) -> std::result::Result<EmbedResponse, (Option<u16>, String, bool)> {
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = EmbedRequest {
            model: &self.config.model,
            input,
        };
        let mut resp = req
            .send_json(&body)
            .map_err(|e| (None, e.to_string(), true))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let retryable = status == 429 || status >= 500;
            return Err((Some(status), text, retryable));
        }
        resp.body_mut()
            .read_json::<EmbedResponse>()
            .map_err(|e| (Some(status), format!("malformed response: {e}"), false))
    }

    fn request(&self, input: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut last = (None, String::new());
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(200 << attempt));
            }
            match self.request_once(input) {
                Ok(resp) => return self.decode(resp, input.len()),
                Err((status, message, retryable)) => {
                    warn!("embedding request attempt {} failed ({status:?}): {message}", attempt + 1);
                    last = (status, message);
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(Error::Provider {
            provider: self.name.clone(),
            status: last.0,
            message: last.1,
        })
    }

    fn decode(&self, resp: EmbedResponse, expected: usize) -> Result<Vec<EmbeddingVector>> {
        if resp.data.len() != expected {
            return Err(Error::Integrity(format!(
                "endpoint returned {} embeddings for {expected} inputs",
                resp.data.len()
            )));
        }
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index.unwrap());
        }
        data.into_iter()
            .map(|d| {
                if d.embedding.len() != self.config.dimension {
                    return Err(Error::Integrity(format!(
                        "endpoint returned dimension {}, configured {}",
                        d.embedding.len(),
                        self.config.dimension
                    )));
                }
                // Quantize to the cache's storage precision so cached and
                // fresh results are indistinguishable.
                let rec: Vec<f32> = d.embedding.iter().map(|&v| v as f32).collect();
                EmbeddingVector::from_f32(&rec)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(statements.len());
        for chunk in statements.chunks(self.config.max_batch.max(1)) {
            debug!("embedding {} statements via {}", chunk.len(), self.endpoint());
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }
}
