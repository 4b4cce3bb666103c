//! HTTP clients for real models, plus a process-wide count of network
//! calls so offline runs can prove they made none.

use std::sync::atomic::{AtomicU64, Ordering};

static NETWORK_CALLS: AtomicU64 = AtomicU64::new(0);

/// Network requests issued by this process so far.
pub fn network_calls() -> u64 {
    NETWORK_CALLS.load(Ordering::Relaxed)
}

#[cfg_attr(not(feature = "remote"), allow(dead_code))]
fn count_call() {
    NETWORK_CALLS.fetch_add(1, Ordering::Relaxed);
}

#[cfg(feature = "remote")]
pub use http::{RemoteBackend, RemoteLlm, RemoteScorer};

#[cfg(feature = "remote")]
mod http {
    use std::sync::Arc;
    use std::time::Duration;

    use base64::Engine as _;
    use serde_json::{json, Value};
    use ureq::Agent;

    use super::count_call;
    use crate::error::{Error, Result};
    use crate::generation::{GenerationBackend, GenerationConfig};
    use crate::linalg::{normalized, Matrix};
    use crate::llm::LlmClient;
    use crate::scorer::{Scorer, ScorerHandle};
    use crate::vocab::VocabularyEmbedding;

    fn agent(timeout: Duration) -> Agent {
        Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into()
    }

    fn map_err(e: ureq::Error) -> Error {
        match e {
            ureq::Error::StatusCode(429) => Error::RateLimited("HTTP 429".into()),
            ureq::Error::StatusCode(s) if s >= 500 => Error::Transport(format!("HTTP {s}")),
            ureq::Error::StatusCode(s) => Error::Schema(format!("HTTP {s}")),
            ureq::Error::Timeout(t) => Error::Timeout(t.to_string()),
            ureq::Error::Json(e) => Error::Schema(e.to_string()),
            other => Error::Transport(other.to_string()),
        }
    }

    fn post_json(agent: &Agent, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value> {
        count_call();
        let mut req = agent.post(url);
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(map_err)?;
        resp.body_mut().read_json::<Value>().map_err(map_err)
    }

    fn f32_list(v: &Value, key: &str) -> Result<Vec<f32>> {
        v.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Schema(format!("response has no `{key}` list")))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| Error::Schema(format!("`{key}` holds a non-number")))
            })
            .collect()
    }

    /// Scorer served over HTTP. The token-embedding table stays local so
    /// projection never leaves the process; the service computes pooled
    /// features, their vector-Jacobian product, and image embeddings.
    ///
    /// Endpoints: `POST /encode_slots {slots}` returning `{features}`,
    /// `POST /encode_slots_vjp {slots, upstream}` returning `{grad}`, and
    /// `POST /embed_image {image_id, png_base64}` returning `{embedding}`.
    #[derive(Debug)]
    pub struct RemoteScorer {
        base_url: String,
        handle: ScorerHandle,
        vocab: Arc<VocabularyEmbedding>,
        agent: Agent,
    }

    impl RemoteScorer {
        pub fn new(
            base_url: impl Into<String>,
            model_id: impl Into<String>,
            vocab: Arc<VocabularyEmbedding>,
            text_max_tokens: usize,
            timeout: Duration,
        ) -> Self {
            Self {
                base_url: base_url.into().trim_end_matches('/').to_string(),
                handle: ScorerHandle {
                    model_id: model_id.into(),
                    text_max_tokens,
                    embedding_dim: vocab.dim(),
                },
                vocab,
                agent: agent(timeout),
            }
        }

        fn rows(m: &Matrix) -> Vec<&[f32]> {
            m.iter_rows().collect()
        }
    }

    impl Scorer for RemoteScorer {
        fn handle(&self) -> &ScorerHandle {
            &self.handle
        }

        fn vocabulary(&self) -> &VocabularyEmbedding {
            &self.vocab
        }

        fn encode_slots(&self, slots: &Matrix) -> Result<Vec<f32>> {
            let url = format!("{}/encode_slots", self.base_url);
            let v = post_json(&self.agent, &url, None, &json!({"slots": Self::rows(slots)}))?;
            f32_list(&v, "features")
        }

        fn encode_slots_vjp(&self, slots: &Matrix, upstream: &[f64]) -> Result<Matrix> {
            let url = format!("{}/encode_slots_vjp", self.base_url);
            let body = json!({"slots": Self::rows(slots), "upstream": upstream});
            let v = post_json(&self.agent, &url, None, &body)?;
            let flat = f32_list(&v, "grad")?;
            if flat.len() != slots.rows() * slots.cols() {
                return Err(Error::Schema(format!(
                    "gradient has {} entries, expected {}",
                    flat.len(),
                    slots.rows() * slots.cols()
                )));
            }
            Ok(Matrix::from_vec(slots.rows(), slots.cols(), flat))
        }

        fn embed_image(&self, image_id: &str, bytes: &[u8]) -> Result<Vec<f32>> {
            let url = format!("{}/embed_image", self.base_url);
            let body = json!({
                "image_id": image_id,
                "png_base64": base64::engine::general_purpose::STANDARD.encode(bytes),
            });
            let v = post_json(&self.agent, &url, None, &body)?;
            let e = f32_list(&v, "embedding")?;
            normalized(&e).ok_or_else(|| Error::ImageDecode {
                image: image_id.to_string(),
                detail: "zero embedding".into(),
            })
        }
    }

    /// Diffusion backend over HTTP: `POST /generate {prompt, seed,
    /// guidance_scale, inference_steps}` returning `{png_base64}`.
    #[derive(Debug)]
    pub struct RemoteBackend {
        base_url: String,
        id: String,
        agent: Agent,
    }

    impl RemoteBackend {
        pub fn new(base_url: impl Into<String>, id: impl Into<String>, timeout: Duration) -> Self {
            Self {
                base_url: base_url.into().trim_end_matches('/').to_string(),
                id: id.into(),
                agent: agent(timeout),
            }
        }
    }

    impl GenerationBackend for RemoteBackend {
        fn id(&self) -> &str {
            &self.id
        }

        fn render(&self, prompt: &str, seed: u64, config: &GenerationConfig) -> Result<Vec<u8>> {
            let url = format!("{}/generate", self.base_url);
            let body = json!({
                "prompt": prompt,
                "seed": seed,
                "guidance_scale": config.guidance_scale,
                "inference_steps": config.inference_steps,
            });
            let v = post_json(&self.agent, &url, None, &body)?;
            if let Some(reason) = v.get("policy_rejection").and_then(Value::as_str) {
                return Err(Error::Policy(reason.to_string()));
            }
            let b64 = v
                .get("png_base64")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Schema("response has no `png_base64`".into()))?;
            base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| Error::Schema(format!("bad image payload: {e}")))
        }
    }

    /// OpenAI-compatible chat completion endpoint in JSON mode. The
    /// instruction is the system message and the payload the user message.
    #[derive(Debug)]
    pub struct RemoteLlm {
        url: String,
        model: String,
        temperature: f64,
        api_key: Option<String>,
        agent: Agent,
    }

    impl RemoteLlm {
        pub fn new(
            base_url: impl Into<String>,
            model: impl Into<String>,
            temperature: f64,
            api_key: Option<String>,
            timeout: Duration,
        ) -> Self {
            Self {
                url: format!("{}/chat/completions", base_url.into().trim_end_matches('/')),
                model: model.into(),
                temperature,
                api_key,
                agent: agent(timeout),
            }
        }
    }

    impl LlmClient for RemoteLlm {
        fn call(&self, instruction: &str, inputs: &Value) -> Result<Value> {
            let body = json!({
                "model": self.model,
                "temperature": self.temperature,
                "response_format": {"type": "json_object"},
                "messages": [
                    {"role": "system", "content": instruction},
                    {"role": "user", "content": inputs.to_string()},
                ],
            });
            let v = post_json(&self.agent, &self.url, self.api_key.as_deref(), &body)?;
            let content = v
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Schema("completion has no message content".into()))?;
            serde_json::from_str(content)
                .map_err(|e| Error::Schema(format!("completion is not JSON: {e}")))
        }
    }
}
