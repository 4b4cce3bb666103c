//! Instruction-following model transport.
//!
//! Callers send a rendered instruction plus a structured payload and get a
//! JSON value back. Nondeterminism stays behind [`LlmClient`]; tests use
//! [`ScriptedLlm`], which replays fixtures keyed by the SHA-256 of the
//! instruction text and refuses to invent anything it was not given.

use std::collections::HashMap;
use std::fmt::Debug;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub trait LlmClient: Send + Sync + Debug {
    fn call(&self, instruction: &str, inputs: &Value) -> Result<Value>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt for transport errors.
    pub max_retries: usize,
    /// Retries for well-formed transport but malformed content.
    pub max_format_retries: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            max_format_retries: 2,
            backoff_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub value: Value,
    pub retries: usize,
}

/// Calls `client`, retrying timeouts, rate limits and transport failures.
/// Retry state is local to this call, so concurrent callers never share it.
pub fn call_with_retry(
    client: &dyn LlmClient,
    instruction: &str,
    inputs: &Value,
    policy: RetryPolicy,
) -> Result<LlmResponse> {
    let mut retries = 0;
    loop {
        match client.call(instruction, inputs) {
            Ok(value) => return Ok(LlmResponse { value, retries }),
            Err(e) if e.is_retryable() && retries < policy.max_retries => {
                retries += 1;
                tracing::debug!(retries, error = %e, "retrying llm call");
                if policy.backoff_ms > 0 {
                    std::thread::sleep(Duration::from_millis(policy.backoff_ms << (retries - 1)));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

pub fn instruction_key(instruction: &str) -> String {
    hex::encode(Sha256::digest(instruction.as_bytes()))
}

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureReply {
    Payload(Value),
    Error(ScriptedFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Timeout,
    RateLimited,
    Transport,
}

/// On-disk fixture file: instruction key to a reply sequence.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct FixtureFile {
    pub fixtures: HashMap<String, Vec<FixtureReply>>,
}

#[derive(Debug, Default)]
struct Script {
    replies: Vec<FixtureReply>,
    cursor: usize,
}

/// Replays fixtures keyed by instruction hash. A key with several replies
/// returns them in order and then keeps repeating the last one.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    scripts: Mutex<HashMap<String, Script>>,
    calls: Mutex<Vec<(String, Value)>>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let file: FixtureFile =
            serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        let llm = Self::new();
        for (key, replies) in file.fixtures {
            llm.insert_key(key, replies);
        }
        Ok(llm)
    }

    pub fn insert(&self, instruction: &str, payload: Value) {
        self.insert_key(instruction_key(instruction), vec![FixtureReply::Payload(payload)]);
    }

    pub fn insert_sequence(&self, instruction: &str, replies: Vec<FixtureReply>) {
        self.insert_key(instruction_key(instruction), replies);
    }

    pub fn insert_key(&self, key: String, replies: Vec<FixtureReply>) {
        self.scripts
            .lock()
            .expect("script lock")
            .insert(key, Script { replies, cursor: 0 });
    }

    /// Every `(instruction, inputs)` pair received, in order.
    pub fn calls(&self) -> Vec<(String, Value)> {
        self.calls.lock().expect("call log lock").clone()
    }
}

impl LlmClient for ScriptedLlm {
    fn call(&self, instruction: &str, inputs: &Value) -> Result<Value> {
        self.calls
            .lock()
            .expect("call log lock")
            .push((instruction.to_string(), inputs.clone()));
        let key = instruction_key(instruction);
        let mut scripts = self.scripts.lock().expect("script lock");
        let script = scripts
            .get_mut(&key)
            .filter(|s| !s.replies.is_empty())
            .ok_or(Error::MissingFixture { key })?;
        let reply = script.replies[script.cursor.min(script.replies.len() - 1)].clone();
        script.cursor += 1;
        match reply {
            FixtureReply::Payload(v) => Ok(v),
            FixtureReply::Error(ScriptedFailure::Timeout) => {
                Err(Error::Timeout("scripted timeout".into()))
            }
            FixtureReply::Error(ScriptedFailure::RateLimited) => {
                Err(Error::RateLimited("scripted rate limit".into()))
            }
            FixtureReply::Error(ScriptedFailure::Transport) => {
                Err(Error::Transport("scripted transport failure".into()))
            }
        }
    }
}
