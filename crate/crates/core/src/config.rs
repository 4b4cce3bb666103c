//! The single configuration record every entry point runs from.
//!
//! Precedence, lowest first: built-in defaults, the TOML file, environment
//! variables named `HOMODIV_<SECTION>_<KEY>`, then explicit overrides
//! (`section.key=value`, as passed by command-line flags).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::EmbeddingCache;
use crate::error::{Error, Result};
use crate::expansion::ExpansionConfig;
use crate::filtering::FilterConfig;
use crate::generation::{GenerationBackend, GenerationConfig, Generator, ImageStore, MockBackend, MockBias, MockEmbedder, SeedSpec};
use crate::inversion::InversionConfig;
use crate::llm::{LlmClient, RetryPolicy, ScriptedLlm};
use crate::pipeline::{PipelineConfig, Stack};
use crate::scorer::{Embedder, Scorer, SyntheticScorer};
use crate::synthetic_llm::SyntheticLlm;
use crate::templates::TemplateSet;
use crate::vocab::VocabularyEmbedding;

pub const ENV_PREFIX: &str = "HOMODIV";

/// Package version plus `git describe` of the source tree when known.
pub fn version_string() -> String {
    let git = option_env!("HOMODIV_GIT_DESCRIBE").unwrap_or("unknown");
    format!("{} ({git})", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmKind {
    Synthetic,
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    pub dim: usize,
    pub seed: u64,
    pub url: String,
    pub model_id: String,
    /// Exported token-embedding table for a remote scorer.
    pub vocab_dir: String,
    pub text_max_tokens: usize,
    pub timeout_secs: u64,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Synthetic,
            dim: 1024,
            seed: 0,
            url: String::new(),
            model_id: String::new(),
            vocab_dir: String::new(),
            text_max_tokens: 77,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub url: String,
    pub noise: f64,
    pub variation: f64,
    pub implicit_defaults: bool,
    pub guidance_scale: f64,
    pub inference_steps: u32,
    /// Original images per prompt fed to identification.
    pub images_per_prompt: usize,
    /// Images shown per base-mode round in interactive sessions.
    pub session_images: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            url: String::new(),
            noise: 0.3,
            variation: 0.1,
            implicit_defaults: true,
            guidance_scale: 7.5,
            inference_steps: 28,
            images_per_prompt: 10,
            session_images: 4,
            max_in_flight: 4,
            timeout_secs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub kind: LlmKind,
    pub url: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub fixtures: String,
    pub seed: u64,
    pub max_retries: usize,
    pub max_format_retries: usize,
    pub backoff_ms: u64,
    pub template_version: String,
    pub template_dir: String,
    pub timeout_secs: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            kind: LlmKind::Synthetic,
            url: String::new(),
            model: String::new(),
            temperature: 0.7,
            api_key_env: "OPENAI_API_KEY".into(),
            fixtures: String::new(),
            seed: 0,
            max_retries: 3,
            max_format_retries: 2,
            backoff_ms: 500,
            template_version: crate::templates::TEMPLATE_VERSION.into(),
            template_dir: String::new(),
            timeout_secs: 120,
        }
    }
}

impl LlmSection {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            max_format_retries: self.max_format_retries,
            backoff_ms: self.backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSection {
    pub pool_size: usize,
}

impl Default for ExpansionSection {
    fn default() -> Self {
        Self { pool_size: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationSection {
    pub context_budget: usize,
}

impl Default for PersonalizationSection {
    fn default() -> Self {
        Self {
            context_budget: crate::personalization::DEFAULT_CONTEXT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sample_count: usize,
    pub n: usize,
    pub checkpoint_every: usize,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sample_count: 1000,
            n: 10,
            checkpoint_every: 25,
            parallelism: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Image store, embedding cache, sessions and profiles live under here.
    pub data_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "homodiv-data".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub scorer: ScorerSection,
    pub backend: BackendSection,
    pub llm: LlmSection,
    pub inversion: InversionConfig,
    pub expansion: ExpansionSection,
    pub filter: FilterConfig,
    pub personalization: PersonalizationSection,
    pub eval: EvalSection,
    pub service: ServiceSection,
    pub paths: PathsSection,
}

/// The effective configuration and build version, embedded in every
/// artifact the tools write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config: GlobalConfig,
}

impl GlobalConfig {
    /// Defaults, then `file`, then the process environment, then
    /// `overrides`. Every problem found is reported together.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::resolve(file, &env, overrides)
    }

    pub fn resolve(file: Option<&Path>, env: &[(String, String)], overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::default())
            .map_err(|e| Error::Config(vec![format!("defaults do not serialize: {e}")]))?;
        let mut errors = Vec::new();

        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            match text.parse::<toml::Table>() {
                Ok(user) => merge(&mut table, user, "", &mut errors),
                Err(e) => errors.push(format!("{}: {e}", path.display())),
            }
        }

        let keys: Vec<(String, String)> = table
            .iter()
            .filter_map(|(s, v)| v.as_table().map(|t| (s, t)))
            .flat_map(|(s, t)| t.keys().map(move |k| (s.clone(), k.clone())))
            .collect();
        for (section, key) in keys {
            let var = format!("{ENV_PREFIX}_{}_{}", section.to_uppercase(), key.to_uppercase());
            if let Some((_, value)) = env.iter().find(|(k, _)| *k == var) {
                if let Err(e) = set_value(&mut table, &section, &key, value) {
                    errors.push(format!("{var}: {e}"));
                }
            }
        }

        for o in overrides {
            let parsed = o
                .split_once('=')
                .and_then(|(path, v)| path.split_once('.').map(|(s, k)| (s.trim(), k.trim(), v.trim())));
            match parsed {
                Some((section, key, value)) => {
                    if let Err(e) = set_value(&mut table, section, key, value) {
                        errors.push(format!("{section}.{key}: {e}"));
                    }
                }
                None => errors.push(format!("override `{o}` is not of the form section.key=value")),
            }
        }

        // rejected entries were skipped, so the table still deserializes and
        // value checks can be reported alongside them
        let config: std::result::Result<GlobalConfig, _> = toml::Value::Table(table).try_into();
        match config {
            Ok(c) => {
                if let Err(Error::Config(list)) = c.validate() {
                    errors.extend(list);
                }
                if errors.is_empty() {
                    Ok(c)
                } else {
                    Err(Error::Config(errors))
                }
            }
            Err(e) => {
                errors.push(e.to_string());
                Err(Error::Config(errors))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.scorer.dim == 0 {
            errs.push("scorer.dim must be positive".to_string());
        }
        if self.scorer.kind == ScorerKind::Remote && (self.scorer.url.is_empty() || self.scorer.vocab_dir.is_empty()) {
            errs.push("scorer.kind = remote needs scorer.url and scorer.vocab_dir".to_string());
        }
        if self.backend.kind == BackendKind::Remote && self.backend.url.is_empty() {
            errs.push("backend.kind = remote needs backend.url".to_string());
        }
        if !(self.backend.noise >= 0.0 && self.backend.noise.is_finite()) {
            errs.push(format!("backend.noise must be >= 0, got {}", self.backend.noise));
        }
        if !(0.0..=1.0).contains(&self.backend.variation) {
            errs.push(format!("backend.variation must lie in [0, 1], got {}", self.backend.variation));
        }
        if self.backend.session_images < 2 {
            errs.push("backend.session_images must be at least 2".to_string());
        }
        if self.backend.images_per_prompt < self.inversion.batch_size {
            errs.push(format!(
                "backend.images_per_prompt ({}) must be at least inversion.batch_size ({})",
                self.backend.images_per_prompt, self.inversion.batch_size
            ));
        }
        match self.llm.kind {
            LlmKind::Scripted if self.llm.fixtures.is_empty() => {
                errs.push("llm.kind = scripted needs llm.fixtures".to_string())
            }
            LlmKind::Remote if self.llm.url.is_empty() || self.llm.model.is_empty() => {
                errs.push("llm.kind = remote needs llm.url and llm.model".to_string())
            }
            _ => {}
        }
        if let Err(e) = self.inversion.validate() {
            errs.push(e.to_string());
        }
        if let Err(Error::Config(list)) = self.filter.validate() {
            errs.extend(list);
        }
        if self.expansion.pool_size < self.filter.select_count {
            errs.push(format!(
                "expansion.pool_size ({}) must be at least filter.select_count ({})",
                self.expansion.pool_size, self.filter.select_count
            ));
        }
        if self.eval.sample_count == 0 {
            errs.push("eval.sample_count must be at least 1".to_string());
        }
        if self.eval.n < 2 {
            errs.push("eval.n must be at least 2".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Switches every model to its offline stand-in. Scripted fixtures are
    /// offline already and are kept.
    pub fn force_mock(&mut self) {
        self.scorer.kind = ScorerKind::Synthetic;
        self.backend.kind = BackendKind::Mock;
        if self.llm.kind == LlmKind::Remote {
            self.llm.kind = LlmKind::Synthetic;
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            version: version_string(),
            config: self.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.data_dir)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            inversion: self.inversion.clone(),
            expansion: ExpansionConfig {
                pool_size: self.expansion.pool_size,
                retry: self.llm.retry_policy(),
            },
            filter: self.filter,
            generation: GenerationConfig {
                backend_id: match self.backend.kind {
                    BackendKind::Mock => "mock".into(),
                    BackendKind::Remote => "remote".into(),
                },
                guidance_scale: self.backend.guidance_scale,
                inference_steps: self.backend.inference_steps,
                images_per_prompt: self.backend.images_per_prompt,
                seeds: SeedSpec::Base(0),
            },
            context_budget: self.personalization.context_budget,
        }
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        if self.llm.template_dir.is_empty() {
            Ok(TemplateSet::builtin())
        } else {
            TemplateSet::with_overrides(Path::new(&self.llm.template_dir), &self.llm.template_version)
        }
    }

    /// Builds scorer, backend, LLM client and image store under
    /// `paths.data_dir`.
    pub fn build_stack(&self) -> Result<Stack> {
        let data = self.data_dir();
        let store = Arc::new(ImageStore::open(data.join("store"))?);
        let cache = Arc::new(EmbeddingCache::on_disk(data.join("cache"))?);
        let synthetic_vocab = || Arc::new(VocabularyEmbedding::synthetic(self.scorer.dim, self.scorer.seed));

        let (scorer, vocab): (Arc<dyn Scorer>, Arc<VocabularyEmbedding>) = match self.scorer.kind {
            ScorerKind::Synthetic => {
                let vocab = synthetic_vocab();
                (
                    Arc::new(SyntheticScorer::with_vocabulary(vocab.clone(), self.scorer.seed)),
                    vocab,
                )
            }
            ScorerKind::Remote => self.remote_scorer()?,
        };
        let backend: Arc<dyn GenerationBackend> = match self.backend.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(
                MockEmbedder::new(vocab.clone(), self.backend.noise),
                MockBias {
                    implicit_defaults: self.backend.implicit_defaults,
                    variation: self.backend.variation,
                },
            )),
            BackendKind::Remote => self.remote_backend()?,
        };
        let llm: Arc<dyn LlmClient> = match self.llm.kind {
            LlmKind::Synthetic => Arc::new(SyntheticLlm::new(vocab, self.llm.seed)),
            LlmKind::Scripted => Arc::new(ScriptedLlm::from_file(Path::new(&self.llm.fixtures))?),
            LlmKind::Remote => self.remote_llm()?,
        };
        Ok(Stack {
            embedder: Embedder::new(scorer, cache),
            generator: Generator::new(backend, store, self.backend.max_in_flight),
            llm,
            templates: self.templates()?,
            config: self.pipeline_config(),
        })
    }

    #[cfg(feature = "remote")]
    fn remote_scorer(&self) -> Result<(Arc<dyn Scorer>, Arc<VocabularyEmbedding>)> {
        let vocab = Arc::new(VocabularyEmbedding::load(Path::new(&self.scorer.vocab_dir))?);
        let model_id = if self.scorer.model_id.is_empty() {
            self.scorer.url.clone()
        } else {
            self.scorer.model_id.clone()
        };
        let scorer = crate::remote::RemoteScorer::new(
            &self.scorer.url,
            model_id,
            vocab.clone(),
            self.scorer.text_max_tokens,
            Duration::from_secs(self.scorer.timeout_secs),
        );
        Ok((Arc::new(scorer), vocab))
    }

    #[cfg(feature = "remote")]
    fn remote_backend(&self) -> Result<Arc<dyn GenerationBackend>> {
        Ok(Arc::new(crate::remote::RemoteBackend::new(
            &self.backend.url,
            "remote",
            Duration::from_secs(self.backend.timeout_secs),
        )))
    }

    #[cfg(feature = "remote")]
    fn remote_llm(&self) -> Result<Arc<dyn LlmClient>> {
        Ok(Arc::new(crate::remote::RemoteLlm::new(
            &self.llm.url,
            &self.llm.model,
            self.llm.temperature,
            std::env::var(&self.llm.api_key_env).ok(),
            Duration::from_secs(self.llm.timeout_secs),
        )))
    }

    #[cfg(not(feature = "remote"))]
    fn remote_scorer(&self) -> Result<(Arc<dyn Scorer>, Arc<VocabularyEmbedding>)> {
        Err(remote_disabled())
    }

    #[cfg(not(feature = "remote"))]
    fn remote_backend(&self) -> Result<Arc<dyn GenerationBackend>> {
        Err(remote_disabled())
    }

    #[cfg(not(feature = "remote"))]
    fn remote_llm(&self) -> Result<Arc<dyn LlmClient>> {
        Err(remote_disabled())
    }
}

#[cfg(not(feature = "remote"))]
fn remote_disabled() -> Error {
    let _ = Duration::ZERO;
    Error::Config(vec!["built without the `remote` feature".into()])
}

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str, errors: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path, errors),
            (Some(slot), v) if !slot.is_table() => *slot = v,
            (Some(_), _) => errors.push(format!("`{path}` must be a table")),
            // optional keys absent from the defaults (none serialized) are
            // accepted here and checked when the record is deserialized
            (None, v) if !prefix.is_empty() => {
                base.insert(k, v);
            }
            (None, _) => errors.push(format!("unknown section `{path}`")),
        }
    }
}

/// Sets `section.key` from text, parsed as the type of the current value.
fn set_value(table: &mut toml::Table, section: &str, key: &str, raw: &str) -> std::result::Result<(), String> {
    let slot = table
        .get_mut(section)
        .and_then(toml::Value::as_table_mut)
        .ok_or_else(|| format!("unknown section `{section}`"))?
        .get_mut(key)
        .ok_or_else(|| format!("unknown setting `{section}.{key}`"))?;
    *slot = match slot {
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| format!("`{raw}` is not an integer"))?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| format!("`{raw}` is not a number"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| format!("`{raw}` is not true or false"))?),
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        _ => return Err("cannot be set from text".into()),
    };
    Ok(())
}
