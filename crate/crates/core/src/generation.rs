//! Text-to-image generation behind a backend-agnostic interface, plus the
//! content-addressed image store and its manifest.

use std::fmt::Debug;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::atomic_write;
use crate::embedding::{content_hash, ImageHandle, ImageSet};
use crate::error::{Error, Result};
use crate::lexicon::{facet_of_word, Facet};
use crate::linalg::{add_scaled, normalized};
use crate::synthetic_image::encode_png;
use crate::vocab::{hashed_direction, VocabularyEmbedding};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSpec {
    /// One seed per image.
    Explicit(Vec<u64>),
    /// Seeds `base, base + 1, ...`.
    Base(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub backend_id: String,
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub images_per_prompt: usize,
    pub seeds: SeedSpec,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            backend_id: "mock".into(),
            guidance_scale: 7.5,
            inference_steps: 28,
            images_per_prompt: 10,
            seeds: SeedSpec::Base(0),
        }
    }
}

impl GenerationConfig {
    pub fn seed_list(&self) -> Result<Vec<u64>> {
        if self.images_per_prompt < 1 {
            return Err(Error::InvalidInput("images_per_prompt must be at least 1".into()));
        }
        match &self.seeds {
            SeedSpec::Explicit(s) if s.len() != self.images_per_prompt => {
                Err(Error::InvalidInput(format!(
                    "{} explicit seeds for {} images",
                    s.len(),
                    self.images_per_prompt
                )))
            }
            SeedSpec::Explicit(s) => Ok(s.clone()),
            SeedSpec::Base(b) => Ok((0..self.images_per_prompt as u64)
                .map(|i| b.wrapping_add(i))
                .collect()),
        }
    }

    pub fn with_seeds(&self, seeds: Vec<u64>) -> Self {
        Self {
            images_per_prompt: seeds.len(),
            seeds: SeedSpec::Explicit(seeds),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub images: ImageSet,
    pub config: GenerationConfig,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
    pub backend_id: String,
}

/// Milliseconds with microsecond resolution, so a value survives a JSON
/// round trip unchanged.
mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_micros() as f64 / 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_micros((ms.max(0.0) * 1000.0).round() as u64))
    }
}

/// A text-to-image model. Returns encoded image bytes for one seed.
pub trait GenerationBackend: Send + Sync + Debug {
    fn id(&self) -> &str;

    fn render(&self, prompt: &str, seed: u64, config: &GenerationConfig) -> Result<Vec<u8>>;
}

/// One manifest row per stored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub content_hash: String,
    pub prompt: String,
    pub seed: u64,
    pub backend_id: String,
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub created_at: DateTime<Utc>,
}

/// Content-addressed image files under `root/images/` plus an append-only
/// `root/manifest.jsonl`.
#[derive(Debug)]
pub struct ImageStore {
    root: PathBuf,
    ledger: Mutex<()>,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let images = root.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        Ok(Self {
            root,
            ledger: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, hash: &str) -> PathBuf {
        self.root.join("images").join(format!("{hash}.png"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    /// Writes the image if absent. Identical bytes always land on the same
    /// path, so concurrent writers race harmlessly.
    pub fn put(&self, bytes: &[u8]) -> Result<ImageHandle> {
        let hash = content_hash(bytes);
        let path = self.image_path(&hash);
        if !path.exists() {
            atomic_write(&path, bytes)?;
        }
        Ok(ImageHandle {
            content_hash: hash,
            path,
        })
    }

    pub fn get(&self, hash: &str) -> Result<ImageHandle> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::InvalidInput(format!("`{hash}` is not a content hash")));
        }
        let path = self.image_path(hash);
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image not in store"),
            ));
        }
        Ok(ImageHandle {
            content_hash: hash.to_string(),
            path,
        })
    }

    pub fn read(&self, hash: &str) -> Result<Vec<u8>> {
        self.get(hash)?.read()
    }

    pub fn append_manifest(&self, entries: &[ManifestEntry]) -> Result<()> {
        let _guard = self.ledger.lock().expect("manifest lock");
        let path = self.manifest_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        f.write_all(&buf).map_err(|e| Error::io(&path, e))
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let path = self.manifest_path();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.active.lock().expect("in-flight lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Backend plus store: renders, persists, and records every image.
#[derive(Debug, Clone)]
pub struct Generator {
    backend: Arc<dyn GenerationBackend>,
    store: Arc<ImageStore>,
    in_flight: Arc<InFlight>,
}

impl Generator {
    pub fn new(backend: Arc<dyn GenerationBackend>, store: Arc<ImageStore>, max_in_flight: usize) -> Self {
        Self {
            backend,
            store,
            in_flight: Arc::new(InFlight {
                limit: max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            }),
        }
    }

    pub fn store(&self) -> &Arc<ImageStore> {
        &self.store
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Generates `config.images_per_prompt` images for `prompt`.
    pub fn generate(&self, prompt: &str, config: &GenerationConfig) -> Result<GenerationRecord> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        let seeds = config.seed_list()?;
        let started = Instant::now();
        let mut handles = Vec::with_capacity(seeds.len());
        let mut entries = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let bytes = {
                let _slot = self.in_flight.acquire();
                self.backend.render(prompt, seed, config)?
            };
            let handle = self.store.put(&bytes)?;
            entries.push(ManifestEntry {
                content_hash: handle.content_hash.clone(),
                prompt: prompt.to_string(),
                seed,
                backend_id: self.backend.id().to_string(),
                guidance_scale: config.guidance_scale,
                inference_steps: config.inference_steps,
                created_at: Utc::now(),
            });
            handles.push(handle);
        }
        self.store.append_manifest(&entries)?;
        Ok(GenerationRecord {
            prompt: prompt.to_string(),
            images: ImageSet::new(prompt, handles, seeds),
            config: GenerationConfig {
                backend_id: self.backend.id().to_string(),
                ..config.clone()
            },
            wall_time: started.elapsed(),
            backend_id: self.backend.id().to_string(),
        })
    }
}

/// Deterministic term-hash embeddings standing in for generated images.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    vocab: Arc<VocabularyEmbedding>,
    /// Norm of the per-seed noise relative to the unit term component.
    pub noise: f64,
    noise_seed: u64,
}

impl MockEmbedder {
    pub fn new(vocab: Arc<VocabularyEmbedding>, noise: f64) -> Self {
        Self {
            vocab,
            noise,
            noise_seed: 0x5EED,
        }
    }

    pub fn vocabulary(&self) -> &Arc<VocabularyEmbedding> {
        &self.vocab
    }

    /// `normalize(normalize(sum of token rows) + noise * u(prompt, seed))`
    /// where `u` is a unit direction keyed by prompt and seed. Prompts that
    /// share terms land close together; with `noise = 0` every seed gives the
    /// same vector.
    pub fn embedding(&self, prompt: &str, seed: u64) -> Vec<f32> {
        let d = self.vocab.dim();
        let mut terms = vec![0.0f32; d];
        for id in self.vocab.encode(prompt) {
            add_scaled(&mut terms, self.vocab.row(id), 1.0);
        }
        let mut v = normalized(&terms).unwrap_or_else(|| {
            hashed_direction(self.noise_seed, &format!("empty:{prompt}"), d)
        });
        if self.noise > 0.0 {
            let n = hashed_direction(self.noise_seed, &format!("{seed}\u{1f}{prompt}"), d);
            add_scaled(&mut v, &n, self.noise as f32);
        }
        normalized(&v).expect("term and noise directions do not cancel exactly")
    }
}

/// Knobs of the mock model's built-in homogeneity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockBias {
    /// Whether unmentioned facets are filled with a prompt-dependent default.
    pub implicit_defaults: bool,
    /// Per-image probability that an implicit facet draws a random word
    /// instead of the default.
    pub variation: f64,
}

impl Default for MockBias {
    fn default() -> Self {
        Self {
            implicit_defaults: true,
            variation: 0.1,
        }
    }
}

/// Mock text-to-image model. For every implicit facet the prompt leaves
/// unspecified it adds a default word chosen from the prompt alone, so all
/// images of one prompt share those attributes the way a real model falls
/// back on its priors.
#[derive(Debug, Clone)]
pub struct MockBackend {
    embedder: MockEmbedder,
    bias: MockBias,
}

impl MockBackend {
    pub fn new(embedder: MockEmbedder, bias: MockBias) -> Self {
        Self { embedder, bias }
    }

    pub fn embedder(&self) -> &MockEmbedder {
        &self.embedder
    }

    /// The prompt the mock actually renders: the user prompt plus implicit
    /// defaults for this seed.
    pub fn effective_prompt(&self, prompt: &str, seed: u64) -> String {
        if !self.bias.implicit_defaults {
            return prompt.to_string();
        }
        let vocab = &self.embedder.vocab;
        let mentioned: Vec<Facet> = vocab
            .encode(prompt)
            .into_iter()
            .filter_map(|id| vocab.token(id).and_then(facet_of_word))
            .collect();
        let key = prompt.trim().to_lowercase();
        let mut extra = Vec::new();
        for facet in Facet::IMPLICIT {
            if mentioned.contains(&facet) {
                continue;
            }
            let words = facet.words();
            let mut rng = ChaCha8Rng::from_seed(digest32(&[
                key.as_bytes(),
                facet.as_str().as_bytes(),
                &seed.to_le_bytes(),
            ]));
            let word = if rng.random::<f64>() < self.bias.variation {
                words[rng.random_range(0..words.len())]
            } else {
                let pick = digest32(&[key.as_bytes(), facet.as_str().as_bytes()])[0] as usize % 2;
                words[pick]
            };
            extra.push(word);
        }
        if extra.is_empty() {
            prompt.to_string()
        } else {
            format!("{prompt} {}", extra.join(" "))
        }
    }

    pub fn embedding(&self, prompt: &str, seed: u64) -> Vec<f32> {
        self.embedder.embedding(&self.effective_prompt(prompt, seed), seed)
    }
}

impl GenerationBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn render(&self, prompt: &str, seed: u64, _config: &GenerationConfig) -> Result<Vec<u8>> {
        encode_png(&self.embedding(prompt, seed), prompt)
    }
}

fn digest32(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}
