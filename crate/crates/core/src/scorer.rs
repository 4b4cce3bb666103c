//! Frozen joint text-image scorer.
//!
//! The optimizer needs more than similarity scores from the text side: it
//! feeds continuous slot embeddings through the text encoder and pulls
//! gradients back out. [`Scorer`] therefore exposes the pooled text features
//! of a slot matrix together with their vector-Jacobian product. Every
//! embedding that leaves this module is unit-normalized.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::EmbeddingCache;
use crate::embedding::{ImageHandle, ImageSet};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, normalized, Matrix};
use crate::synthetic_image::embedded_vector;
use crate::vocab::{hashed_direction, TokenId, VocabularyEmbedding};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerHandle {
    pub model_id: String,
    pub text_max_tokens: usize,
    pub embedding_dim: usize,
}

/// Read-only text-image model. Implementations must be safe for concurrent
/// inference calls and never mutate weights.
pub trait Scorer: Send + Sync + Debug {
    fn handle(&self) -> &ScorerHandle;

    fn vocabulary(&self) -> &VocabularyEmbedding;

    /// Un-normalized pooled text features for an `m x d` slot matrix.
    fn encode_slots(&self, slots: &Matrix) -> Result<Vec<f32>>;

    /// Gradient of `<upstream, encode_slots(slots)>` with respect to `slots`.
    fn encode_slots_vjp(&self, slots: &Matrix, upstream: &[f64]) -> Result<Matrix>;

    /// Unit image embedding. `image_id` names the image in errors.
    fn embed_image(&self, image_id: &str, bytes: &[u8]) -> Result<Vec<f32>>;

    /// Unit text embedding of a prompt string.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("text is empty".into()));
        }
        let mut ids = self.vocabulary().encode(text);
        ids.truncate(self.handle().text_max_tokens);
        self.embed_tokens(&ids)
    }

    /// Unit text embedding of a token sequence.
    fn embed_tokens(&self, ids: &[TokenId]) -> Result<Vec<f32>> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        let vocab = self.vocabulary();
        let mut slots = Matrix::zeros(ids.len(), vocab.dim());
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= vocab.len() {
                return Err(Error::InvalidInput(format!("token id {id} out of range")));
            }
            slots.row_mut(i).copy_from_slice(vocab.row(id));
        }
        self.embed_slots(&slots)
    }

    fn embed_slots(&self, slots: &Matrix) -> Result<Vec<f32>> {
        normalized(&self.encode_slots(slots)?)
            .ok_or_else(|| Error::InvalidInput("text features have zero norm".into()))
    }
}

/// Deterministic stand-in for a real model.
///
/// Token rows are seeded Gaussian directions (see
/// [`VocabularyEmbedding::synthetic`]) and the text encoder sum-pools the
/// slot vectors. Images produced by the mock backend carry their embedding
/// inside the PNG; any other image maps to a direction seeded by its
/// content hash.
#[derive(Debug)]
pub struct SyntheticScorer {
    handle: ScorerHandle,
    vocab: Arc<VocabularyEmbedding>,
    seed: u64,
    image_calls: AtomicU64,
}

impl SyntheticScorer {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_vocabulary(Arc::new(VocabularyEmbedding::synthetic(dim, seed)), seed)
    }

    pub fn with_vocabulary(vocab: Arc<VocabularyEmbedding>, seed: u64) -> Self {
        Self {
            handle: ScorerHandle {
                model_id: format!("synthetic-sum-pool-d{}-s{seed}", vocab.dim()),
                text_max_tokens: 77,
                embedding_dim: vocab.dim(),
            },
            vocab,
            seed,
            image_calls: AtomicU64::new(0),
        }
    }

    pub fn vocabulary_arc(&self) -> Arc<VocabularyEmbedding> {
        self.vocab.clone()
    }

    /// Number of `embed_image` invocations so far.
    pub fn image_calls(&self) -> u64 {
        self.image_calls.load(Ordering::Relaxed)
    }
}

impl Scorer for SyntheticScorer {
    fn handle(&self) -> &ScorerHandle {
        &self.handle
    }

    fn vocabulary(&self) -> &VocabularyEmbedding {
        &self.vocab
    }

    fn encode_slots(&self, slots: &Matrix) -> Result<Vec<f32>> {
        check_width(slots, self.handle.embedding_dim)?;
        let mut acc = vec![0.0f64; slots.cols()];
        for row in slots.iter_rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v as f64;
            }
        }
        Ok(acc.into_iter().map(|v| v as f32).collect())
    }

    fn encode_slots_vjp(&self, slots: &Matrix, upstream: &[f64]) -> Result<Matrix> {
        check_width(slots, self.handle.embedding_dim)?;
        if upstream.len() != slots.cols() {
            return Err(Error::InvalidInput("upstream gradient width mismatch".into()));
        }
        let g: Vec<f32> = upstream.iter().map(|v| *v as f32).collect();
        let mut out = Matrix::zeros(slots.rows(), slots.cols());
        for i in 0..slots.rows() {
            out.row_mut(i).copy_from_slice(&g);
        }
        Ok(out)
    }

    fn embed_image(&self, image_id: &str, bytes: &[u8]) -> Result<Vec<f32>> {
        self.image_calls.fetch_add(1, Ordering::Relaxed);
        let raw = match embedded_vector(bytes)? {
            Some(v) if v.len() == self.handle.embedding_dim => v,
            Some(v) => {
                return Err(Error::ImageDecode {
                    image: image_id.to_string(),
                    detail: format!(
                        "embedded vector has width {}, scorer expects {}",
                        v.len(),
                        self.handle.embedding_dim
                    ),
                })
            }
            None => hashed_direction(
                self.seed,
                &format!("image:{}", crate::embedding::content_hash(bytes)),
                self.handle.embedding_dim,
            ),
        };
        normalized(&raw).ok_or_else(|| Error::ImageDecode {
            image: image_id.to_string(),
            detail: "embedding has zero norm".into(),
        })
    }
}

fn check_width(slots: &Matrix, d: usize) -> Result<()> {
    if slots.cols() != d {
        return Err(Error::InvalidInput(format!(
            "slot width {} does not match scorer width {d}",
            slots.cols()
        )));
    }
    Ok(())
}

/// Text side of a similarity query.
#[derive(Debug, Clone, Copy)]
pub enum TextInput<'a> {
    Text(&'a str),
    Tokens(&'a [TokenId]),
    Slots(&'a Matrix),
}

impl<'a> From<&'a str> for TextInput<'a> {
    fn from(s: &'a str) -> Self {
        TextInput::Text(s)
    }
}

/// Scorer plus image-embedding cache. All similarity queries go through here.
#[derive(Debug, Clone)]
pub struct Embedder {
    scorer: Arc<dyn Scorer>,
    cache: Arc<EmbeddingCache>,
}

impl Embedder {
    pub fn new(scorer: Arc<dyn Scorer>, cache: Arc<EmbeddingCache>) -> Self {
        Self { scorer, cache }
    }

    pub fn scorer(&self) -> &Arc<dyn Scorer> {
        &self.scorer
    }

    pub fn cache(&self) -> &Arc<EmbeddingCache> {
        &self.cache
    }

    pub fn vocabulary(&self) -> &VocabularyEmbedding {
        self.scorer.vocabulary()
    }

    pub fn text_embedding(&self, text: TextInput<'_>) -> Result<Vec<f32>> {
        match text {
            TextInput::Text(t) => self.scorer.embed_text(t),
            TextInput::Tokens(ids) => self.scorer.embed_tokens(ids),
            TextInput::Slots(m) => self.scorer.embed_slots(m),
        }
    }

    pub fn image_embedding(&self, image: &ImageHandle) -> Result<Arc<Vec<f32>>> {
        let model = &self.scorer.handle().model_id;
        self.cache
            .get_or_try_insert(model, &image.content_hash, || {
                let bytes = image.read()?;
                self.scorer.embed_image(&image.content_hash, &bytes)
            })
    }

    /// Returns a copy of `images` with unit embeddings filled in. Sets that
    /// already carry embeddings are returned unchanged.
    pub fn embed_images(&self, images: &ImageSet) -> Result<ImageSet> {
        images.validate()?;
        if images.embeddings.is_some() {
            return Ok(images.clone());
        }
        let mut m = Matrix::zeros(0, 0);
        for img in &images.images {
            m.push_row(&self.image_embedding(img)?);
        }
        if images.is_empty() {
            m = Matrix::zeros(0, self.scorer.handle().embedding_dim);
        }
        let mut out = images.clone();
        out.embeddings = Some(m);
        Ok(out)
    }

    /// Mean cosine similarity between the text embedding and each image.
    pub fn text_image_similarity(&self, text: TextInput<'_>, images: &ImageSet) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::InvalidInput("image set is empty".into()));
        }
        let t = self.text_embedding(text)?;
        let embedded = self.embed_images(images)?;
        let e = embedded.require_embeddings()?;
        Ok(mean_cosine(&t, e))
    }

    pub fn text_text_similarity(&self, a: &str, b: &str) -> Result<f64> {
        let ea = self.scorer.embed_text(a)?;
        let eb = self.scorer.embed_text(b)?;
        Ok(dot(&ea, &eb).clamp(-1.0, 1.0))
    }
}

/// Mean over rows of `cos(text, row)`.
pub fn mean_cosine(text: &[f32], images: &Matrix) -> f64 {
    let n = images.rows().max(1) as f64;
    images
        .iter_rows()
        .map(|r| cosine(text, r).unwrap_or(0.0))
        .sum::<f64>()
        / n
}
