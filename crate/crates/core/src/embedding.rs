//! Learnable token-embedding sequences, nearest-token projection and image
//! sets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::vocab::{TokenId, VocabularyEmbedding};

/// `m x d` continuous embeddings optimized during inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingSequence {
    pub vectors: Matrix,
    pub origin_prompt: String,
    /// Non-fatal notes from initialization, e.g. truncation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TokenEmbeddingSequence {
    pub fn m(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Initializes `m` slots from the prompt's tokens, padding the remainder with
/// tokens drawn uniformly (seeded) from the non-special vocabulary. Prompts
/// longer than `m` tokens are truncated to their first `m` tokens.
pub fn tokenize_and_embed(
    prompt: &str,
    vocab: &VocabularyEmbedding,
    m: usize,
    seed: u64,
) -> Result<(TokenEmbeddingSequence, Vec<TokenId>)> {
    if prompt.trim().is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("slot count m must be at least 1".into()));
    }
    let mut ids = vocab.encode(prompt);
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!(
            "prompt `{prompt}` produced no tokens"
        )));
    }
    let mut warnings = Vec::new();
    if ids.len() > m {
        warnings.push(format!(
            "prompt has {} tokens; truncated to the first {m}",
            ids.len()
        ));
        tracing::warn!(tokens = ids.len(), m, "prompt truncated for inversion");
        ids.truncate(m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while ids.len() < m {
        let id = vocab
            .regular_ids()
            .choose(&mut rng)
            .expect("vocabulary has regular tokens");
        ids.push(id);
    }
    let mut vectors = Matrix::zeros(m, vocab.dim());
    for (slot, &id) in ids.iter().enumerate() {
        vectors.row_mut(slot).copy_from_slice(vocab.row(id));
    }
    Ok((
        TokenEmbeddingSequence {
            vectors,
            origin_prompt: prompt.to_string(),
            warnings,
        },
        ids,
    ))
}

/// Nearest-token projection of every slot by cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub token_ids: Vec<TokenId>,
    pub projected: TokenEmbeddingSequence,
}

/// Maps each slot to `argmax_j cos(slot, E_j)` over non-special tokens.
/// Ties go to the lowest token id.
pub fn project_to_vocab(
    seq: &TokenEmbeddingSequence,
    vocab: &VocabularyEmbedding,
) -> Result<Projection> {
    let token_ids = nearest_tokens(&seq.vectors, vocab)?;
    let mut vectors = Matrix::zeros(seq.m(), vocab.dim());
    for (slot, &id) in token_ids.iter().enumerate() {
        vectors.row_mut(slot).copy_from_slice(vocab.row(id));
    }
    Ok(Projection {
        token_ids,
        projected: TokenEmbeddingSequence {
            vectors,
            origin_prompt: seq.origin_prompt.clone(),
            warnings: Vec::new(),
        },
    })
}

pub(crate) fn nearest_tokens(slots: &Matrix, vocab: &VocabularyEmbedding) -> Result<Vec<TokenId>> {
    if slots.cols() != vocab.dim() {
        return Err(Error::InvalidInput(format!(
            "slot width {} does not match vocabulary width {}",
            slots.cols(),
            vocab.dim()
        )));
    }
    let mut out = Vec::with_capacity(slots.rows());
    for (slot, v) in slots.iter_rows().enumerate() {
        let n = norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateProjection { slot });
        }
        // Vocabulary rows are unit norm, so the slot norm is a common
        // positive factor and the dot product ranks identically to cosine.
        let mut best: Option<(TokenId, f64)> = None;
        for (j, row) in vocab.matrix().iter_rows().enumerate() {
            let j = j as TokenId;
            if vocab.is_special(j) {
                continue;
            }
            let s = dot(v, row);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        out.push(best.expect("vocabulary has regular tokens").0);
    }
    Ok(out)
}

/// A generated or user-supplied image, addressed by the SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageHandle {
    pub content_hash: String,
    pub path: PathBuf,
}

impl ImageHandle {
    pub fn from_file(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            content_hash: content_hash(&bytes),
            path,
        })
    }

    pub fn read(&self) -> Result<Vec<u8>> {
        fs::read(&self.path).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Images produced from one prompt, with optional cached unit embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pub images: Vec<ImageHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Matrix>,
    pub source_prompt: String,
    pub seeds: Vec<u64>,
}

impl ImageSet {
    pub fn new(source_prompt: impl Into<String>, images: Vec<ImageHandle>, seeds: Vec<u64>) -> Self {
        Self {
            images,
            embeddings: None,
            source_prompt: source_prompt.into(),
            seeds,
        }
    }

    /// Embeddings-only set, for callers that never touch image files.
    pub fn from_embeddings(source_prompt: impl Into<String>, embeddings: Matrix) -> Self {
        let images = (0..embeddings.rows())
            .map(|i| ImageHandle {
                content_hash: format!("synthetic-{i}"),
                path: PathBuf::new(),
            })
            .collect();
        Self {
            seeds: (0..embeddings.rows() as u64).collect(),
            images,
            embeddings: Some(embeddings),
            source_prompt: source_prompt.into(),
        }
    }

    /// Loads every regular file of `dir` in file-name order.
    pub fn from_dir(dir: &Path, source_prompt: impl Into<String>) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "webp"))
            })
            .collect();
        paths.sort();
        let images = paths
            .into_iter()
            .map(ImageHandle::from_file)
            .collect::<Result<Vec<_>>>()?;
        let seeds = (0..images.len() as u64).collect();
        Ok(Self::new(source_prompt, images, seeds))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = &self.embeddings {
            if e.rows() != self.images.len() {
                return Err(Error::InvalidInput(format!(
                    "image set has {} images but {} embedding rows",
                    self.images.len(),
                    e.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn require_embeddings(&self) -> Result<&Matrix> {
        self.validate()?;
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::InvalidState("image set has no cached embeddings".into()))
    }
}
