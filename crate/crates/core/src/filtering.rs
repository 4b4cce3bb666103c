//! Scoring and selection of expansion candidates.
//!
//! `Div(t̂) = cos(text(t₀), I_t̂) − cos(text(t₁), I_t̂)` rewards images that
//! move away from the homogeneous dimensions while staying on the original
//! prompt, and `F(t̂) = Div(t̂) + λ·cos(text(t̂), text(t₀))` adds a fidelity
//! term on the prompt itself.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::ImageSet;
use crate::error::{Error, Result};
use crate::expansion::ExpansionCandidate;
use crate::linalg::{cosine, Matrix};
use crate::scorer::{Embedder, TextInput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub lambda: f64,
    pub select_count: usize,
    /// Image-image cosine at or above which a candidate counts as a copy of
    /// an original image.
    pub redundancy_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            select_count: 10,
            redundancy_threshold: 0.92,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(format!("filter.lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.select_count == 0 {
            errs.push("filter.select_count must be >= 1".to_string());
        }
        if !(-1.0..=1.0).contains(&self.redundancy_threshold) {
            errs.push(format!(
                "filter.redundancy_threshold must lie in [-1, 1], got {}",
                self.redundancy_threshold
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPool {
    pub candidates: Vec<ExpansionCandidate>,
    /// Indices into `candidates`, best first.
    pub selected: Vec<usize>,
    pub rejected_redundant: Vec<usize>,
    /// Set when fewer than `select_count` candidates survived redundancy
    /// filtering.
    pub under_selected: bool,
    pub config: FilterConfig,
}

impl ScoredPool {
    pub fn selected_candidates(&self) -> impl Iterator<Item = &ExpansionCandidate> {
        self.selected.iter().map(|&i| &self.candidates[i])
    }
}

/// `cos(t0, image) − cos(t1, image)` on embeddings.
pub fn div_value(t0: &[f32], t1: &[f32], image: &[f32]) -> f64 {
    cosine(t0, image).unwrap_or(0.0) - cosine(t1, image).unwrap_or(0.0)
}

pub fn combine(div: f64, sim: f64, lambda: f64) -> f64 {
    div + lambda * sim
}

pub fn div_score(embedder: &Embedder, image: &[f32], t0: &str, t1: &str) -> Result<f64> {
    if t0.trim().is_empty() || t1.trim().is_empty() {
        return Err(Error::InvalidInput("t0 and t1 must be non-empty".into()));
    }
    let e0 = embedder.text_embedding(TextInput::Text(t0))?;
    let e1 = embedder.text_embedding(TextInput::Text(t1))?;
    Ok(div_value(&e0, &e1, image))
}

/// Computes and stores `div_score`, `sim_score` and `filter_score` on the
/// candidate. Returns the filter score.
pub fn filter_score(
    candidate: &mut ExpansionCandidate,
    t0: &str,
    t1: &str,
    config: &FilterConfig,
    embedder: &Embedder,
) -> Result<f64> {
    let image = candidate.image.as_ref().ok_or_else(|| {
        Error::InvalidState(format!("candidate `{}` has no image", candidate.prompt))
    })?;
    let emb = embedder.image_embedding(image)?;
    let div = div_score(embedder, &emb, t0, t1)?;
    let sim = embedder.text_text_similarity(&candidate.prompt, t0)?;
    let f = combine(div, sim, config.lambda);
    candidate.div_score = Some(div);
    candidate.sim_score = Some(sim);
    candidate.filter_score = Some(f);
    Ok(f)
}

/// Whether `image` is at least `threshold` cosine-similar to any original.
pub fn is_redundant(image: &[f32], originals: &Matrix, threshold: f64) -> bool {
    originals
        .iter_rows()
        .any(|o| cosine(image, o).is_some_and(|c| c >= threshold))
}

pub fn tie_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Scores every candidate, drops those redundant with `original`, and keeps
/// the best `select_count` by filter score.
pub fn select(
    mut pool: Vec<ExpansionCandidate>,
    original: &ImageSet,
    t0: &str,
    t1: &str,
    config: &FilterConfig,
    embedder: &Embedder,
) -> Result<ScoredPool> {
    config.validate()?;
    let originals = embedder.embed_images(original)?;
    let originals = originals.require_embeddings()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = pool.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = pool
            .chunks_mut(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter_mut()
                        .try_for_each(|c| filter_score(c, t0, t1, config, embedder).map(drop))
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("scoring thread panicked"))
    })?;
    let mut embeddings = Matrix::zeros(0, 0);
    for c in &pool {
        let image = c.image.as_ref().expect("scored candidates have images");
        embeddings.push_row(&embedder.image_embedding(image)?);
    }
    select_scored(pool, &embeddings, originals, config)
}

/// Selection over candidates whose scores are already set. Row `i` of
/// `embeddings` is the image embedding of candidate `i`.
pub fn select_scored(
    candidates: Vec<ExpansionCandidate>,
    embeddings: &Matrix,
    originals: &Matrix,
    config: &FilterConfig,
) -> Result<ScoredPool> {
    config.validate()?;
    if embeddings.rows() != candidates.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidate embeddings for {} candidates",
            embeddings.rows(),
            candidates.len()
        )));
    }
    let mut survivors = Vec::new();
    let mut rejected_redundant = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if c.filter_score.is_none() {
            return Err(Error::InvalidState(format!("candidate {i} is unscored")));
        }
        if is_redundant(embeddings.row(i), originals, config.redundancy_threshold) {
            rejected_redundant.push(i);
        } else {
            survivors.push(i);
        }
    }
    let keys: Vec<String> = candidates.iter().map(|c| tie_key(&c.prompt)).collect();
    survivors.sort_by(|&a, &b| {
        let (fa, fb) = (candidates[a].filter_score, candidates[b].filter_score);
        fb.partial_cmp(&fa)
            .unwrap_or(Ordering::Equal)
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    let under_selected = survivors.len() < config.select_count;
    if under_selected {
        tracing::warn!(
            survivors = survivors.len(),
            wanted = config.select_count,
            "fewer non-redundant candidates than requested"
        );
    }
    survivors.truncate(config.select_count);
    Ok(ScoredPool {
        candidates,
        selected: survivors,
        rejected_redundant,
        under_selected,
        config: *config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Category;

    fn scored(prompt: &str, f: f64) -> ExpansionCandidate {
        let mut c = ExpansionCandidate::new(prompt, vec![Category::Subjects]);
        c.div_score = Some(f);
        c.sim_score = Some(0.0);
        c.filter_score = Some(f);
        c
    }

    #[test]
    fn arithmetic() {
        assert!((combine(0.5, 0.9, 0.1) - 0.59).abs() < 1e-12);
        assert_eq!(combine(0.37, 0.9, 0.0), 0.37);
    }

    #[test]
    fn equidistant_image_has_zero_div() {
        let t0 = [1.0, 0.0];
        let t1 = [0.0, 1.0];
        let img = [1.0, 1.0];
        assert!(div_value(&t0, &t1, &img).abs() < 1e-12);
    }

    #[test]
    fn copy_of_original_is_redundant() {
        let originals = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]);
        let emb = Matrix::from_rows(&[[0.0f32, 1.0], [0.6, -0.8]]);
        let pool = select_scored(
            vec![scored("a", 0.9), scored("b", 0.1)],
            &emb,
            &originals,
            &FilterConfig {
                select_count: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(pool.rejected_redundant, [0]);
        assert_eq!(pool.selected, [1]);
        assert!(!pool.under_selected);
    }

    #[test]
    fn all_redundant_gives_empty_selection() {
        let originals = Matrix::from_rows(&[[1.0f32, 0.0]]);
        let emb = Matrix::from_rows(&[[1.0f32, 0.0], [2.0, 0.0]]);
        let pool = select_scored(
            vec![scored("a", 0.9), scored("b", 0.1)],
            &emb,
            &originals,
            &FilterConfig::default(),
        )
        .unwrap();
        assert!(pool.selected.is_empty());
        assert!(pool.under_selected);
    }

    #[test]
    fn ties_follow_content_hash() {
        let originals = Matrix::from_rows(&[[1.0f32, 0.0]]);
        let emb = Matrix::from_rows(&[[0.0f32, 1.0], [0.0, 1.0]]);
        let a = select_scored(
            vec![scored("x", 0.5), scored("y", 0.5)],
            &emb,
            &originals,
            &FilterConfig::default(),
        )
        .unwrap();
        let b = select_scored(
            vec![scored("y", 0.5), scored("x", 0.5)],
            &emb,
            &originals,
            &FilterConfig::default(),
        )
        .unwrap();
        let names = |p: &ScoredPool| -> Vec<String> {
            p.selected_candidates().map(|c| c.prompt.clone()).collect()
        };
        assert_eq!(names(&a), names(&b));
    }

    #[test]
    fn unscored_candidate_is_invalid_state() {
        let c = ExpansionCandidate::new("a", vec![Category::Subjects]);
        let emb = Matrix::from_rows(&[[1.0f32]]);
        let err = select_scored(vec![c], &emb, &Matrix::zeros(0, 1), &FilterConfig::default());
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }
}
