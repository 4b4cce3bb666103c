//! Prompt inversion: optimize continuous token embeddings so their
//! nearest-token projection matches an image set, exposing what the images
//! share.
//!
//! Each step projects the continuous slots `Z` onto their nearest vocabulary
//! tokens `Z'`, evaluates `1 - mean_b cos(text(Z'), image_b)` on a random
//! batch of `b` images, and applies the gradient taken at `Z'` to `Z`
//! (straight-through). Optimizer state lives on `Z` only.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{nearest_tokens, tokenize_and_embed, ImageSet, TokenEmbeddingSequence};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::scorer::{Embedder, Scorer};
use crate::vocab::{TokenId, VocabularyEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain `Z <- Z - lr * g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauStop {
    /// Window length, in steps.
    pub patience: usize,
    /// Minimum improvement of the window-mean loss to keep going.
    pub min_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub m: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub log_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_stop: Option<PlateauStop>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.1,
            batch_size: 2,
            m: 15,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            log_every: 100,
            plateau_stop: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.steps < 1 {
            errs.push("inversion steps must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            errs.push("batch size must be at least 1".to_string());
        }
        if self.m < 1 {
            errs.push("slot count m must be at least 1".to_string());
        }
        if self.weight_decay < 0.0 {
            errs.push("weight decay must be non-negative".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("optimizer betas must lie in [0, 1)".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub inverted_prompt: String,
    pub token_ids: Vec<TokenId>,
    /// `1 - similarity(token_ids, full image set)`.
    pub final_loss: f64,
    /// Batch loss at `Z'` before each update, one entry per step.
    pub loss_trace: Vec<(usize, f64)>,
    /// Full-set similarity of the initial padded prompt.
    pub initial_similarity: f64,
    pub config: InversionConfig,
    pub source_prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// First-order optimizer over the continuous slots.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Matrix,
    v: Matrix,
}

impl Optimizer {
    pub fn new(config: &InversionConfig, rows: usize, cols: usize) -> Self {
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    pub fn step(&mut self, params: &mut Matrix, grad: &Matrix) {
        debug_assert_eq!(params.as_slice().len(), grad.as_slice().len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *p = (*p as f64 - self.lr * *g as f64) as f32;
                }
            }
            OptimizerKind::AdamW => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                let decay = 1.0 - self.lr * self.weight_decay;
                let it = params
                    .as_mut_slice()
                    .iter_mut()
                    .zip(grad.as_slice())
                    .zip(self.m.as_mut_slice().iter_mut().zip(self.v.as_mut_slice()));
                for ((p, g), (m, v)) in it {
                    let g = *g as f64;
                    let mt = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                    let vt = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                    *m = mt as f32;
                    *v = vt as f32;
                    let update = self.lr * (mt / bc1) / ((vt / bc2).sqrt() + self.eps);
                    *p = (*p as f64 * decay - update) as f32;
                }
            }
        }
    }
}

/// Loss `1 - mean_b cos(text(slots), image_b)` and its gradient with respect
/// to `slots`.
pub fn loss_and_gradient(
    scorer: &dyn Scorer,
    slots: &Matrix,
    batch: &Matrix,
) -> Result<(f64, Matrix)> {
    let (loss, grad_features, _) = loss_and_feature_gradient(scorer, slots, batch)?;
    let grad = scorer.encode_slots_vjp(slots, &grad_features)?;
    Ok((loss, grad))
}

/// Returns `(loss, dL/dfeatures, unit features)`.
fn loss_and_feature_gradient(
    scorer: &dyn Scorer,
    slots: &Matrix,
    batch: &Matrix,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch.rows() == 0 {
        return Err(Error::InvalidInput("image batch is empty".into()));
    }
    let features = scorer.encode_slots(slots)?;
    let fnorm = norm(&features);
    if fnorm == 0.0 || !fnorm.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            detail: "text features have zero or non-finite norm".into(),
        });
    }
    let unit: Vec<f64> = features.iter().map(|v| *v as f64 / fnorm).collect();
    let target = mean_unit_rows(batch)?;
    let sim: f64 = unit.iter().zip(&target).map(|(a, b)| a * b).sum();
    // d/ds [1 - <s/|s|, target>] = -(target - <u, target> u) / |s|
    let grad: Vec<f64> = unit
        .iter()
        .zip(&target)
        .map(|(u, t)| -(t - sim * u) / fnorm)
        .collect();
    Ok((1.0 - sim, grad, unit))
}

/// Mean of the row directions; zero rows are an error.
fn mean_unit_rows(m: &Matrix) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; m.cols()];
    for (i, row) in m.iter_rows().enumerate() {
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidInput(format!("image embedding {i} has zero norm")));
        }
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v as f64 / n;
        }
    }
    let k = m.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Outcome of one straight-through step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Batch loss at the projected point, before the update.
    pub loss: f64,
    /// Tokens the slots projected onto for this step.
    pub token_ids: Vec<TokenId>,
    /// Unit text features of the projected tokens.
    pub unit_features: Vec<f64>,
}

/// One inversion update of `seq` in place.
pub fn inversion_step(
    seq: &mut TokenEmbeddingSequence,
    optimizer: &mut Optimizer,
    batch: &Matrix,
    scorer: &dyn Scorer,
    step: usize,
) -> Result<StepReport> {
    let vocab = scorer.vocabulary();
    let token_ids = nearest_tokens(&seq.vectors, vocab)?;
    let projected = rows_for(vocab, &token_ids);
    let numeric = |detail: String| Error::Numeric { step, detail };
    let (loss, grad_features, unit_features) =
        loss_and_feature_gradient(scorer, &projected, batch).map_err(|e| match e {
            Error::Numeric { detail, .. } => numeric(detail),
            other => other,
        })?;
    if !loss.is_finite() {
        return Err(numeric(format!("loss is {loss}")));
    }
    let grad = scorer.encode_slots_vjp(&projected, &grad_features)?;
    if !grad.is_finite() {
        return Err(numeric("gradient has non-finite entries".into()));
    }
    optimizer.step(&mut seq.vectors, &grad);
    if !seq.vectors.is_finite() {
        return Err(numeric("embeddings became non-finite after update".into()));
    }
    Ok(StepReport {
        loss,
        token_ids,
        unit_features,
    })
}

fn rows_for(vocab: &VocabularyEmbedding, ids: &[TokenId]) -> Matrix {
    let mut m = Matrix::zeros(ids.len(), vocab.dim());
    for (i, &id) in ids.iter().enumerate() {
        m.row_mut(i).copy_from_slice(vocab.row(id));
    }
    m
}

/// Batch indices for `step`: `b` distinct images, seeded by `(seed, step)`.
pub fn sample_batch(seed: u64, step: usize, n: usize, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ splitmix64(step as u64 + 1));
    let mut idx = sample(&mut rng, n, b).into_vec();
    idx.sort_unstable();
    idx
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Full inversion run from prompt `t0` against `images`.
///
/// Returns the projection with the highest full-set similarity seen over the
/// run (the step-0 projection of the padded prompt included), so the
/// inverted prompt never scores below the starting point.
pub fn run_inversion(
    embedder: &Embedder,
    images: &ImageSet,
    prompt: &str,
    config: &InversionConfig,
) -> Result<InversionResult> {
    config.validate()?;
    if prompt.trim().is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    if images.len() < config.batch_size {
        return Err(Error::InvalidInput(format!(
            "image set has {} images, batch size is {}",
            images.len(),
            config.batch_size
        )));
    }
    let scorer = embedder.scorer().as_ref();
    let vocab = scorer.vocabulary();
    let embedded = embedder.embed_images(images)?;
    let all = embedded.require_embeddings()?;
    let full_target = mean_unit_rows(all)?;

    let (mut seq, _) = tokenize_and_embed(prompt, vocab, config.m, config.seed)?;
    let warnings = seq.warnings.clone();
    let mut optimizer = Optimizer::new(config, seq.m(), seq.dim());
    let mut trace = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, Vec<TokenId>)> = None;
    let mut initial_similarity = f64::NAN;

    let consider = |best: &mut Option<(f64, Vec<TokenId>)>, sim: f64, ids: &[TokenId]| {
        if best.as_ref().is_none_or(|(b, _)| sim > *b) {
            *best = Some((sim, ids.to_vec()));
        }
    };

    for step in 0..config.steps {
        let idx = sample_batch(config.seed, step, all.rows(), config.batch_size);
        let batch = Matrix::from_rows(&idx.iter().map(|&i| all.row(i)).collect::<Vec<_>>());
        let report = inversion_step(&mut seq, &mut optimizer, &batch, scorer, step)?;
        let full_sim: f64 = report
            .unit_features
            .iter()
            .zip(&full_target)
            .map(|(a, b)| a * b)
            .sum();
        if step == 0 {
            initial_similarity = full_sim;
        }
        consider(&mut best, full_sim, &report.token_ids);
        trace.push((step, report.loss));
        if config.log_every > 0 && step % config.log_every == 0 {
            tracing::debug!(step, loss = report.loss, full_sim, "inversion");
        }
        if let Some(p) = config.plateau_stop {
            if plateaued(&trace, p) {
                tracing::debug!(step, "inversion stopped on plateau");
                break;
            }
        }
    }

    let final_ids = nearest_tokens(&seq.vectors, vocab)?;
    let final_sim = full_similarity(scorer, vocab, &final_ids, &full_target)?;
    consider(&mut best, final_sim, &final_ids);

    let (best_sim, token_ids) = best.expect("at least one step ran");
    Ok(InversionResult {
        inverted_prompt: decode_tokens(vocab, &token_ids)?,
        token_ids,
        final_loss: 1.0 - best_sim,
        loss_trace: trace,
        initial_similarity,
        config: config.clone(),
        source_prompt: prompt.to_string(),
        warnings,
    })
}

fn full_similarity(
    scorer: &dyn Scorer,
    vocab: &VocabularyEmbedding,
    ids: &[TokenId],
    target: &[f64],
) -> Result<f64> {
    let unit = scorer.embed_slots(&rows_for(vocab, ids))?;
    Ok(unit.iter().zip(target).map(|(a, b)| *a as f64 * b).sum())
}

fn plateaued(trace: &[(usize, f64)], p: PlateauStop) -> bool {
    if p.patience == 0 || trace.len() < 2 * p.patience {
        return false;
    }
    let window = |s: &[(usize, f64)]| s.iter().map(|(_, l)| l).sum::<f64>() / s.len() as f64;
    let n = trace.len();
    let recent = window(&trace[n - p.patience..]);
    let before = window(&trace[n - 2 * p.patience..n - p.patience]);
    before - recent < p.min_delta
}

/// Text for a token sequence with tokenizer-standard spacing.
pub fn decode_tokens(vocab: &VocabularyEmbedding, ids: &[TokenId]) -> Result<String> {
    vocab.decode(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::EmbeddingCache;
    use crate::linalg::dot;
    use crate::scorer::SyntheticScorer;
    use std::sync::Arc;

    fn setup(dim: usize) -> (Arc<SyntheticScorer>, Embedder) {
        let s = Arc::new(SyntheticScorer::new(dim, 9));
        let e = Embedder::new(s.clone(), Arc::new(EmbeddingCache::in_memory()));
        (s, e)
    }

    #[test]
    fn optimum_gives_zero_loss_and_gradient() {
        let (s, _) = setup(16);
        let vocab = s.vocabulary();
        let tok = vocab.id_of("dog").unwrap();
        let slots = rows_for(vocab, &[tok; 3]);
        let batch = Matrix::from_rows(&[vocab.row(tok), vocab.row(tok)]);
        let (loss, grad) = loss_and_gradient(s.as_ref(), &slots, &batch).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(grad.as_slice().iter().all(|g| g.abs() < 1e-5));
    }

    #[test]
    fn orthogonal_images_give_unit_loss() {
        let (s, _) = setup(16);
        let vocab = s.vocabulary();
        let tok = vocab.id_of("dog").unwrap();
        let mut seq = TokenEmbeddingSequence {
            vectors: rows_for(vocab, &[tok]),
            origin_prompt: "dog".into(),
            warnings: vec![],
        };
        let t = vocab.row(tok);
        let other = vocab.row(vocab.id_of("castle").unwrap());
        let p = dot(other, t) as f32;
        let orth: Vec<f32> = other.iter().zip(t).map(|(o, x)| o - p * x).collect();
        let batch = Matrix::from_rows(&[orth]);
        let mut opt = Optimizer::new(&InversionConfig::default(), 1, 16);
        let r = inversion_step(&mut seq, &mut opt, &batch, s.as_ref(), 0).unwrap();
        assert!((r.loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batches_are_distinct_and_seeded() {
        let a = sample_batch(3, 10, 10, 4);
        assert_eq!(a, sample_batch(3, 10, 10, 4));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 4);
        assert!(a.iter().all(|&i| i < 10));
    }

    #[test]
    fn rejects_zero_steps_and_small_sets() {
        let (s, e) = setup(16);
        let v = s.vocabulary();
        let images = ImageSet::from_embeddings("p", Matrix::from_rows(&[v.row(5), v.row(6)]));
        let config = InversionConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(
            run_inversion(&e, &images, "a dog", &config),
            Err(Error::InvalidInput(_))
        ));
        let config = InversionConfig {
            batch_size: 3,
            ..Default::default()
        };
        assert!(matches!(
            run_inversion(&e, &images, "a dog", &config),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_step_trace() {
        let (s, e) = setup(16);
        let v = s.vocabulary();
        let images = ImageSet::from_embeddings("p", Matrix::from_rows(&[v.row(5), v.row(6)]));
        let config = InversionConfig {
            steps: 1,
            m: 4,
            ..Default::default()
        };
        let r = run_inversion(&e, &images, "a dog", &config).unwrap();
        assert_eq!(r.loss_trace.len(), 1);
        assert_eq!(r.token_ids.len(), 4);
        assert_eq!(decode_tokens(v, &r.token_ids).unwrap(), r.inverted_prompt);
    }

    #[test]
    fn plateau_stop_ends_early() {
        let (s, e) = setup(16);
        let v = s.vocabulary();
        let images = ImageSet::from_embeddings("p", Matrix::from_rows(&[v.row(5), v.row(5)]));
        let config = InversionConfig {
            steps: 500,
            m: 2,
            plateau_stop: Some(PlateauStop {
                patience: 10,
                min_delta: 1e-3,
            }),
            ..Default::default()
        };
        let r = run_inversion(&e, &images, "a dog", &config).unwrap();
        assert!(r.loss_trace.len() < 500);
    }
}
