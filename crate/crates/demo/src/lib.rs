//! Three small, self-contained computations for the browser page in `www/`.
//! Each wasm export takes plain numbers or a JSON string and returns JSON, so
//! the page needs no bundler.
//!
//! Nothing here spawns threads, reads files or asks for the time; those
//! would trap on `wasm32-unknown-unknown`.

use std::collections::BTreeSet;
use std::sync::Arc;

use homodiv_core::cache::EmbeddingCache;
use homodiv_core::embedding::ImageSet;
use homodiv_core::evaluation::{DiversityMetric, Icad};
use homodiv_core::filtering::{combine, tie_key};
use homodiv_core::generation::MockEmbedder;
use homodiv_core::inversion::{run_inversion, splitmix64, InversionConfig};
use homodiv_core::linalg::Matrix;
use homodiv_core::scorer::{Embedder, SyntheticScorer};
use homodiv_core::vocab::VocabularyEmbedding;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionDemo {
    pub planted: Vec<String>,
    pub inverted_prompt: String,
    pub recovered: usize,
    /// Batch loss per step.
    pub losses: Vec<f64>,
}

/// Plants the mean of three vocabulary rows as every "image" and inverts it
/// from a neutral prompt.
pub fn planted_inversion(seed: u64, dim: usize, steps: usize) -> Result<InversionDemo, String> {
    if !(8..=512).contains(&dim) || !(1..=2000).contains(&steps) {
        return Err("dim must be in 8..=512 and steps in 1..=2000".into());
    }
    let vocab = Arc::new(VocabularyEmbedding::synthetic(dim, seed));
    let ids: Vec<_> = vocab.regular_ids().collect();
    let mut planted = BTreeSet::new();
    let mut state = seed;
    while planted.len() < 3 {
        state = splitmix64(state);
        planted.insert(ids[(state % ids.len() as u64) as usize]);
    }
    let mut mean = vec![0.0f32; dim];
    for &id in &planted {
        for (m, v) in mean.iter_mut().zip(vocab.row(id)) {
            *m += v / 3.0;
        }
    }
    let images = ImageSet::from_embeddings("planted", Matrix::from_rows(&vec![mean; 6]));
    let embedder = Embedder::new(
        Arc::new(SyntheticScorer::with_vocabulary(vocab.clone(), seed)),
        Arc::new(EmbeddingCache::in_memory()),
    );
    let config = InversionConfig {
        steps,
        seed,
        ..InversionConfig::default()
    };
    let result = run_inversion(&embedder, &images, "a photo of something", &config).map_err(|e| e.to_string())?;
    let recovered = planted.iter().filter(|id| result.token_ids.contains(id)).count();
    Ok(InversionDemo {
        planted: planted.iter().filter_map(|&id| vocab.token(id).map(str::to_string)).collect(),
        inverted_prompt: result.inverted_prompt,
        recovered,
        losses: result.loss_trace.iter().map(|(_, l)| *l).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CandidateScores {
    pub prompt: String,
    pub div: f64,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub rank: usize,
    pub prompt: String,
    pub score: f64,
}

/// Orders candidates by `div + λ·sim`, best first, ties by prompt hash.
pub fn rank(candidates: &[CandidateScores], lambda: f64) -> Vec<Ranked> {
    let mut scored: Vec<(f64, String, &CandidateScores)> = candidates
        .iter()
        .map(|c| (combine(c.div, c.sim, lambda), tie_key(&c.prompt), c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored
        .into_iter()
        .enumerate()
        .map(|(rank, (score, _, c))| Ranked {
            rank,
            prompt: c.prompt.clone(),
            score,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoisePoint {
    pub noise: f64,
    pub icad: f64,
    /// `σ²/(2(1+σ²))`: the expected value for unit-norm noise directions
    /// orthogonal to the prompt.
    pub predicted: f64,
}

/// ICAD of `n` mock images of one prompt at image noise `noise`.
pub fn icad_at_noise(prompt: &str, noise: f64, n: usize, seed: u64) -> Result<NoisePoint, String> {
    if !(0.0..=10.0).contains(&noise) || !(2..=64).contains(&n) {
        return Err("noise must be in [0, 10] and n in 2..=64".into());
    }
    let mock = MockEmbedder::new(Arc::new(VocabularyEmbedding::synthetic(128, 0)), noise);
    let rows: Vec<Vec<f32>> = (0..n as u64).map(|i| mock.embedding(prompt, seed.wrapping_add(i))).collect();
    let icad = Icad.score(&Matrix::from_rows(&rows)).map_err(|e| e.to_string())?;
    let s2 = noise * noise;
    Ok(NoisePoint {
        noise,
        icad,
        predicted: s2 / (2.0 * (1.0 + s2)),
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = plantedInversion)]
pub fn planted_inversion_js(seed: u32, dim: u32, steps: u32) -> Result<String, JsValue> {
    to_json(planted_inversion(seed.into(), dim as usize, steps as usize))
}

/// `candidates` is a JSON list of `{prompt, div, sim}`.
#[wasm_bindgen(js_name = rankCandidates)]
pub fn rank_candidates_js(candidates: &str, lambda: f64) -> Result<String, JsValue> {
    let parsed: Result<Vec<CandidateScores>, String> = serde_json::from_str(candidates).map_err(|e| e.to_string());
    to_json(parsed.map(|c| rank(&c, lambda)))
}

#[wasm_bindgen(js_name = icadAtNoise)]
pub fn icad_at_noise_js(prompt: &str, noise: f64, n: u32, seed: u32) -> Result<String, JsValue> {
    to_json(icad_at_noise(prompt, noise, n as usize, seed.into()))
}
