//! Image-set diversity metric and the offline evaluation harness.

use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::atomic_write;
use crate::embedding::ImageSet;
use crate::error::{Error, Result};
use crate::hdi::{HdiStrategy, IdentityHdi};
use crate::inversion::splitmix64;
use crate::linalg::{cosine, Matrix};
use crate::pipeline::Stack;
use crate::scorer::Embedder;

/// Diversity of a set of image embeddings, higher is more diverse.
pub trait DiversityMetric: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn score(&self, embeddings: &Matrix) -> Result<f64>;
}

/// Intra-class average distance: mean over unordered pairs of
/// `(1 - cos(e_i, e_j)) / 2`, clamped to `[0, 1]`. Identical rows count as
/// distance exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Icad;

impl DiversityMetric for Icad {
    fn name(&self) -> &str {
        "icad"
    }

    fn score(&self, embeddings: &Matrix) -> Result<f64> {
        let n = embeddings.rows();
        if n < 2 {
            return Err(Error::InvalidInput(format!("ICAD needs at least 2 images, got {n}")));
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                if embeddings.row(i) == embeddings.row(j) {
                    continue;
                }
                let c = cosine(embeddings.row(i), embeddings.row(j)).ok_or_else(|| {
                    Error::InvalidInput(format!("image {i} or {j} has a zero embedding"))
                })?;
                total += ((1.0 - c) / 2.0).clamp(0.0, 1.0);
            }
        }
        Ok(total / (n * (n - 1) / 2) as f64)
    }
}

pub fn icad(images: &ImageSet, embedder: &Embedder) -> Result<f64> {
    let embedded = embedder.embed_images(images)?;
    Icad.score(embedded.require_embeddings()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Base,
    PoetNoHdi,
    Poet,
    Custom,
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "base" => Ok(Condition::Base),
            "poet_no_hdi" => Ok(Condition::PoetNoHdi),
            "poet" => Ok(Condition::Poet),
            "custom" => Ok(Condition::Custom),
            other => Err(Error::InvalidInput(format!(
                "unknown condition `{other}` (expected base, poet_no_hdi or poet)"
            ))),
        }
    }
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Base => "base",
            Condition::PoetNoHdi => "poet_no_hdi",
            Condition::Poet => "poet",
            Condition::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcadRow {
    pub index: usize,
    pub prompt: String,
    pub n: usize,
    pub icad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcadReport {
    pub condition: Condition,
    pub label: String,
    pub scorer_model_id: String,
    pub metric: String,
    pub per_prompt: Vec<IcadRow>,
    /// Mean ICAD over rows that succeeded.
    pub aggregate: Option<f64>,
    pub failures: usize,
    /// More than 20% of prompts failed.
    pub degraded: bool,
}

impl IcadReport {
    fn assemble(condition: Condition, label: &str, model: &str, mut rows: Vec<IcadRow>) -> Self {
        rows.sort_by_key(|r| r.index);
        let ok: Vec<f64> = rows.iter().filter_map(|r| r.icad).collect();
        let failures = rows.len() - ok.len();
        let aggregate = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        Self {
            condition,
            label: label.to_string(),
            scorer_model_id: model.to_string(),
            metric: Icad.name().to_string(),
            degraded: failures * 5 > rows.len(),
            per_prompt: rows,
            aggregate,
            failures,
        }
    }

    /// Flat rows `prompt,condition,icad`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidState(format!("csv: {e}"));
        w.write_record(["prompt", "condition", "icad"]).map_err(err)?;
        for r in &self.per_prompt {
            let v = r.icad.map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([r.prompt.as_str(), self.label.as_str(), v.as_str()])
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidState(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub prompt_source: PathBuf,
    pub sample_count: usize,
    /// Images per prompt (base) or selected expansions per prompt (poet).
    pub n: usize,
    pub condition: Condition,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub parallelism: usize,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            prompt_source: PathBuf::new(),
            sample_count: 1000,
            n: 10,
            condition: Condition::Poet,
            seed: 0,
            checkpoint_every: 25,
            parallelism: 4,
        }
    }
}

/// Twenty everyday-subject prompts, one per line; the default evaluation
/// list when no prompt file is given.
pub const SAMPLE_PROMPTS: &str = include_str!("../data/prompts20.txt");

/// One prompt per non-empty line.
pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// `count` prompts drawn without replacement, kept in file order.
pub fn sample_prompts(prompts: &[String], count: usize, seed: u64) -> Vec<(usize, String)> {
    if count >= prompts.len() {
        return prompts.iter().cloned().enumerate().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, prompts.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| (i, prompts[i].clone())).collect()
}

/// Seed for the prompt at `index` of a run seeded with `seed`.
pub fn prompt_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64)) % 1_000_000_007
}

/// Produces the image set evaluated for one prompt.
pub trait EvalPipeline: Sync {
    fn scorer_model_id(&self) -> String;

    fn embedder(&self) -> &Embedder;

    fn base_images(&self, prompt: &str, n: usize, seed: u64) -> Result<ImageSet>;

    /// Selected expansion images using `hdi` for identification.
    fn expanded_images(&self, prompt: &str, hdi: &dyn HdiStrategy, n: usize, seed: u64) -> Result<ImageSet>;

    fn default_hdi(&self) -> Arc<dyn HdiStrategy>;
}

impl EvalPipeline for Stack {
    fn scorer_model_id(&self) -> String {
        self.embedder.scorer().handle().model_id.clone()
    }

    fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    fn base_images(&self, prompt: &str, n: usize, seed: u64) -> Result<ImageSet> {
        Ok(self.generate(prompt, n, seed)?.images)
    }

    fn expanded_images(&self, prompt: &str, hdi: &dyn HdiStrategy, n: usize, seed: u64) -> Result<ImageSet> {
        let mut stack = self.clone();
        stack.config.filter.select_count = n;
        stack.config.expansion.pool_size = stack.config.expansion.pool_size.max(n);
        let originals = stack.generate(prompt, stack.config.generation.images_per_prompt, seed)?;
        let run = stack.expand(prompt, &originals.images, hdi, None, seed)?;
        Ok(run.selected_images)
    }

    fn default_hdi(&self) -> Arc<dyn HdiStrategy> {
        Arc::new(self.inversion_strategy())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Checkpoint {
    label: String,
    rows: Vec<IcadRow>,
}

/// Runs the configured condition over the sampled prompts. With
/// `checkpoint_dir`, progress is saved every `checkpoint_every` prompts and
/// rows already present there are not recomputed.
pub fn run_eval(
    config: &EvalRunConfig,
    pipeline: &dyn EvalPipeline,
    checkpoint_dir: Option<&Path>,
) -> Result<IcadReport> {
    let prompts = read_prompts(&config.prompt_source)?;
    let strategy: Option<Arc<dyn HdiStrategy>> = match config.condition {
        Condition::Base => None,
        Condition::PoetNoHdi => Some(Arc::new(IdentityHdi)),
        Condition::Poet => Some(pipeline.default_hdi()),
        Condition::Custom => {
            return Err(Error::InvalidInput(
                "custom conditions run through compare_hdi_strategies".into(),
            ))
        }
    };
    evaluate(
        &prompts,
        config,
        config.condition,
        config.condition.as_str(),
        pipeline,
        strategy.as_deref(),
        checkpoint_dir,
    )
}

fn evaluate(
    prompts: &[String],
    config: &EvalRunConfig,
    condition: Condition,
    label: &str,
    pipeline: &dyn EvalPipeline,
    strategy: Option<&dyn HdiStrategy>,
    checkpoint_dir: Option<&Path>,
) -> Result<IcadReport> {
    if config.sample_count == 0 {
        return Err(Error::InvalidInput("sample_count must be at least 1".into()));
    }
    if config.n < 2 {
        return Err(Error::InvalidInput("n must be at least 2".into()));
    }
    let sampled = sample_prompts(prompts, config.sample_count, config.seed);
    let checkpoint_path = checkpoint_dir.map(|d| d.join(format!("checkpoint-{label}.json")));
    let mut rows: Vec<IcadRow> = match &checkpoint_path {
        Some(p) if p.exists() => {
            let cp: Checkpoint =
                serde_json::from_slice(&fs::read(p).map_err(|e| Error::io(p, e))?)?;
            cp.rows
        }
        _ => Vec::new(),
    };
    let pending: Vec<&(usize, String)> = sampled
        .iter()
        .filter(|(i, _)| !rows.iter().any(|r| r.index == *i))
        .collect();

    let run_one = |(index, prompt): &(usize, String)| -> IcadRow {
        let seed = prompt_seed(config.seed, *index);
        let images = match strategy {
            None => pipeline.base_images(prompt, config.n, seed),
            Some(s) => pipeline.expanded_images(prompt, s, config.n, seed),
        };
        let scored = images.and_then(|set| {
            let n = set.len();
            icad(&set, pipeline.embedder()).map(|v| (n, v))
        });
        match scored {
            Ok((n, v)) => IcadRow {
                index: *index,
                prompt: prompt.clone(),
                n,
                icad: Some(v),
                error: None,
            },
            Err(e) => {
                tracing::warn!(index, error = %e, "prompt failed");
                IcadRow {
                    index: *index,
                    prompt: prompt.clone(),
                    n: 0,
                    icad: None,
                    error: Some(format!("{}: {e}", e.kind())),
                }
            }
        }
    };

    let every = config.checkpoint_every.max(1);
    let width = config.parallelism.max(1);
    for block in pending.chunks(every) {
        for group in block.chunks(width) {
            let done: Vec<IcadRow> = std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|p| s.spawn(|| run_one(p))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("evaluation thread panicked"))
                    .collect()
            });
            rows.extend(done);
        }
        if let Some(p) = &checkpoint_path {
            let cp = Checkpoint {
                label: label.to_string(),
                rows: rows.clone(),
            };
            atomic_write(p, &serde_json::to_vec(&cp)?)?;
        }
    }
    rows.retain(|r| sampled.iter().any(|(i, _)| *i == r.index));
    Ok(IcadReport::assemble(
        condition,
        label,
        &pipeline.scorer_model_id(),
        rows,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdiComparisonRow {
    pub strategy: String,
    pub aggregate: Option<f64>,
    pub prompts: usize,
    pub failures: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdiComparison {
    pub scorer_model_id: String,
    pub rows: Vec<HdiComparisonRow>,
    pub reports: Vec<IcadReport>,
}

/// Runs the full pipeline once per strategy, everything else held fixed.
pub fn compare_hdi_strategies(
    strategies: &[Arc<dyn HdiStrategy>],
    config: &EvalRunConfig,
    pipeline: &dyn EvalPipeline,
) -> Result<HdiComparison> {
    let prompts = read_prompts(&config.prompt_source)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for s in strategies {
        let report = evaluate(
            &prompts,
            config,
            Condition::Custom,
            s.name(),
            pipeline,
            Some(s.as_ref()),
            None,
        )?;
        rows.push(HdiComparisonRow {
            strategy: s.name().to_string(),
            aggregate: report.aggregate,
            prompts: report.per_prompt.len(),
            failures: report.failures,
            failed: report.degraded || report.aggregate.is_none(),
        });
        reports.push(report);
    }
    Ok(HdiComparison {
        scorer_model_id: pipeline.scorer_model_id(),
        rows,
        reports,
    })
}
