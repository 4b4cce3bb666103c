//! One prompt through generate, identify, expand, filter and generate again.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{ImageHandle, ImageSet};
use crate::error::{Error, Result};
use crate::expansion::{
    categorize_dimensions, generate_candidates, words, DimensionCategorization, ExpansionCandidate,
    ExpansionConfig, ExpansionRequest,
};
use crate::filtering::{select, FilterConfig, ScoredPool};
use crate::generation::{GenerationConfig, GenerationRecord, Generator, SeedSpec};
use crate::hdi::{HdiContext, HdiStrategy, IdentityHdi, InversionHdi};
use crate::inversion::{InversionConfig, InversionResult};
use crate::lexicon::Category;
use crate::llm::LlmClient;
use crate::personalization::DEFAULT_CONTEXT_BUDGET;
use crate::scorer::Embedder;
use crate::templates::TemplateSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub inversion: InversionConfig,
    pub expansion: ExpansionConfig,
    pub filter: FilterConfig,
    /// Settings for the original image set; `images_per_prompt` is its size.
    pub generation: GenerationConfig,
    pub context_budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inversion: InversionConfig::default(),
            expansion: ExpansionConfig::default(),
            filter: FilterConfig::default(),
            generation: GenerationConfig::default(),
            context_budget: DEFAULT_CONTEXT_BUDGET,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.inversion.validate() {
            errs.push(e.to_string());
        }
        if let Err(Error::Config(list)) = self.filter.validate() {
            errs.extend(list);
        }
        if self.expansion.pool_size < self.filter.select_count {
            errs.push(format!(
                "expansion pool size {} is smaller than filter select count {}",
                self.expansion.pool_size, self.filter.select_count
            ));
        }
        if self.generation.images_per_prompt < self.inversion.batch_size {
            errs.push(format!(
                "{} images per prompt cannot fill an inversion batch of {}",
                self.generation.images_per_prompt, self.inversion.batch_size
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Expansion half of a pipeline run, starting from existing images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRun {
    pub t0: String,
    pub hdi_strategy: String,
    pub t1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<InversionResult>,
    pub categorization: DimensionCategorization,
    pub scored_pool: ScoredPool,
    /// One image per selected prompt, in selection order.
    pub selected_images: ImageSet,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub original: GenerationRecord,
    pub expansion: ExpansionRun,
}

/// The models and settings one pipeline run needs.
#[derive(Debug, Clone)]
pub struct Stack {
    pub embedder: Embedder,
    pub generator: Generator,
    pub llm: Arc<dyn LlmClient>,
    pub templates: TemplateSet,
    pub config: PipelineConfig,
}

impl Stack {
    pub fn hdi_context(&self) -> HdiContext<'_> {
        HdiContext {
            embedder: &self.embedder,
            llm: self.llm.as_ref(),
            templates: &self.templates,
            retry: self.config.expansion.retry,
        }
    }

    pub fn inversion_strategy(&self) -> InversionHdi {
        InversionHdi {
            config: self.config.inversion.clone(),
        }
    }

    /// `n` images of `prompt` with seeds `seed, seed + 1, ...`.
    pub fn generate(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationRecord> {
        let config = GenerationConfig {
            images_per_prompt: n,
            seeds: SeedSpec::Base(seed),
            ..self.config.generation.clone()
        };
        self.generator.generate(prompt, &config)
    }

    pub fn run(
        &self,
        t0: &str,
        hdi: &dyn HdiStrategy,
        preference_context: Option<&str>,
        seed: u64,
    ) -> Result<PipelineRun> {
        self.config.validate()?;
        let original = self.generate(t0, self.config.generation.images_per_prompt, seed)?;
        let expansion = self.expand(t0, &original.images, hdi, preference_context, seed)?;
        Ok(PipelineRun {
            original,
            expansion,
        })
    }

    /// Identifies t₁ on `originals`, expands, renders one scoring image per
    /// candidate, and filters.
    pub fn expand(
        &self,
        t0: &str,
        originals: &ImageSet,
        hdi: &dyn HdiStrategy,
        preference_context: Option<&str>,
        seed: u64,
    ) -> Result<ExpansionRun> {
        let ctx = self.hdi_context();
        let outcome = hdi.identify(t0, originals, &ctx)?;
        let mut warnings = Vec::new();
        let t1 = if outcome.t1.trim().is_empty() {
            warnings.push("identification returned no details; using the original prompt".into());
            t0.to_string()
        } else {
            outcome.t1.clone()
        };

        let mut categorization =
            categorize_dimensions(&t1, ctx.llm, ctx.templates, ctx.retry)?;
        if categorization.is_empty() {
            categorization = fallback_categorization(&t1);
            warnings.push("no detail could be categorized; all words of t1 treated as attributes".into());
        }
        warnings.extend(categorization.warnings.iter().cloned());

        let request = ExpansionRequest {
            t0: t0.to_string(),
            t1: t1.clone(),
            categorization: categorization.clone(),
            pool_size: self.config.expansion.pool_size,
            preference_context: preference_context
                .filter(|c| !c.trim().is_empty())
                .map(str::to_string),
        };
        let candidates = match generate_candidates(&request, ctx.llm, ctx.templates, ctx.retry) {
            Ok(c) => c,
            Err(Error::PartialPool { produced, wanted, .. })
                if produced.len() >= self.config.filter.select_count =>
            {
                warnings.push(format!(
                    "expansion produced {} of {wanted} candidates",
                    produced.len()
                ));
                produced
            }
            Err(e) => return Err(e),
        };
        let candidates = self.render_candidates(candidates, seed)?;
        let scored_pool = select(
            candidates,
            originals,
            t0,
            &t1,
            &self.config.filter,
            &self.embedder,
        )?;
        if scored_pool.under_selected {
            warnings.push(format!(
                "only {} candidates survived redundancy filtering",
                scored_pool.selected.len()
            ));
        }
        let selected: Vec<ImageHandle> = scored_pool
            .selected_candidates()
            .map(|c| c.image.clone().expect("selected candidates have images"))
            .collect();
        let seeds = vec![seed; selected.len()];
        Ok(ExpansionRun {
            t0: t0.to_string(),
            hdi_strategy: hdi.name().to_string(),
            t1,
            inversion: outcome.inversion,
            categorization,
            scored_pool,
            selected_images: ImageSet::new(t0, selected, seeds),
            warnings,
        })
    }

    /// One image per candidate, all with the same seed so differences come
    /// from the prompts.
    pub fn render_candidates(
        &self,
        mut candidates: Vec<ExpansionCandidate>,
        seed: u64,
    ) -> Result<Vec<ExpansionCandidate>> {
        let config = GenerationConfig {
            images_per_prompt: 1,
            seeds: SeedSpec::Explicit(vec![seed]),
            ..self.config.generation.clone()
        };
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
        let chunk = candidates.len().div_ceil(workers).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = candidates
                .chunks_mut(chunk)
                .map(|part| {
                    let config = &config;
                    s.spawn(move || -> Result<()> {
                        for c in part {
                            let record = self.generator.generate(&c.prompt, config)?;
                            c.image = record.images.images.into_iter().next();
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("render thread panicked"))
        })?;
        Ok(candidates)
    }

    /// The expanded image set for the no-identification ablation.
    pub fn expand_without_hdi(&self, t0: &str, originals: &ImageSet, seed: u64) -> Result<ExpansionRun> {
        self.expand(t0, originals, &IdentityHdi, None, seed)
    }
}

fn fallback_categorization(t1: &str) -> DimensionCategorization {
    let mut c = DimensionCategorization::default();
    let mut seen = std::collections::HashSet::new();
    let ws = words(t1).into_iter().filter(|w| seen.insert(w.clone())).collect();
    c.groups.insert(Category::Attributes, ws);
    c
}
