use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use homodiv_core::config::{GlobalConfig, Provenance};
use homodiv_core::embedding::ImageSet;
use homodiv_core::evaluation::{
    compare_hdi_strategies, run_eval, Condition, EvalRunConfig, HdiComparison, IcadReport, SAMPLE_PROMPTS,
};
use homodiv_core::expansion::{
    categorize_dimensions, generate_candidates, DimensionCategorization, ExpansionCandidate, ExpansionRequest,
};
use homodiv_core::filtering::{select, ScoredPool};
use homodiv_core::generation::{GenerationRecord, ManifestEntry};
use homodiv_core::hdi::{HdiStrategy, StrategyKind};
use homodiv_core::inversion::run_inversion;
use homodiv_core::pipeline::Stack;
use homodiv_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::CliError;

/// A written record: provenance first, then the payload's own fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

fn write_json<T: Serialize>(path: &Path, config: &GlobalConfig, body: T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let artifact = Artifact {
        provenance: config.provenance(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&artifact)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let a: Artifact<T> = serde_json::from_slice(&bytes)?;
    Ok(a.body)
}

/// Copies each image to `dir/<rank>-<hash>.png` and returns the file names.
fn copy_images(images: &ImageSet, dir: &Path) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(dir)?;
    let width = images.len().to_string().len().max(2);
    images
        .images
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let name = format!("{i:0width$}-{}.png", &h.content_hash[..12]);
            fs::copy(&h.path, dir.join(&name)).map_err(|e| Error::io(&h.path, e))?;
            Ok(name)
        })
        .collect()
}

/// Store manifest rows for `record`'s images, one per image.
fn manifest_rows(stack: &Stack, record: &GenerationRecord) -> Result<Vec<ManifestEntry>, CliError> {
    let wanted: HashSet<&str> = record.images.images.iter().map(|h| h.content_hash.as_str()).collect();
    let mut seen = HashSet::new();
    let mut rows: Vec<ManifestEntry> = stack
        .generator
        .store()
        .manifest()?
        .into_iter()
        .rev()
        .filter(|e| e.prompt == record.prompt && wanted.contains(e.content_hash.as_str()))
        .filter(|e| seen.insert(e.content_hash.clone()))
        .collect();
    rows.reverse();
    Ok(rows)
}

fn write_manifest(path: &Path, rows: &[ManifestEntry]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    /// Number of images; defaults to `backend.images_per_prompt`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "generated")]
    out: PathBuf,
}

pub fn generate(config: &GlobalConfig, a: GenerateArgs) -> Result<Value, CliError> {
    let stack = config.build_stack()?;
    let n = a.n.unwrap_or(config.backend.images_per_prompt);
    let record = stack.generate(&a.prompt, n, a.seed)?;
    let files = copy_images(&record.images, &a.out.join("images"))?;
    write_manifest(&a.out.join("manifest.jsonl"), &manifest_rows(&stack, &record)?)?;
    write_json(&a.out.join("generation.json"), config, json!({"record": record, "files": files}))?;
    Ok(json!({"out": a.out, "images": files.len()}))
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Directory of images, read in file-name order.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "inversion.json")]
    out: PathBuf,
}

pub fn invert(mut config: GlobalConfig, a: InvertArgs) -> Result<Value, CliError> {
    let inv = &mut config.inversion;
    inv.steps = a.steps.unwrap_or(inv.steps);
    inv.learning_rate = a.lr.unwrap_or(inv.learning_rate);
    inv.batch_size = a.batch.unwrap_or(inv.batch_size);
    inv.m = a.m.unwrap_or(inv.m);
    inv.seed = a.seed.unwrap_or(inv.seed);
    config.validate()?;
    let stack = config.build_stack()?;
    let images = ImageSet::from_dir(&a.images, a.prompt.clone())?;
    let result = run_inversion(&stack.embedder, &images, &a.prompt, &config.inversion)?;
    write_json(&a.out, &config, &result)?;
    Ok(json!({"out": a.out, "inverted_prompt": result.inverted_prompt, "final_loss": result.final_loss}))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoolRecord {
    pub t0: String,
    pub t1: String,
    pub categorization: DimensionCategorization,
    pub candidates: Vec<ExpansionCandidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    t0: String,
    /// Homogeneous details, e.g. an inverted prompt.
    #[arg(long)]
    t1: String,
    /// Pool size; defaults to `expansion.pool_size`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    preference_context: Option<String>,
    #[arg(long, default_value = "pool.json")]
    out: PathBuf,
}

pub fn expand(config: &GlobalConfig, a: ExpandArgs) -> Result<Value, CliError> {
    let stack = config.build_stack()?;
    let retry = stack.config.expansion.retry;
    let categorization = categorize_dimensions(&a.t1, stack.llm.as_ref(), &stack.templates, retry)?;
    let request = ExpansionRequest {
        t0: a.t0.clone(),
        t1: a.t1.clone(),
        categorization: categorization.clone(),
        pool_size: a.k.unwrap_or(config.expansion.pool_size),
        preference_context: a.preference_context,
    };
    let mut warnings = categorization.warnings.clone();
    let candidates = match generate_candidates(&request, stack.llm.as_ref(), &stack.templates, retry) {
        Ok(c) => c,
        Err(Error::PartialPool { produced, wanted, .. }) if !produced.is_empty() => {
            warnings.push(format!("expansion produced {} of {wanted} candidates", produced.len()));
            produced
        }
        Err(e) => return Err(e.into()),
    };
    let n = candidates.len();
    write_json(
        &a.out,
        config,
        PoolRecord {
            t0: a.t0,
            t1: a.t1,
            categorization,
            candidates,
            warnings,
        },
    )?;
    Ok(json!({"out": a.out, "candidates": n}))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub t0: String,
    pub t1: String,
    pub scored_pool: ScoredPool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Candidate pool written by `expand`.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    original_images: PathBuf,
    /// Defaults to the pool's t0.
    #[arg(long)]
    t0: Option<String>,
    /// Defaults to the pool's t1.
    #[arg(long)]
    t1: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Seed of the per-candidate scoring images.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "scored.json")]
    out: PathBuf,
}

pub fn filter(mut config: GlobalConfig, a: FilterArgs) -> Result<Value, CliError> {
    config.filter.lambda = a.lambda.unwrap_or(config.filter.lambda);
    config.filter.select_count = a.k.unwrap_or(config.filter.select_count);
    config.validate()?;
    let stack = config.build_stack()?;
    let pool: PoolRecord = read_artifact(&a.pool)?;
    let t0 = a.t0.unwrap_or(pool.t0);
    let t1 = a.t1.unwrap_or(pool.t1);
    let originals = ImageSet::from_dir(&a.original_images, t0.clone())?;
    let candidates = stack.render_candidates(pool.candidates, a.seed)?;
    let scored = select(candidates, &originals, &t0, &t1, &config.filter, &stack.embedder)?;
    let selected: Vec<&str> = scored.selected_candidates().map(|c| c.prompt.as_str()).collect();
    let summary = json!({"out": a.out, "selected": selected});
    write_json(&a.out, &config, ScoredRecord { t0, t1, scored_pool: scored })?;
    Ok(summary)
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// inversion, identity, caption-summarize or vlm-direct.
    #[arg(long, default_value = "inversion")]
    strategy: String,
    #[arg(long, default_value = "homodiv-run")]
    out: PathBuf,
}

pub fn pipeline(config: &GlobalConfig, a: PipelineArgs) -> Result<Value, CliError> {
    let kind: StrategyKind = a.strategy.parse()?;
    let stack = config.build_stack()?;
    let strategy = kind.build(&config.inversion);
    let run = stack.run(&a.prompt, strategy.as_ref(), None, a.seed)?;
    let out = &a.out;
    fs::create_dir_all(out)?;

    let original_files = copy_images(&run.original.images, &out.join("originals"))?;
    write_manifest(&out.join("images.jsonl"), &manifest_rows(&stack, &run.original)?)?;
    write_json(&out.join("originals.json"), config, json!({"record": run.original, "files": original_files}))?;
    let e = &run.expansion;
    if let Some(inv) = &e.inversion {
        write_json(&out.join("inversion.json"), config, inv)?;
    }
    write_json(
        &out.join("scored_pool.json"),
        config,
        ScoredRecord {
            t0: e.t0.clone(),
            t1: e.t1.clone(),
            scored_pool: e.scored_pool.clone(),
        },
    )?;
    let selected_files = copy_images(&e.selected_images, &out.join("selected"))?;
    let selected: Vec<Value> = e
        .scored_pool
        .selected_candidates()
        .zip(&selected_files)
        .enumerate()
        .map(|(rank, (c, file))| {
            json!({
                "rank": rank,
                "prompt": c.prompt,
                "filter_score": c.filter_score,
                "file": format!("selected/{file}"),
            })
        })
        .collect();
    let mut files = vec!["originals.json", "images.jsonl", "scored_pool.json"];
    if e.inversion.is_some() {
        files.push("inversion.json");
    }
    write_json(
        &out.join("manifest.json"),
        config,
        json!({
            "prompt": a.prompt,
            "seed": a.seed,
            "strategy": e.hdi_strategy,
            "t1": e.t1,
            "files": files,
            "selected": selected,
            "warnings": e.warnings,
        }),
    )?;
    Ok(json!({"out": out, "t1": e.t1, "selected": selected.len()}))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One prompt per line; defaults to a built-in 20-prompt list.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Images (base) or selected expansions (poet) per prompt.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample_count: Option<usize>,
}

impl EvalArgs {
    fn run_config(&self, config: &GlobalConfig, out: &Path, condition: Condition) -> Result<EvalRunConfig, CliError> {
        fs::create_dir_all(out)?;
        let prompt_source = match &self.prompts {
            Some(p) => p.clone(),
            None => {
                let p = out.join("prompts.txt");
                fs::write(&p, SAMPLE_PROMPTS)?;
                p
            }
        };
        Ok(EvalRunConfig {
            prompt_source,
            sample_count: self.sample_count.unwrap_or(config.eval.sample_count),
            n: self.n.unwrap_or(config.eval.n),
            condition,
            seed: self.seed.unwrap_or(config.eval.seed),
            checkpoint_every: config.eval.checkpoint_every,
            parallelism: config.eval.parallelism,
        })
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// base, poet_no_hdi or poet.
    #[arg(long, default_value = "poet")]
    condition: String,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ReportRecord<'a> {
    run: &'a EvalRunConfig,
    report: &'a IcadReport,
}

pub fn evaluate(config: GlobalConfig, a: EvaluateArgs) -> Result<Value, CliError> {
    let condition: Condition = a.condition.parse()?;
    if condition == Condition::Custom {
        return Err(CliError::Usage("use compare-hdi for custom strategies".into()));
    }
    let stack = config.build_stack()?;
    let run = a.eval.run_config(&config, &a.out, condition)?;
    let report = run_eval(&run, &stack, Some(&a.out))?;
    write_json(&a.out.join("report.json"), &config, ReportRecord { run: &run, report: &report })?;
    fs::write(a.out.join("report.csv"), report.to_csv()?)?;
    Ok(json!({
        "out": a.out,
        "condition": condition.as_str(),
        "aggregate": report.aggregate,
        "failures": report.failures,
        "degraded": report.degraded,
    }))
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Comma-separated strategy names.
    #[arg(long, default_value = "inversion,identity,caption-summarize,vlm-direct", value_delimiter = ',')]
    strategies: Vec<String>,
    #[arg(long, default_value = "hdi-report")]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ComparisonRecord<'a> {
    run: &'a EvalRunConfig,
    comparison: &'a HdiComparison,
}

fn comparison_csv(c: &HdiComparison) -> String {
    let mut s = String::from("strategy,aggregate,prompts,failures,failed\n");
    for r in &c.rows {
        let agg = r.aggregate.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{agg},{},{},{}\n", r.strategy, r.prompts, r.failures, r.failed));
    }
    s
}

pub fn compare_hdi(config: GlobalConfig, a: CompareArgs) -> Result<Value, CliError> {
    let strategies = a
        .strategies
        .iter()
        .map(|s| Ok(s.parse::<StrategyKind>()?.build(&config.inversion)))
        .collect::<Result<Vec<Arc<dyn HdiStrategy>>, CliError>>()?;
    if strategies.is_empty() {
        return Err(CliError::Usage("no strategies given".into()));
    }
    let stack = config.build_stack()?;
    let run = a.eval.run_config(&config, &a.out, Condition::Custom)?;
    let comparison = compare_hdi_strategies(&strategies, &run, &stack)?;
    write_json(
        &a.out.join("comparison.json"),
        &config,
        ComparisonRecord {
            run: &run,
            comparison: &comparison,
        },
    )?;
    fs::write(a.out.join("comparison.csv"), comparison_csv(&comparison))?;
    let rows: Vec<Value> = comparison
        .rows
        .iter()
        .map(|r| json!({"strategy": r.strategy, "aggregate": r.aggregate, "failed": r.failed}))
        .collect();
    Ok(json!({"out": a.out, "rows": rows}))
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
}

pub fn serve(mut config: GlobalConfig, a: ServeArgs) -> Result<Value, CliError> {
    config.service.host = a.host.unwrap_or(config.service.host);
    config.service.port = a.port.unwrap_or(config.service.port);
    config.validate()?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(homodiv_service::serve(&config))?;
    Ok(json!({"stopped": true}))
}
