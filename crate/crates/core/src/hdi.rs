//! Strategies that turn an image set and its prompt into a description of
//! the details the images share (t₁).

use std::fmt::Debug;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedding::{ImageHandle, ImageSet};
use crate::error::{Error, Result};
use crate::inversion::{run_inversion, InversionConfig, InversionResult};
use crate::llm::{call_with_retry, LlmClient, RetryPolicy};
use crate::scorer::Embedder;
use crate::templates::{TemplateKind, TemplateSet};

/// Everything a strategy may use besides its own settings.
#[derive(Clone, Copy)]
pub struct HdiContext<'a> {
    pub embedder: &'a Embedder,
    pub llm: &'a dyn LlmClient,
    pub templates: &'a TemplateSet,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdiOutcome {
    pub t1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<InversionResult>,
}

pub trait HdiStrategy: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn identify(&self, t0: &str, images: &ImageSet, ctx: &HdiContext<'_>) -> Result<HdiOutcome>;
}

/// Prompt inversion against the image set.
#[derive(Debug, Clone)]
pub struct InversionHdi {
    pub config: InversionConfig,
}

impl HdiStrategy for InversionHdi {
    fn name(&self) -> &str {
        "inversion"
    }

    fn identify(&self, t0: &str, images: &ImageSet, ctx: &HdiContext<'_>) -> Result<HdiOutcome> {
        let result = run_inversion(ctx.embedder, images, t0, &self.config)?;
        Ok(HdiOutcome {
            t1: result.inverted_prompt.clone(),
            inversion: Some(result),
        })
    }
}

/// `t₁ = t₀`: no dimension discovery at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHdi;

impl HdiStrategy for IdentityHdi {
    fn name(&self) -> &str {
        "identity"
    }

    fn identify(&self, t0: &str, _images: &ImageSet, _ctx: &HdiContext<'_>) -> Result<HdiOutcome> {
        Ok(HdiOutcome {
            t1: t0.to_string(),
            inversion: None,
        })
    }
}

/// Captions every image, then asks for the details common to the captions.
#[derive(Debug, Clone, Copy, Default)]
pub struct CaptionSummarizeHdi;

impl HdiStrategy for CaptionSummarizeHdi {
    fn name(&self) -> &str {
        "caption-summarize"
    }

    fn identify(&self, t0: &str, images: &ImageSet, ctx: &HdiContext<'_>) -> Result<HdiOutcome> {
        let instruction = ctx.templates.render(TemplateKind::Caption, &[])?;
        let mut captions = Vec::with_capacity(images.len());
        for img in &images.images {
            let payload = json!({"task": "caption", "image": image_json(img)});
            let reply = call_with_retry(ctx.llm, &instruction, &payload, ctx.retry)?;
            captions.push(string_field(&reply.value, "caption")?);
        }
        let instruction = ctx.templates.render(TemplateKind::Summarize, &[("t0", t0)])?;
        let payload = json!({"task": "summarize", "t0": t0, "captions": captions});
        let reply = call_with_retry(ctx.llm, &instruction, &payload, ctx.retry)?;
        Ok(HdiOutcome {
            t1: string_field(&reply.value, "t1")?,
            inversion: None,
        })
    }
}

/// One multi-image request to a vision-language model.
#[derive(Debug, Clone, Copy, Default)]
pub struct VlmDirectHdi;

impl HdiStrategy for VlmDirectHdi {
    fn name(&self) -> &str {
        "vlm-direct"
    }

    fn identify(&self, t0: &str, images: &ImageSet, ctx: &HdiContext<'_>) -> Result<HdiOutcome> {
        let instruction = ctx.templates.render(TemplateKind::VlmHdi, &[("t0", t0)])?;
        let list: Vec<Value> = images.images.iter().map(image_json).collect();
        let payload = json!({"task": "vlm_hdi", "t0": t0, "images": list});
        let reply = call_with_retry(ctx.llm, &instruction, &payload, ctx.retry)?;
        Ok(HdiOutcome {
            t1: string_field(&reply.value, "t1")?,
            inversion: None,
        })
    }
}

fn image_json(img: &ImageHandle) -> Value {
    json!({"image_id": img.content_hash, "path": img.path.to_string_lossy()})
}

fn string_field(v: &Value, key: &str) -> Result<String> {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Schema(format!("reply has no `{key}` string")))
}

/// Strategy names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Inversion,
    Identity,
    CaptionSummarize,
    VlmDirect,
}

impl StrategyKind {
    pub fn build(self, inversion: &InversionConfig) -> Arc<dyn HdiStrategy> {
        match self {
            StrategyKind::Inversion => Arc::new(InversionHdi {
                config: inversion.clone(),
            }),
            StrategyKind::Identity => Arc::new(IdentityHdi),
            StrategyKind::CaptionSummarize => Arc::new(CaptionSummarizeHdi),
            StrategyKind::VlmDirect => Arc::new(VlmDirectHdi),
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inversion" => Ok(StrategyKind::Inversion),
            "identity" => Ok(StrategyKind::Identity),
            "caption-summarize" => Ok(StrategyKind::CaptionSummarize),
            "vlm-direct" => Ok(StrategyKind::VlmDirect),
            other => Err(Error::InvalidInput(format!(
                "unknown strategy `{other}` (expected inversion, identity, caption-summarize or vlm-direct)"
            ))),
        }
    }
}
