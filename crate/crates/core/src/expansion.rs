//! Categorizes discovered homogeneous dimensions and asks an instruction
//! model for candidate prompts that vary them.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedding::ImageHandle;
use crate::error::{Error, Result};
use crate::lexicon::Category;
use crate::llm::{call_with_retry, LlmClient, RetryPolicy};
use crate::templates::{TemplateKind, TemplateSet};

/// Phrases from t₁ sorted into the five semantic groups. All five keys are
/// always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionCategorization {
    pub groups: BTreeMap<Category, Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Default for DimensionCategorization {
    fn default() -> Self {
        Self {
            groups: Category::ALL.into_iter().map(|c| (c, Vec::new())).collect(),
            warnings: Vec::new(),
        }
    }
}

impl DimensionCategorization {
    pub fn is_empty(&self) -> bool {
        self.groups.values().all(Vec::is_empty)
    }

    /// Categories with at least one phrase. Candidates must replace
    /// something from one of these.
    pub fn homogeneous(&self) -> Vec<Category> {
        self.groups
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn phrases(&self, category: Category) -> &[String] {
        self.groups.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    fn groups_json(&self) -> Value {
        json!(self
            .groups
            .iter()
            .map(|(c, v)| (c.as_str().to_string(), json!(v)))
            .collect::<serde_json::Map<_, _>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRequest {
    pub t0: String,
    pub t1: String,
    pub categorization: DimensionCategorization,
    pub pool_size: usize,
    #[serde(default)]
    pub preference_context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCandidate {
    pub prompt: String,
    pub replaced_categories: Vec<Category>,
    #[serde(default)]
    pub image: Option<ImageHandle>,
    #[serde(default)]
    pub div_score: Option<f64>,
    #[serde(default)]
    pub sim_score: Option<f64>,
    #[serde(default)]
    pub filter_score: Option<f64>,
}

impl ExpansionCandidate {
    pub fn new(prompt: impl Into<String>, replaced_categories: Vec<Category>) -> Self {
        Self {
            prompt: prompt.into(),
            replaced_categories,
            image: None,
            div_score: None,
            sim_score: None,
            filter_score: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    pub pool_size: usize,
    pub retry: RetryPolicy,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            pool_size: 30,
            retry: RetryPolicy::default(),
        }
    }
}

/// Lower-cased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Comparison key for duplicate detection: case-folded words joined by a
/// single space, so spacing and punctuation differences do not count.
pub fn normalize_prompt(text: &str) -> String {
    words(text).join(" ")
}

pub fn categorize_instruction(templates: &TemplateSet, t1: &str) -> Result<String> {
    templates.render(TemplateKind::Categorize, &[("t1", t1)])
}

pub fn expand_instruction(templates: &TemplateSet, req: &ExpansionRequest) -> Result<String> {
    let groups = serde_json::to_string(&req.categorization.groups_json())?;
    let k = req.pool_size.to_string();
    templates.render(
        TemplateKind::Expand,
        &[
            ("preference_context", req.preference_context.as_deref().unwrap_or("")),
            ("t0", &req.t0),
            ("t1", &req.t1),
            ("categorization", &groups),
            ("K", &k),
        ],
    )
}

/// Asks the model to group t₁ into the semantic categories. Phrases that
/// do not occur in t₁ are dropped with a warning; malformed replies are
/// retried `policy.max_format_retries` times.
pub fn categorize_dimensions(
    t1: &str,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    policy: RetryPolicy,
) -> Result<DimensionCategorization> {
    if t1.trim().is_empty() {
        return Err(Error::InvalidInput("t1 is empty".into()));
    }
    let instruction = categorize_instruction(templates, t1)?;
    let attempts = policy.max_format_retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        let payload = json!({"task": "categorize", "t1": t1, "attempt": attempt});
        let reply = call_with_retry(llm, &instruction, &payload, policy)?;
        match parse_categorization(&reply.value, t1) {
            Ok(c) => return Ok(c),
            Err(detail) => {
                tracing::warn!(attempt, %detail, "categorization reply rejected");
                last = detail;
            }
        }
    }
    Err(Error::ExpansionFormat {
        attempts,
        detail: last,
    })
}

fn parse_categorization(value: &Value, t1: &str) -> std::result::Result<DimensionCategorization, String> {
    let groups = value
        .get("groups")
        .and_then(Value::as_object)
        .ok_or("reply has no `groups` object")?;
    let t1_words: HashSet<String> = words(t1).into_iter().collect();
    let mut out = DimensionCategorization::default();
    let mut seen = HashSet::new();
    for (key, phrases) in groups {
        let category: Category = key.parse()?;
        let phrases = phrases
            .as_array()
            .ok_or_else(|| format!("group `{key}` is not a list"))?;
        for p in phrases {
            let p = p
                .as_str()
                .ok_or_else(|| format!("group `{key}` has a non-string entry"))?;
            let ws = words(p);
            if ws.is_empty() || !ws.iter().all(|w| t1_words.contains(w)) {
                out.warnings
                    .push(format!("dropped `{p}` from {category}: not present in t1"));
                continue;
            }
            let phrase = ws.join(" ");
            if seen.insert(phrase.clone()) {
                out.groups.entry(category).or_default().push(phrase);
            }
        }
    }
    Ok(out)
}

/// Requests `req.pool_size` candidates. Duplicates, echoes of t₀ and
/// candidates naming no replaced category are discarded and regenerated
/// while the model keeps producing new candidates.
pub fn generate_candidates(
    req: &ExpansionRequest,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    policy: RetryPolicy,
) -> Result<Vec<ExpansionCandidate>> {
    if req.categorization.is_empty() {
        return Err(Error::InvalidInput("categorization has no phrases".into()));
    }
    if req.pool_size == 0 {
        return Err(Error::InvalidInput("pool size must be positive".into()));
    }
    let instruction = expand_instruction(templates, req)?;
    let original = normalize_prompt(&req.t0);
    let mut seen = HashSet::new();
    let mut accepted: Vec<ExpansionCandidate> = Vec::new();
    let (mut duplicates, mut same_as_original, mut no_category) = (0, 0, 0);
    let mut format_failures = 0;
    let mut attempt = 0;
    let mut last_error = String::new();

    while accepted.len() < req.pool_size {
        let payload = json!({
            "task": "expand",
            "t0": req.t0,
            "t1": req.t1,
            "categorization": req.categorization.groups_json(),
            "k": req.pool_size,
            "needed": req.pool_size - accepted.len(),
            "preference_context": req.preference_context,
            "exclude": accepted.iter().map(|c| c.prompt.as_str()).collect::<Vec<_>>(),
            "attempt": attempt,
        });
        attempt += 1;
        let reply = call_with_retry(llm, &instruction, &payload, policy)?;
        let items = match parse_candidates(&reply.value) {
            Ok(items) => items,
            Err(detail) => {
                format_failures += 1;
                tracing::warn!(format_failures, %detail, "expansion reply rejected");
                last_error = detail;
                if format_failures > policy.max_format_retries {
                    if accepted.is_empty() {
                        return Err(Error::ExpansionFormat {
                            attempts: format_failures,
                            detail: last_error,
                        });
                    }
                    break;
                }
                continue;
            }
        };
        let before = accepted.len();
        for (prompt, categories) in items {
            if accepted.len() == req.pool_size {
                break;
            }
            let key = normalize_prompt(&prompt);
            if key.is_empty() {
                no_category += 1;
                continue;
            }
            if !seen.insert(key.clone()) {
                duplicates += 1;
            } else if key == original {
                same_as_original += 1;
            } else if categories.is_empty() {
                no_category += 1;
            } else {
                accepted.push(ExpansionCandidate::new(prompt.trim(), categories));
            }
        }
        if accepted.len() == before {
            // no progress: another identical request will not help
            break;
        }
    }

    if accepted.len() < req.pool_size {
        if !last_error.is_empty() {
            tracing::debug!(%last_error, "pool incomplete after malformed replies");
        }
        return Err(Error::PartialPool {
            wanted: req.pool_size,
            produced: accepted,
            rejected_duplicates: duplicates,
            rejected_same_as_original: same_as_original,
            rejected_no_category: no_category,
        });
    }
    Ok(accepted)
}

fn parse_candidates(value: &Value) -> std::result::Result<Vec<(String, Vec<Category>)>, String> {
    let list = value
        .get("candidates")
        .and_then(Value::as_array)
        .ok_or("reply has no `candidates` list")?;
    let mut out = Vec::with_capacity(list.len());
    for item in list {
        let prompt = item
            .get("prompt")
            .and_then(Value::as_str)
            .ok_or("candidate without a `prompt` string")?;
        let mut categories: Vec<Category> = item
            .get("replaced_categories")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(Value::as_str)
                    .filter_map(|s| s.parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        categories.sort();
        categories.dedup();
        out.push((prompt.to_string(), categories));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedLlm;

    const T1: &str = "considering experienced beard apostle writing";

    fn categorization(subjects: &[&str]) -> DimensionCategorization {
        let mut c = DimensionCategorization::default();
        c.groups.insert(
            Category::Subjects,
            subjects.iter().map(|s| s.to_string()).collect(),
        );
        c
    }

    #[test]
    fn categorize_keeps_phrases_from_t1() {
        let templates = TemplateSet::builtin();
        let llm = ScriptedLlm::new();
        llm.insert(
            &categorize_instruction(&templates, T1).unwrap(),
            json!({"groups": {
                "subjects": ["apostle"],
                "attributes": ["experienced", "Beard"],
                "contextual_settings": [],
                "actions": ["writing", "considering"],
                "relationships": [],
            }}),
        );
        let c = categorize_dimensions(T1, &llm, &templates, RetryPolicy::default()).unwrap();
        assert_eq!(c.phrases(Category::Subjects), ["apostle"]);
        assert_eq!(c.phrases(Category::Attributes), ["experienced", "beard"]);
        assert!(c.phrases(Category::Actions).contains(&"writing".to_string()));
        assert!(c.warnings.is_empty());
        assert_eq!(c.groups.len(), 5);
    }

    #[test]
    fn phrase_absent_from_t1_is_dropped() {
        let templates = TemplateSet::builtin();
        let llm = ScriptedLlm::new();
        llm.insert(
            &categorize_instruction(&templates, T1).unwrap(),
            json!({"groups": {"subjects": ["apostle", "painter"]}}),
        );
        let c = categorize_dimensions(T1, &llm, &templates, RetryPolicy::default()).unwrap();
        assert_eq!(c.phrases(Category::Subjects), ["apostle"]);
        assert_eq!(c.warnings.len(), 1);
        assert!(c.warnings[0].contains("painter"));
    }

    #[test]
    fn empty_t1_rejected() {
        let llm = ScriptedLlm::new();
        let err = categorize_dimensions("  ", &llm, &TemplateSet::builtin(), RetryPolicy::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn malformed_categorization_surfaces_format_error() {
        let templates = TemplateSet::builtin();
        let llm = ScriptedLlm::new();
        llm.insert(
            &categorize_instruction(&templates, T1).unwrap(),
            json!({"groups": {"colours": ["beard"]}}),
        );
        let err = categorize_dimensions(T1, &llm, &templates, RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, Error::ExpansionFormat { attempts: 3, .. }));
        assert_eq!(llm.calls().len(), 3);
    }

    #[test]
    fn echoing_t0_gives_partial_pool() {
        let templates = TemplateSet::builtin();
        let req = ExpansionRequest {
            t0: "an ancient artist".into(),
            t1: T1.into(),
            categorization: categorization(&["apostle"]),
            pool_size: 5,
            preference_context: None,
        };
        let llm = ScriptedLlm::new();
        let echo: Vec<Value> = (0..5)
            .map(|_| json!({"prompt": "an ancient artist", "replaced_categories": ["subjects"]}))
            .collect();
        llm.insert(&expand_instruction(&templates, &req).unwrap(), json!({"candidates": echo}));
        match generate_candidates(&req, &llm, &templates, RetryPolicy::default()) {
            Err(Error::PartialPool {
                wanted,
                produced,
                rejected_duplicates,
                rejected_same_as_original,
                ..
            }) => {
                assert_eq!(wanted, 5);
                assert!(produced.is_empty());
                assert_eq!(rejected_duplicates, 4);
                assert_eq!(rejected_same_as_original, 1);
            }
            other => panic!("expected partial pool, got {other:?}"),
        }
    }

    #[test]
    fn duplicates_are_regenerated() {
        let templates = TemplateSet::builtin();
        let req = ExpansionRequest {
            t0: "an ancient artist".into(),
            t1: T1.into(),
            categorization: categorization(&["apostle"]),
            pool_size: 3,
            preference_context: Some("Focus on: age".into()),
        };
        let instruction = expand_instruction(&templates, &req).unwrap();
        assert!(instruction.starts_with("Focus on: age"));
        let llm = ScriptedLlm::new();
        let c = |p: &str| json!({"prompt": p, "replaced_categories": ["subjects"]});
        llm.insert_sequence(
            &instruction,
            vec![
                crate::llm::FixtureReply::Payload(json!({"candidates": [
                    c("a young male sculptor"), c("A young  male sculptor."), c("an elderly Asian female")
                ]})),
                crate::llm::FixtureReply::Payload(json!({"candidates": [
                    c("an elderly asian female"), c("a young Egyptian woman")
                ]})),
            ],
        );
        let pool = generate_candidates(&req, &llm, &templates, RetryPolicy::default()).unwrap();
        let prompts: Vec<_> = pool.iter().map(|c| c.prompt.as_str()).collect();
        assert_eq!(
            prompts,
            ["a young male sculptor", "an elderly Asian female", "a young Egyptian woman"]
        );
        let calls = llm.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[1].1["needed"], 1);
    }

    #[test]
    fn candidate_without_category_is_rejected() {
        let templates = TemplateSet::builtin();
        let req = ExpansionRequest {
            t0: "a dog".into(),
            t1: "beard".into(),
            categorization: categorization(&["beard"]),
            pool_size: 1,
            preference_context: None,
        };
        let llm = ScriptedLlm::new();
        llm.insert(
            &expand_instruction(&templates, &req).unwrap(),
            json!({"candidates": [{"prompt": "a cat", "replaced_categories": ["colours"]}]}),
        );
        let err = generate_candidates(&req, &llm, &templates, RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, Error::PartialPool { rejected_no_category: 1, .. }));
    }
}
