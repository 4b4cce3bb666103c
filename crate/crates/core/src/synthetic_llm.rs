//! Procedural stand-in for the instruction and multimodal models.
//!
//! It answers from the task payload alone, never from the instruction text,
//! so template edits do not change its behaviour. Image tasks read the
//! embedding the mock backend stores inside each PNG and report the
//! vocabulary words closest to it. Everything is seeded, so identical
//! inputs give identical replies.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expansion::{normalize_prompt, words};
use crate::lexicon::{facet_of_word, Category, Facet};
use crate::linalg::{add_assign, dot, normalized};
use crate::llm::LlmClient;
use crate::personalization::{AVOIDED_HEADER, FOCUS_HEADER, PREFERRED_HEADER, PRESERVE_HEADER};
use crate::synthetic_image::embedded_vector;
use crate::vocab::VocabularyEmbedding;

#[derive(Debug, Clone)]
pub struct SyntheticLlm {
    vocab: Arc<VocabularyEmbedding>,
    seed: u64,
}

impl SyntheticLlm {
    pub fn new(vocab: Arc<VocabularyEmbedding>, seed: u64) -> Self {
        Self { vocab, seed }
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn image_vector(&self, image: &Value) -> Result<Option<Vec<f32>>> {
        let Some(path) = image.get("path").and_then(Value::as_str) else {
            return Ok(None);
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        embedded_vector(&bytes)
    }

    /// Facet words ranked by cosine to `v`, best first.
    fn closest_words(&self, v: &[f32], facets: &[Facet]) -> Vec<(f64, &'static str)> {
        let mut scored: Vec<(f64, &'static str)> = facets
            .iter()
            .flat_map(|f| f.words().iter().copied())
            .filter_map(|w| self.vocab.id_of(w).map(|id| (dot(v, self.vocab.row(id)), w)))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        scored
    }

    /// Best word of each facet, keeping facets whose best word clears a
    /// chance-level cosine.
    fn describe(&self, v: &[f32], facets: &[Facet], limit: usize) -> Vec<&'static str> {
        let floor = 2.5 / (self.vocab.dim() as f64).sqrt();
        let mut picked: Vec<(f64, &'static str)> = Vec::new();
        for &f in facets {
            if let Some(&(s, w)) = self.closest_words(v, &[f]).first() {
                if s > floor {
                    picked.push((s, w));
                }
            }
        }
        picked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        picked.truncate(limit);
        picked.into_iter().map(|(_, w)| w).collect()
    }

    fn categorize(&self, inputs: &Value) -> Value {
        let t1 = str_field(inputs, "t1");
        let mut groups: BTreeMap<&str, Vec<String>> =
            Category::ALL.iter().map(|c| (c.as_str(), Vec::new())).collect();
        let mut seen = HashSet::new();
        for w in words(t1) {
            if let Some(f) = facet_of_word(&w) {
                if seen.insert(w.clone()) {
                    groups.get_mut(f.category().as_str()).expect("all groups").push(w);
                }
            }
        }
        json!({ "groups": groups })
    }

    fn expand(&self, inputs: &Value) -> Value {
        let t0 = str_field(inputs, "t0");
        let t1 = str_field(inputs, "t1");
        let needed = inputs.get("needed").and_then(Value::as_u64).unwrap_or(10) as usize;
        let attempt = inputs.get("attempt").and_then(Value::as_u64).unwrap_or(0).to_string();
        let context = inputs
            .get("preference_context")
            .and_then(Value::as_str)
            .unwrap_or("");
        let prefs = ContextHints::parse(context);
        let exclude: HashSet<String> = inputs
            .get("exclude")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(normalize_prompt).collect())
            .unwrap_or_default();

        let t0_words: HashSet<String> = words(t0).into_iter().collect();
        let mentioned: BTreeSet<Facet> = t0_words.iter().filter_map(|w| facet_of_word(w)).collect();
        // recurring details the user did not ask for
        let mut homogeneous: BTreeMap<Facet, Vec<String>> = BTreeMap::new();
        for w in words(t1) {
            if t0_words.contains(&w) {
                continue;
            }
            if let Some(f) = facet_of_word(&w) {
                if !mentioned.contains(&f) {
                    homogeneous.entry(f).or_default().push(w);
                }
            }
        }
        let open: Vec<Facet> = Facet::ALL
            .into_iter()
            .filter(|f| !mentioned.contains(f) && *f != Facet::Subject)
            .collect();
        let mut targets: Vec<Facet> = homogeneous.keys().copied().collect();
        if targets.is_empty() {
            targets = open.clone();
        }
        // with fewer than three discovered facets, pad combinations with
        // other open facets so the pool does not run dry
        let secondary: Vec<Facet> = if targets.len() < 3 {
            open.iter().copied().filter(|f| !targets.contains(f)).collect()
        } else {
            Vec::new()
        };
        let focus: Vec<Facet> = prefs
            .focus
            .iter()
            .copied()
            .filter(|f| !mentioned.contains(f) && *f != Facet::Subject)
            .collect();

        let mut rng = self.rng(&["expand", t0, t1, context, &attempt]);
        let mut out = Vec::new();
        let mut produced: HashSet<String> = HashSet::new();
        let original = normalize_prompt(t0);
        let mut tries = 0;
        while out.len() < needed && tries < needed * 50 {
            tries += 1;
            let take = rng.random_range(1..=targets.len().min(3));
            let mut chosen: Vec<Facet> = targets.choose_multiple(&mut rng, take).copied().collect();
            let extra = rng.random_range(0..=(3 - take).min(secondary.len()));
            chosen.extend(secondary.choose_multiple(&mut rng, extra).copied());
            if let Some(&f) = focus.choose(&mut rng) {
                if !chosen.contains(&f) {
                    chosen.push(f);
                }
            }
            chosen.sort();
            let mut picks = Vec::new();
            for &f in &chosen {
                let avoid = homogeneous.get(&f);
                let options: Vec<&str> = f
                    .words()
                    .iter()
                    .copied()
                    .filter(|w| avoid.is_none_or(|a| !a.iter().any(|x| x == w)))
                    .filter(|w| !prefs.avoided.contains(*w))
                    .collect();
                if let Some(w) = options.choose(&mut rng) {
                    picks.push((f, *w));
                }
            }
            if picks.is_empty() {
                continue;
            }
            let prompt = compose(t0, &picks);
            let key = normalize_prompt(&prompt);
            if key == original || exclude.contains(&key) || !produced.insert(key) {
                continue;
            }
            let mut cats: Vec<&str> = picks.iter().map(|(f, _)| f.category().as_str()).collect();
            cats.sort_unstable();
            cats.dedup();
            out.push(json!({"prompt": prompt, "replaced_categories": cats}));
        }
        json!({ "candidates": out })
    }

    fn personalize_prompt(&self, inputs: &Value) -> Value {
        let t0 = str_field(inputs, "t0");
        let context = inputs
            .get("preference_context")
            .and_then(Value::as_str)
            .unwrap_or("");
        let prefs = ContextHints::parse(context);
        let t0_words: HashSet<String> = words(t0).into_iter().collect();
        let mentioned: BTreeSet<Facet> = t0_words.iter().filter_map(|w| facet_of_word(w)).collect();
        let mut used = BTreeSet::new();
        let mut picks = Vec::new();
        for w in &prefs.preferred {
            if let Some(f) = facet_of_word(w) {
                if !mentioned.contains(&f) && f != Facet::Subject && used.insert(f) && picks.len() < 3 {
                    picks.push((f, w.as_str()));
                }
            }
        }
        let prompt = if picks.is_empty() {
            t0.to_string()
        } else {
            compose(t0, &picks)
        };
        json!({ "prompt": prompt })
    }

    fn analyze_preferences(&self, inputs: &Value) -> Result<Value> {
        let mut notes = Vec::new();
        for image in inputs.get("images").and_then(Value::as_array).into_iter().flatten() {
            let Some(v) = self.image_vector(image)? else {
                continue;
            };
            let attrs = self.describe(&v, &Facet::IMPLICIT, 3);
            notes.push(json!({
                "image_id": image.get("image_id"),
                "polarity": image.get("polarity"),
                "attributes": attrs.join(", "),
            }));
        }
        Ok(json!({ "notes": notes }))
    }

    fn caption(&self, inputs: &Value) -> Result<Value> {
        let image = inputs.get("image").unwrap_or(&Value::Null);
        let caption = match self.image_vector(image)? {
            Some(v) => self.describe(&v, &Facet::ALL, 8).join(" "),
            None => String::new(),
        };
        Ok(json!({ "caption": caption }))
    }

    fn summarize(&self, inputs: &Value) -> Value {
        let captions: Vec<Vec<String>> = inputs
            .get("captions")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .map(words)
            .collect();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in &captions {
            for w in c.iter().collect::<BTreeSet<_>>() {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
        let half = captions.len().div_ceil(2).max(1);
        let mut recurring: Vec<(usize, String)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= half)
            .map(|(w, n)| (n, w))
            .collect();
        recurring.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let t1: Vec<String> = recurring.into_iter().take(8).map(|(_, w)| w).collect();
        json!({ "t1": t1.join(" ") })
    }

    fn vlm_hdi(&self, inputs: &Value) -> Result<Value> {
        let mut mean = vec![0.0f32; self.vocab.dim()];
        for image in inputs.get("images").and_then(Value::as_array).into_iter().flatten() {
            if let Some(v) = self.image_vector(image)? {
                add_assign(&mut mean, &v);
            }
        }
        let t1 = match normalized(&mean) {
            Some(v) => self.describe(&v, &Facet::ALL, 6).join(" "),
            None => String::new(),
        };
        Ok(json!({ "t1": t1 }))
    }
}

impl LlmClient for SyntheticLlm {
    fn call(&self, _instruction: &str, inputs: &Value) -> Result<Value> {
        match inputs.get("task").and_then(Value::as_str) {
            Some("categorize") => Ok(self.categorize(inputs)),
            Some("expand") => Ok(self.expand(inputs)),
            Some("personalize_prompt") => Ok(self.personalize_prompt(inputs)),
            Some("analyze_preferences") => self.analyze_preferences(inputs),
            Some("caption") => self.caption(inputs),
            Some("summarize") => Ok(self.summarize(inputs)),
            Some("vlm_hdi") => self.vlm_hdi(inputs),
            other => Err(Error::Schema(format!("unsupported task {other:?}"))),
        }
    }
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

/// Appends the picked details to `t0` as short phrases.
fn compose(t0: &str, picks: &[(Facet, &str)]) -> String {
    let mut attrs = Vec::new();
    let mut tail = Vec::new();
    for &(f, w) in picks {
        match f {
            Facet::Setting => tail.push(format!("in a {w}")),
            Facet::Time => tail.push(format!("at {w}")),
            Facet::Action => tail.push(w.to_string()),
            Facet::Relationship => tail.push(w.to_string()),
            Facet::Subject => tail.push(format!("as a {w}")),
            _ => attrs.push(w),
        }
    }
    let mut out = t0.trim().trim_end_matches('.').to_string();
    if !attrs.is_empty() {
        out.push_str(", ");
        out.push_str(&attrs.join(" "));
    }
    for t in tail {
        out.push_str(", ");
        out.push_str(&t);
    }
    out
}

/// What the synthetic model takes from a preference context block.
#[derive(Debug, Default)]
struct ContextHints {
    focus: Vec<Facet>,
    preferred: Vec<String>,
    avoided: HashSet<String>,
}

impl ContextHints {
    fn parse(context: &str) -> Self {
        let mut hints = Self::default();
        let mut section = "";
        for line in context.lines() {
            if let Some(rest) = line.strip_prefix(FOCUS_HEADER) {
                hints.focus = rest
                    .split(';')
                    .filter_map(|part| part.split_whitespace().next())
                    .filter_map(|name| Facet::ALL.into_iter().find(|f| f.as_str() == name))
                    .collect();
                section = "";
            } else if [PRESERVE_HEADER, PREFERRED_HEADER, AVOIDED_HEADER].contains(&line) {
                section = line;
            } else if let Some(item) = line.strip_prefix("- ") {
                if section == PREFERRED_HEADER {
                    hints.preferred.extend(words(item));
                } else if section == AVOIDED_HEADER {
                    hints.avoided.extend(words(item));
                }
            }
        }
        let preferred: HashSet<&String> = hints.preferred.iter().collect();
        hints.avoided.retain(|w| !preferred.contains(w));
        hints
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llm() -> SyntheticLlm {
        SyntheticLlm::new(Arc::new(VocabularyEmbedding::synthetic(64, 1)), 3)
    }

    #[test]
    fn categorize_groups_known_words() {
        let v = llm()
            .call("", &json!({"task": "categorize", "t1": "considering experienced beard apostle writing xqz"}))
            .unwrap();
        assert_eq!(v["groups"]["subjects"], json!(["apostle"]));
        assert_eq!(v["groups"]["attributes"], json!(["experienced"]));
        assert_eq!(v["groups"]["actions"], json!(["considering", "writing"]));
    }

    #[test]
    fn expand_varies_homogeneous_facets() {
        let inputs = json!({
            "task": "expand", "t0": "a portrait of a doctor", "t1": "doctor male european studio",
            "needed": 12, "attempt": 0, "exclude": [],
        });
        let a = llm().call("", &inputs).unwrap();
        let b = llm().call("", &inputs).unwrap();
        assert_eq!(a, b);
        let list = a["candidates"].as_array().unwrap();
        assert_eq!(list.len(), 12);
        for c in list {
            let p = c["prompt"].as_str().unwrap();
            assert!(p.starts_with("a portrait of a doctor, "));
            let ws = words(p);
            for planted in ["male", "european", "studio"] {
                assert!(!ws.iter().any(|w| w == planted), "{p}");
            }
            assert!(!c["replaced_categories"].as_array().unwrap().is_empty());
        }
    }

    #[test]
    fn context_hints_parsed() {
        let ctx = format!(
            "User preference profile:\n{FOCUS_HEADER} age (attributes); setting (contextual_settings)\n{PREFERRED_HEADER}\n- young, forest\n{AVOIDED_HEADER}\n- dramatic\n"
        );
        let h = ContextHints::parse(&ctx);
        assert_eq!(h.focus, [Facet::Age, Facet::Setting]);
        assert_eq!(h.preferred, ["young", "forest"]);
        assert!(h.avoided.contains("dramatic"));
        let p = llm()
            .call("", &json!({"task": "personalize_prompt", "t0": "a chef", "preference_context": ctx}))
            .unwrap();
        assert_eq!(p["prompt"], "a chef, young, in a forest");
    }

    #[test]
    fn unknown_task_is_schema_error() {
        assert!(matches!(llm().call("", &json!({"task": "x"})), Err(Error::Schema(_))));
    }
}
