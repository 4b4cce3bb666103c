//! Per-user preference profiles built from round feedback, compiled into a
//! text block that conditions later expansions. Nothing here touches model
//! weights: the only outputs are profile records and context text.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::expansion::words;
use crate::lexicon::{facet_of_keyword, Facet};
use crate::llm::{call_with_retry, LlmClient, RetryPolicy};
use crate::templates::{TemplateKind, TemplateSet};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CONTEXT_BUDGET: usize = 512;
/// Re-prompts allowed after the initial prompt.
pub const MAX_REPROMPTS: usize = 5;

pub const FOCUS_HEADER: &str = "Focus on these dimensions:";
pub const PRESERVE_HEADER: &str = "Preserve revisions that raised satisfaction:";
pub const PREFERRED_HEADER: &str = "Preferred image attributes:";
pub const AVOIDED_HEADER: &str = "Avoided image attributes:";

/// Round satisfaction on the 7-point scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Satisfaction(u8);

impl Satisfaction {
    pub fn get(self) -> u8 {
        self.0
    }

    /// "Satisfied" or "Very Satisfied".
    pub fn is_satisfied(self) -> bool {
        self.0 >= 6
    }
}

impl TryFrom<u8> for Satisfaction {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        if (1..=7).contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::InvalidInput(format!("satisfaction must be in 1..=7, got {v}")))
        }
    }
}

impl From<Satisfaction> for u8 {
    fn from(s: Satisfaction) -> u8 {
        s.0
    }
}

/// Final rating on the continuous 1 to 10 scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FinalScore(f64);

impl FinalScore {
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for FinalScore {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        if (1.0..=10.0).contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::InvalidInput(format!("final satisfaction must be in [1, 10], got {v}")))
        }
    }
}

impl From<FinalScore> for f64 {
    fn from(s: FinalScore) -> f64 {
        s.0
    }
}

/// Whether a session stops after feedback on `round_index`.
pub fn should_stop(satisfaction: Satisfaction, round_index: usize) -> bool {
    satisfaction.is_satisfied() || round_index >= MAX_REPROMPTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundFeedback {
    pub round_index: usize,
    pub prompt: String,
    pub satisfaction: Satisfaction,
    pub most_preferred: String,
    pub least_preferred: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRevision {
    pub round_index: usize,
    pub from_prompt: String,
    pub to_prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Preferred,
    Avoided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePatternNote {
    pub image_id: String,
    pub polarity: Polarity,
    pub attributes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub favorite_image: String,
    pub final_satisfaction: FinalScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    pub schema_version: u32,
    pub user_id: String,
    pub history: Vec<RoundFeedback>,
    pub prompt_revisions: Vec<PromptRevision>,
    pub image_pattern_notes: Vec<ImagePatternNote>,
    /// Number of `history` entries already sent for image analysis.
    pub analyzed_rounds: usize,
    #[serde(default)]
    pub compiled_context: Option<String>,
}

impl PreferenceProfile {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            schema_version: PROFILE_SCHEMA_VERSION,
            user_id: user_id.into(),
            history: Vec::new(),
            prompt_revisions: Vec::new(),
            image_pattern_notes: Vec::new(),
            analyzed_rounds: 0,
            compiled_context: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_slice(&bytes)?;
        if p.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "profile schema version {} is not supported",
                p.schema_version
            )));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::cache::atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Appends validated feedback. `inventory` holds every image id generated
    /// in the session so far, so picks may come from any earlier round.
    pub fn record_feedback(&mut self, feedback: RoundFeedback, inventory: &HashSet<String>) -> Result<()> {
        if feedback.most_preferred == feedback.least_preferred {
            return Err(Error::InvalidInput(
                "most and least preferred image must differ".into(),
            ));
        }
        for id in [&feedback.most_preferred, &feedback.least_preferred] {
            if !inventory.contains(id) {
                return Err(Error::InvalidInput(format!("unknown image id {id}")));
            }
        }
        if let Some(last) = self.history.last() {
            if feedback.round_index <= last.round_index {
                return Err(Error::InvalidInput(format!(
                    "feedback for round {} already recorded",
                    feedback.round_index
                )));
            }
            if normalized(&last.prompt) != normalized(&feedback.prompt) {
                self.prompt_revisions.push(PromptRevision {
                    round_index: feedback.round_index,
                    from_prompt: last.prompt.clone(),
                    to_prompt: feedback.prompt.clone(),
                });
            }
        }
        self.history.push(feedback);
        self.compiled_context = None;
        Ok(())
    }

    /// Context block for the current profile, compiled once and reused
    /// until the next mutation.
    pub fn context(&mut self, budget_tokens: usize) -> &str {
        if self.compiled_context.is_none() {
            self.compiled_context = Some(build_context(self, budget_tokens));
        }
        self.compiled_context.as_deref().unwrap_or_default()
    }

    fn satisfaction_at(&self, round_index: usize) -> Option<u8> {
        self.history
            .iter()
            .find(|f| f.round_index == round_index)
            .map(|f| f.satisfaction.get())
    }
}

fn normalized(s: &str) -> String {
    words(s).join(" ")
}

/// Image id and file location handed to the multimodal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub path: String,
}

/// Sends the most and least preferred images of feedback rounds not yet
/// analyzed to `llm` and stores one note per image. Returns warnings for
/// dropped notes. A profile with nothing new is left untouched.
pub fn analyze_image_preferences(
    profile: &mut PreferenceProfile,
    locate: &dyn Fn(&str) -> Option<String>,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    policy: RetryPolicy,
) -> Result<Vec<String>> {
    if profile.history.is_empty() {
        return Err(Error::InvalidState("profile has no feedback yet".into()));
    }
    if profile.analyzed_rounds >= profile.history.len() {
        return Ok(Vec::new());
    }
    let mut requested: Vec<(String, Polarity)> = Vec::new();
    for fb in &profile.history[profile.analyzed_rounds..] {
        for (id, polarity) in [
            (&fb.most_preferred, Polarity::Preferred),
            (&fb.least_preferred, Polarity::Avoided),
        ] {
            let noted = profile
                .image_pattern_notes
                .iter()
                .any(|n| n.image_id == *id && n.polarity == polarity);
            if !noted && !requested.iter().any(|(r, p)| r == id && *p == polarity) {
                requested.push((id.clone(), polarity));
            }
        }
    }
    let mut warnings = Vec::new();
    if !requested.is_empty() {
        let images: Vec<Value> = requested
            .iter()
            .map(|(id, polarity)| {
                json!({"image_id": id, "polarity": polarity, "path": locate(id)})
            })
            .collect();
        let instruction = templates.render(TemplateKind::AnalyzePreferences, &[])?;
        let payload = json!({"task": "analyze_preferences", "images": images});
        let reply = call_with_retry(llm, &instruction, &payload, policy)?;
        let notes = reply
            .value
            .get("notes")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Schema("preference analysis has no `notes` list".into()))?;
        for note in notes {
            let parsed: std::result::Result<ImagePatternNote, _> = serde_json::from_value(note.clone());
            match parsed {
                Ok(n) if requested.iter().any(|(id, p)| *id == n.image_id && *p == n.polarity) => {
                    profile.image_pattern_notes.push(n);
                }
                Ok(n) => warnings.push(format!(
                    "dropped note for image {} ({:?}): not among the fed-back images",
                    n.image_id, n.polarity
                )),
                Err(e) => warnings.push(format!("dropped malformed note: {e}")),
            }
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    profile.analyzed_rounds = profile.history.len();
    profile.compiled_context = None;
    Ok(warnings)
}

#[derive(Debug)]
struct Entry {
    section: usize,
    signal: f64,
    age: usize,
    text: String,
}

/// Rewrites `t0` toward the preferences in `context` without expansion.
/// An empty context returns `t0` unchanged and makes no call.
pub fn personalize_prompt(
    t0: &str,
    context: &str,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    policy: RetryPolicy,
) -> Result<String> {
    if context.trim().is_empty() {
        return Ok(t0.to_string());
    }
    let instruction = templates.render(
        TemplateKind::PersonalizePrompt,
        &[("preference_context", context), ("t0", t0)],
    )?;
    let payload = json!({"task": "personalize_prompt", "t0": t0, "preference_context": context});
    let reply = call_with_retry(llm, &instruction, &payload, policy)?;
    match reply.value.get("prompt").and_then(Value::as_str).map(str::trim) {
        Some(p) if !p.is_empty() => Ok(p.to_string()),
        _ => Err(Error::Schema("reply has no `prompt` string".into())),
    }
}

/// Renders the profile into a context block of at most `budget_tokens`
/// whitespace-separated tokens. Pure: identical profiles give identical
/// bytes. When over budget, the weakest entries go first and, among equally
/// weak ones, the oldest.
pub fn build_context(profile: &PreferenceProfile, budget_tokens: usize) -> String {
    let mut entries = Vec::new();

    let mut focus: BTreeMap<Facet, (usize, usize)> = BTreeMap::new();
    let mut bump = |facet: Facet, age: usize| {
        let e = focus.entry(facet).or_insert((0, 0));
        e.0 += 1;
        e.1 = e.1.max(age);
    };
    for (i, r) in profile.prompt_revisions.iter().enumerate() {
        for facet in added_facets(r) {
            bump(facet, i);
        }
    }
    let base = profile.prompt_revisions.len();
    for (i, n) in profile.image_pattern_notes.iter().enumerate() {
        let facets: BTreeSet<Facet> = words(&n.attributes).iter().filter_map(|w| facet_of_keyword(w)).collect();
        for f in facets {
            bump(f, base + i);
        }
    }
    let mut ranked: Vec<_> = focus.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.0.cmp(&b.0)));
    for (facet, (count, age)) in ranked {
        entries.push(Entry {
            section: 0,
            signal: count as f64,
            age,
            text: format!("{} ({})", facet, facet.category()),
        });
    }

    for (i, r) in profile.prompt_revisions.iter().enumerate() {
        let before = profile
            .history
            .iter()
            .rev()
            .find(|f| f.round_index < r.round_index)
            .map(|f| f.satisfaction.get());
        let after = profile.satisfaction_at(r.round_index);
        if let (Some(b), Some(a)) = (before, after) {
            if a > b {
                let facets: Vec<String> = added_facets(r).iter().map(|f| f.to_string()).collect();
                let added = added_words(r).join(" ");
                let mut text = format!("- added \"{added}\"");
                if !facets.is_empty() {
                    let _ = write!(text, " ({})", facets.join(", "));
                }
                let _ = write!(
                    text,
                    " revising \"{}\" to \"{}\" (satisfaction {b} to {a})",
                    r.from_prompt, r.to_prompt
                );
                entries.push(Entry {
                    section: 1,
                    signal: f64::from(a - b),
                    age: i,
                    text,
                });
            }
        }
    }

    for (i, n) in profile.image_pattern_notes.iter().enumerate() {
        entries.push(Entry {
            section: if n.polarity == Polarity::Preferred { 2 } else { 3 },
            signal: 1.0,
            age: i,
            text: format!("- {}", n.attributes.trim()),
        });
    }

    loop {
        let rendered = render(&entries);
        if rendered.split_whitespace().count() <= budget_tokens || entries.is_empty() {
            return rendered;
        }
        let weakest = entries
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.signal
                    .partial_cmp(&b.signal)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.age.cmp(&b.age))
            })
            .map(|(i, _)| i)
            .expect("entries is non-empty");
        entries.remove(weakest);
    }
}

fn render(entries: &[Entry]) -> String {
    if entries.is_empty() {
        return String::new();
    }
    let mut out = String::from("User preference profile:\n");
    let focus: Vec<&str> = entries
        .iter()
        .filter(|e| e.section == 0)
        .map(|e| e.text.as_str())
        .collect();
    if !focus.is_empty() {
        let _ = writeln!(out, "{FOCUS_HEADER} {}", focus.join("; "));
    }
    for (section, header) in [(1, PRESERVE_HEADER), (2, PREFERRED_HEADER), (3, AVOIDED_HEADER)] {
        let lines: Vec<&str> = entries
            .iter()
            .filter(|e| e.section == section)
            .map(|e| e.text.as_str())
            .collect();
        if !lines.is_empty() {
            let _ = writeln!(out, "{header}");
            for l in lines {
                let _ = writeln!(out, "{l}");
            }
        }
    }
    out
}

fn added_words(r: &PromptRevision) -> Vec<String> {
    let before: HashSet<String> = words(&r.from_prompt).into_iter().collect();
    let mut seen = HashSet::new();
    words(&r.to_prompt)
        .into_iter()
        .filter(|w| !before.contains(w) && seen.insert(w.clone()))
        .collect()
}

fn added_facets(r: &PromptRevision) -> BTreeSet<Facet> {
    added_words(r).iter().filter_map(|w| facet_of_keyword(w)).collect()
}
