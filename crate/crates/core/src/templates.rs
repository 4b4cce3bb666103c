//! Versioned instruction templates with named placeholders.
//!
//! Placeholders are `{t0}`, `{t1}`, `{categorization}`,
//! `{preference_context}` and `{K}`. Other braces (JSON examples) pass
//! through untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TEMPLATE_VERSION: &str = "v1";

pub const PLACEHOLDERS: [&str; 5] = ["t0", "t1", "categorization", "preference_context", "K"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateKind {
    Categorize,
    Expand,
    AnalyzePreferences,
    PersonalizePrompt,
    Caption,
    Summarize,
    VlmHdi,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 7] = [
        TemplateKind::Categorize,
        TemplateKind::Expand,
        TemplateKind::AnalyzePreferences,
        TemplateKind::PersonalizePrompt,
        TemplateKind::Caption,
        TemplateKind::Summarize,
        TemplateKind::VlmHdi,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Categorize => "categorize.txt",
            TemplateKind::Expand => "expand.txt",
            TemplateKind::AnalyzePreferences => "analyze_preferences.txt",
            TemplateKind::PersonalizePrompt => "personalize_prompt.txt",
            TemplateKind::Caption => "caption.txt",
            TemplateKind::Summarize => "summarize.txt",
            TemplateKind::VlmHdi => "vlm_hdi.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateKind::Categorize => include_str!("../assets/templates/categorize.txt"),
            TemplateKind::Expand => include_str!("../assets/templates/expand.txt"),
            TemplateKind::AnalyzePreferences => {
                include_str!("../assets/templates/analyze_preferences.txt")
            }
            TemplateKind::PersonalizePrompt => {
                include_str!("../assets/templates/personalize_prompt.txt")
            }
            TemplateKind::Caption => include_str!("../assets/templates/caption.txt"),
            TemplateKind::Summarize => include_str!("../assets/templates/summarize.txt"),
            TemplateKind::VlmHdi => include_str!("../assets/templates/vlm_hdi.txt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    version: String,
    texts: BTreeMap<TemplateKind, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            texts: TemplateKind::ALL
                .into_iter()
                .map(|k| (k, k.builtin().to_string()))
                .collect(),
        }
    }

    /// Built-in set with any same-named files in `dir` taking precedence.
    pub fn with_overrides(dir: &Path, version: impl Into<String>) -> Result<Self> {
        let mut set = Self::builtin();
        set.version = version.into();
        for k in TemplateKind::ALL {
            let p = dir.join(k.file_name());
            if p.exists() {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                set.texts.insert(k, text);
            }
        }
        Ok(set)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn render(&self, kind: TemplateKind, vars: &[(&str, &str)]) -> Result<String> {
        let text = &self.texts[&kind];
        let mut out = text.clone();
        for name in PLACEHOLDERS {
            let ph = format!("{{{name}}}");
            if !out.contains(&ph) {
                continue;
            }
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "template {} needs a value for {{{name}}}",
                        kind.file_name()
                    ))
                })?;
            out = out.replace(&ph, value);
        }
        Ok(out.trim_start().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_placeholders_and_keeps_json_braces() {
        let set = TemplateSet::builtin();
        let text = set
            .render(TemplateKind::Categorize, &[("t1", "old bearded man")])
            .unwrap();
        assert!(text.contains("Concept list: old bearded man"));
        assert!(text.contains(r#"{"groups": {"subjects""#));
    }

    #[test]
    fn missing_value_is_an_error() {
        let set = TemplateSet::builtin();
        assert!(set.render(TemplateKind::Expand, &[("t0", "x")]).is_err());
    }

    #[test]
    fn empty_context_leaves_no_leading_blank() {
        let set = TemplateSet::builtin();
        let text = set
            .render(
                TemplateKind::Expand,
                &[
                    ("preference_context", ""),
                    ("t0", "a"),
                    ("t1", "b"),
                    ("categorization", "{}"),
                    ("K", "30"),
                ],
            )
            .unwrap();
        assert!(text.starts_with("A user wrote"));
    }
}
