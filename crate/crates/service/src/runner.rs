//! Blocking work for one round: image generation and, in expanding modes,
//! identification, expansion and filtering.

use std::path::Path;

use homodiv_core::inversion::splitmix64;
use homodiv_core::personalization::{personalize_prompt, PreferenceProfile};
use homodiv_core::pipeline::Stack;

use crate::error::ServiceError;
use crate::session::{Event, Mode};

/// Seed of round `k` in a session. Distinct sessions and rounds draw
/// distinct images; the same pair always draws the same ones.
pub fn round_seed(session_id: &str, k: usize) -> u64 {
    let h = session_id
        .bytes()
        .fold(0x5eed_u64, |acc, b| splitmix64(acc ^ u64::from(b)));
    splitmix64(h ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Preference context for `user_id`, empty when there is no profile yet.
pub fn profile_context(profile_path: &Path, budget: usize) -> Result<String, ServiceError> {
    if !profile_path.exists() {
        return Ok(String::new());
    }
    let mut profile = PreferenceProfile::load(profile_path)?;
    Ok(profile.context(budget).to_string())
}

pub struct RoundJob<'a> {
    pub stack: &'a Stack,
    pub mode: Mode,
    pub session_id: &'a str,
    pub round_index: usize,
    pub prompt: &'a str,
    /// Empty outside personalizing modes.
    pub context: String,
    pub session_images: usize,
}

impl RoundJob<'_> {
    pub fn run(&self) -> Result<Event, ServiceError> {
        let stack = self.stack;
        let seed = round_seed(self.session_id, self.round_index);
        let context = Some(self.context.as_str()).filter(|c| !c.trim().is_empty());
        let (effective_prompt, generation, expansion) = match self.mode {
            Mode::Base => (None, stack.generate(self.prompt, self.session_images, seed)?, None),
            Mode::BasePersonalize => {
                let rewritten = personalize_prompt(
                    self.prompt,
                    &self.context,
                    stack.llm.as_ref(),
                    &stack.templates,
                    stack.config.expansion.retry,
                )?;
                let generation = stack.generate(&rewritten, self.session_images, seed)?;
                let effective = (rewritten != self.prompt).then_some(rewritten);
                (effective, generation, None)
            }
            Mode::Poet | Mode::PoetPersonalize => {
                // inversion needs at least one full batch of originals
                let n = self.session_images.max(stack.config.inversion.batch_size);
                let generation = stack.generate(self.prompt, n, seed)?;
                let expansion = stack.expand(
                    self.prompt,
                    &generation.images,
                    &stack.inversion_strategy(),
                    context,
                    seed,
                )?;
                (None, generation, Some(expansion))
            }
        };
        Ok(Event::RoundCompleted {
            round_index: self.round_index,
            effective_prompt,
            generation,
            expansion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_session_and_round() {
        assert_eq!(round_seed("a", 0), round_seed("a", 0));
        assert_ne!(round_seed("a", 0), round_seed("a", 1));
        assert_ne!(round_seed("a", 0), round_seed("b", 0));
    }
}
