//! Session state as a fold over its event log.
//!
//! Commands validate against the current state and return the event to
//! append; `apply` is the only place state changes, so replaying the log
//! rebuilds a session exactly.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use homodiv_core::generation::GenerationRecord;
use homodiv_core::personalization::{should_stop, FinalScore, FinalSelection, Satisfaction};
use homodiv_core::pipeline::ExpansionRun;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Initial prompt plus five re-prompts.
pub const MAX_ROUNDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Base,
    Poet,
    BasePersonalize,
    PoetPersonalize,
}

impl Mode {
    pub fn expands(self) -> bool {
        matches!(self, Mode::Poet | Mode::PoetPersonalize)
    }

    pub fn personalizes(self) -> bool {
        matches!(self, Mode::BasePersonalize | Mode::PoetPersonalize)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Poet => "poet",
            Mode::BasePersonalize => "base_personalize",
            Mode::PoetPersonalize => "poet_personalize",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, ServiceError> {
        match s {
            "base" => Ok(Mode::Base),
            "poet" => Ok(Mode::Poet),
            "base_personalize" => Ok(Mode::BasePersonalize),
            "poet_personalize" => Ok(Mode::PoetPersonalize),
            other => Err(ServiceError::Validation(format!(
                "unknown mode `{other}` (expected base, poet, base_personalize or poet_personalize)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Satisfied,
    Capped,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Pending,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRef {
    pub id: String,
    pub background: String,
    pub initial_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPicks {
    pub most_preferred: Option<String>,
    pub least_preferred: Option<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub round_index: usize,
    pub prompt: String,
    pub status: RoundStatus,
    /// Prompt actually rendered when personalization rewrote it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_prompt: Option<String>,
    /// Original images of the prompt.
    pub generation: Option<GenerationRecord>,
    /// Inversion, scored pool and selected images; expanding modes only.
    pub expansion: Option<ExpansionRun>,
    pub satisfaction: Option<Satisfaction>,
    pub feedback: Option<FeedbackPicks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Round {
    /// Every image shown in this round.
    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        let originals = self.generation.iter().flat_map(|g| g.images.images.iter());
        let expanded = self
            .expansion
            .iter()
            .flat_map(|e| e.selected_images.images.iter());
        originals.chain(expanded).map(|h| h.content_hash.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    pub mode: Mode,
    pub scenario: Option<ScenarioRef>,
    /// Fixed image set shown before the first prompt of a scenario.
    pub initial_images: Option<GenerationRecord>,
    pub rounds: Vec<Round>,
    pub status: SessionStatus,
    pub final_selection: Option<FinalSelection>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session: Session,
    },
    RoundStarted {
        round_index: usize,
        prompt: String,
    },
    RoundCompleted {
        round_index: usize,
        effective_prompt: Option<String>,
        generation: GenerationRecord,
        expansion: Option<ExpansionRun>,
    },
    RoundFailed {
        round_index: usize,
        error: String,
    },
    FeedbackRecorded {
        round_index: usize,
        satisfaction: Satisfaction,
        picks: FeedbackPicks,
    },
    Finalized {
        selection: FinalSelection,
    },
}

#[derive(Debug, Clone, Deserialize)]
pub struct FeedbackRequest {
    pub satisfaction: u8,
    #[serde(default)]
    pub most_preferred: Option<String>,
    #[serde(default)]
    pub least_preferred: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FinalizeRequest {
    pub favorite_image: String,
    pub final_satisfaction: f64,
}

impl Session {
    /// Rebuilds a session from its log. The first event must be `Created`.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Session, ServiceError> {
        let mut it = events.into_iter();
        let mut session = match it.next() {
            Some(Event::Created { session }) => session.clone(),
            _ => return Err(ServiceError::Internal("event log does not start with creation".into())),
        };
        for e in it {
            session.apply(e)?;
        }
        Ok(session)
    }

    /// Image ids shown so far in this session, any round.
    pub fn inventory(&self) -> HashSet<String> {
        let initial = self
            .initial_images
            .iter()
            .flat_map(|g| g.images.images.iter().map(|h| h.content_hash.as_str()));
        initial
            .chain(self.rounds.iter().flat_map(Round::image_ids))
            .map(str::to_string)
            .collect()
    }

    pub fn round(&self, k: usize) -> Option<&Round> {
        self.rounds.get(k)
    }

    /// Index the next prompt will occupy: a failed last round is retried in
    /// place.
    fn next_round_index(&self) -> usize {
        match self.rounds.last() {
            Some(r) if r.status == RoundStatus::Failed => r.round_index,
            _ => self.rounds.len(),
        }
    }

    pub fn start_round(&self, prompt: &str) -> Result<Event, ServiceError> {
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return Err(ServiceError::Validation("prompt is empty".into()));
        }
        self.require_active()?;
        if let Some(last) = self.rounds.last() {
            match last.status {
                RoundStatus::Pending => {
                    return Err(ServiceError::conflict("round_pending", "the current round is still running"))
                }
                RoundStatus::Completed if last.satisfaction.is_none() => {
                    return Err(ServiceError::conflict(
                        "feedback_required",
                        "rate the current round before submitting another prompt",
                    ))
                }
                _ => {}
            }
        }
        let round_index = self.next_round_index();
        if round_index >= MAX_ROUNDS {
            return Err(ServiceError::conflict("session_capped", "no re-prompts left in this session"));
        }
        Ok(Event::RoundStarted {
            round_index,
            prompt: prompt.to_string(),
        })
    }

    pub fn record_feedback(&self, req: &FeedbackRequest, at: DateTime<Utc>) -> Result<Event, ServiceError> {
        let satisfaction =
            Satisfaction::try_from(req.satisfaction).map_err(|e| ServiceError::Validation(e.to_string()))?;
        self.require_active()?;
        let round = match self.rounds.last() {
            Some(r) if r.status == RoundStatus::Completed && r.satisfaction.is_none() => r,
            _ => {
                return Err(ServiceError::conflict(
                    "no_round_awaiting_feedback",
                    "there is no completed round awaiting feedback",
                ))
            }
        };
        if self.mode.personalizes() && (req.most_preferred.is_none() || req.least_preferred.is_none()) {
            return Err(ServiceError::Validation(format!(
                "{} sessions need most_preferred and least_preferred",
                self.mode
            )));
        }
        if req.most_preferred.is_some() && req.most_preferred == req.least_preferred {
            return Err(ServiceError::Validation("most and least preferred image must differ".into()));
        }
        let inventory = self.inventory();
        for id in req.most_preferred.iter().chain(&req.least_preferred) {
            if !inventory.contains(id) {
                return Err(ServiceError::Validation(format!("image {id} was not shown in this session")));
            }
        }
        Ok(Event::FeedbackRecorded {
            round_index: round.round_index,
            satisfaction,
            picks: FeedbackPicks {
                most_preferred: req.most_preferred.clone(),
                least_preferred: req.least_preferred.clone(),
                at,
            },
        })
    }

    /// `Ok(None)` when the session is already finalized: the stored record
    /// stands and the call is a no-op.
    pub fn finalize(&self, req: &FinalizeRequest) -> Result<Option<Event>, ServiceError> {
        if self.final_selection.is_some() {
            return Ok(None);
        }
        let score = FinalScore::try_from(req.final_satisfaction).map_err(|e| ServiceError::Validation(e.to_string()))?;
        if !matches!(self.status, SessionStatus::Satisfied | SessionStatus::Capped) {
            return Err(ServiceError::conflict(
                "not_finalizable",
                "only satisfied or capped sessions can be finalized",
            ));
        }
        if !self.inventory().contains(&req.favorite_image) {
            return Err(ServiceError::Validation(format!(
                "image {} was not shown in this session",
                req.favorite_image
            )));
        }
        Ok(Some(Event::Finalized {
            selection: FinalSelection {
                favorite_image: req.favorite_image.clone(),
                final_satisfaction: score,
            },
        }))
    }

    fn require_active(&self) -> Result<(), ServiceError> {
        match self.status {
            SessionStatus::Active => Ok(()),
            SessionStatus::Capped => Err(ServiceError::conflict("session_capped", "no re-prompts left in this session")),
            s => Err(ServiceError::conflict(
                "session_not_active",
                format!("session is {}", serde_json::to_string(&s).unwrap_or_default().trim_matches('"')),
            )),
        }
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), ServiceError> {
        let bad = |what: &str| ServiceError::Internal(format!("event does not fit session state: {what}"));
        match event {
            Event::Created { .. } => return Err(bad("second creation")),
            Event::RoundStarted { round_index, prompt } => {
                let round = Round {
                    round_index: *round_index,
                    prompt: prompt.clone(),
                    status: RoundStatus::Pending,
                    effective_prompt: None,
                    generation: None,
                    expansion: None,
                    satisfaction: None,
                    feedback: None,
                    error: None,
                };
                if *round_index == self.rounds.len() {
                    self.rounds.push(round);
                } else if *round_index + 1 == self.rounds.len()
                    && self.rounds[*round_index].status == RoundStatus::Failed
                {
                    self.rounds[*round_index] = round;
                } else {
                    return Err(bad("round index out of sequence"));
                }
            }
            Event::RoundCompleted {
                round_index,
                effective_prompt,
                generation,
                expansion,
            } => {
                if expansion.is_some() != self.mode.expands() {
                    return Err(bad("expansion presence does not match mode"));
                }
                let r = self.pending_round(*round_index).ok_or_else(|| bad("no pending round"))?;
                r.status = RoundStatus::Completed;
                r.effective_prompt = effective_prompt.clone();
                r.generation = Some(generation.clone());
                r.expansion = expansion.clone();
            }
            Event::RoundFailed { round_index, error } => {
                let r = self.pending_round(*round_index).ok_or_else(|| bad("no pending round"))?;
                r.status = RoundStatus::Failed;
                r.error = Some(error.clone());
            }
            Event::FeedbackRecorded {
                round_index,
                satisfaction,
                picks,
            } => {
                let r = self
                    .rounds
                    .get_mut(*round_index)
                    .filter(|r| r.status == RoundStatus::Completed && r.satisfaction.is_none())
                    .ok_or_else(|| bad("no round awaiting feedback"))?;
                r.satisfaction = Some(*satisfaction);
                r.feedback = Some(picks.clone());
                if satisfaction.is_satisfied() {
                    self.status = SessionStatus::Satisfied;
                } else if should_stop(*satisfaction, *round_index) {
                    self.status = SessionStatus::Capped;
                }
            }
            Event::Finalized { selection } => {
                if self.final_selection.is_some() {
                    return Err(bad("already finalized"));
                }
                self.final_selection = Some(selection.clone());
            }
        }
        Ok(())
    }

    fn pending_round(&mut self, k: usize) -> Option<&mut Round> {
        self.rounds.get_mut(k).filter(|r| r.status == RoundStatus::Pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(mode: Mode) -> Session {
        Session {
            session_id: "s".into(),
            user_id: "u".into(),
            mode,
            scenario: None,
            initial_images: None,
            rounds: vec![],
            status: SessionStatus::Active,
            final_selection: None,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    fn fake_generation() -> GenerationRecord {
        serde_json::from_value(serde_json::json!({
            "prompt": "p", "backend_id": "mock", "config": {
                "backend_id": "mock", "guidance_scale": 7.5, "inference_steps": 28,
                "images_per_prompt": 2, "seeds": {"explicit": [1, 2]}
            },
            "images": {"images": [
                {"content_hash": "a", "path": "a.png"}, {"content_hash": "b", "path": "b.png"}
            ], "source_prompt": "p", "seeds": [1, 2]},
            "wall_time": 0
        }))
        .unwrap()
    }

    fn complete(s: &mut Session, prompt: &str) {
        let e = s.start_round(prompt).unwrap();
        s.apply(&e).unwrap();
        let k = s.rounds.len() - 1;
        s.apply(&Event::RoundCompleted {
            round_index: k,
            effective_prompt: None,
            generation: fake_generation(),
            expansion: None,
        })
        .unwrap();
    }

    fn rate(s: &mut Session, sat: u8) {
        let req = FeedbackRequest {
            satisfaction: sat,
            most_preferred: Some("a".into()),
            least_preferred: Some("b".into()),
        };
        let e = s.record_feedback(&req, DateTime::<Utc>::UNIX_EPOCH).unwrap();
        s.apply(&e).unwrap();
    }

    #[test]
    fn feedback_gates_the_next_prompt_and_caps_at_six() {
        let mut s = session(Mode::Base);
        for k in 0..MAX_ROUNDS {
            complete(&mut s, &format!("prompt {k}"));
            assert!(matches!(s.start_round("again"), Err(ServiceError::Conflict { kind: "feedback_required", .. })));
            rate(&mut s, 3);
        }
        assert_eq!(s.status, SessionStatus::Capped);
        assert!(matches!(s.start_round("again"), Err(ServiceError::Conflict { kind: "session_capped", .. })));
    }

    #[test]
    fn high_satisfaction_ends_the_session() {
        let mut s = session(Mode::Base);
        complete(&mut s, "p");
        rate(&mut s, 6);
        assert_eq!(s.status, SessionStatus::Satisfied);
        assert!(s.start_round("more").is_err());
    }

    #[test]
    fn personalize_mode_requires_picks() {
        let mut s = session(Mode::BasePersonalize);
        complete(&mut s, "p");
        let req = FeedbackRequest {
            satisfaction: 4,
            most_preferred: None,
            least_preferred: None,
        };
        assert!(matches!(s.record_feedback(&req, Utc::now()), Err(ServiceError::Validation(_))));
    }

    #[test]
    fn failed_round_is_retried_in_place() {
        let mut s = session(Mode::Base);
        let e = s.start_round("p").unwrap();
        s.apply(&e).unwrap();
        s.apply(&Event::RoundFailed {
            round_index: 0,
            error: "backend down".into(),
        })
        .unwrap();
        let e = s.start_round("p").unwrap();
        assert!(matches!(e, Event::RoundStarted { round_index: 0, .. }));
        s.apply(&e).unwrap();
        assert_eq!(s.rounds.len(), 1);
        assert_eq!(s.rounds[0].status, RoundStatus::Pending);
    }

    #[test]
    fn expansion_must_match_mode() {
        let mut s = session(Mode::Poet);
        let e = s.start_round("p").unwrap();
        s.apply(&e).unwrap();
        let done = Event::RoundCompleted {
            round_index: 0,
            effective_prompt: None,
            generation: fake_generation(),
            expansion: None,
        };
        assert!(s.apply(&done).is_err());
    }
}
