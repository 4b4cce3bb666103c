use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use homodiv_core::config::GlobalConfig;
use homodiv_core::personalization::{
    analyze_image_preferences, FinalSelection, PreferenceProfile, RoundFeedback,
};
use homodiv_core::pipeline::Stack;
use homodiv_core::scenarios::scenario;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::error::ServiceError;
use crate::runner::{profile_context, RoundJob};
use crate::session::{
    Event, FeedbackRequest, FinalizeRequest, Mode, Round, ScenarioRef, Session, SessionStatus,
};
use crate::store::EventStore;

type SessionCell = Arc<Mutex<Session>>;

/// Shared service state. Each session sits behind its own lock, so requests
/// on one session are serialized while sessions proceed independently.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    stack: Stack,
    session_images: usize,
    context_budget: usize,
    events: EventStore,
    profiles: PathBuf,
    sessions: StdMutex<HashMap<String, SessionCell>>,
}

impl AppState {
    /// Opens the event store under the data directory and replays it.
    pub fn open(config: &GlobalConfig, stack: Stack) -> Result<Self, ServiceError> {
        let data = config.data_dir();
        let events = EventStore::open(data.join("sessions"))?;
        let profiles = data.join("profiles");
        std::fs::create_dir_all(&profiles)?;
        let sessions = events
            .load_all()?
            .into_iter()
            .map(|s| (s.session_id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self {
            inner: Arc::new(Inner {
                stack,
                session_images: config.backend.session_images,
                context_budget: config.personalization.context_budget,
                events,
                profiles,
                sessions: StdMutex::new(sessions),
            }),
        })
    }

    pub fn event_store(&self) -> &EventStore {
        &self.inner.events
    }

    pub fn profile_path(&self, user_id: &str) -> PathBuf {
        self.inner.profiles.join(format!("{user_id}.json"))
    }

    fn cell(&self, id: &str) -> Result<SessionCell, ServiceError> {
        self.inner
            .sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    /// Appends `event` and applies it; the log is written first so memory
    /// never runs ahead of disk.
    fn commit(&self, session: &mut Session, event: &Event) -> Result<(), ServiceError> {
        self.inner.events.append(&session.session_id, event)?;
        session.apply(event)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/prompts", post(submit_prompt))
        .route("/sessions/{id}/rounds/{k}", get(get_round))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/images/{hash}", get(get_image))
        .with_state(state)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::Validation(e.body_text()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker panicked: {e}")))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub user_id: String,
    pub mode: String,
    #[serde(default)]
    pub scenario_id: Option<String>,
}

fn valid_user_id(id: &str) -> bool {
    // user ids name profile files
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Session>), ServiceError> {
    let req = body(payload)?;
    let mode: Mode = req.mode.parse()?;
    let user_id = req.user_id.trim().to_string();
    if !valid_user_id(&user_id) {
        return Err(ServiceError::Validation(
            "user_id must be 1 to 128 ASCII letters, digits, '-' or '_'".into(),
        ));
    }
    let found = match &req.scenario_id {
        Some(id) => Some(scenario(id).ok_or_else(|| ServiceError::NotFound(format!("scenario {id}")))?),
        None => None,
    };
    let initial_images = match found {
        Some(sc) => {
            let (stack, n) = (state.inner.stack.clone(), state.inner.session_images);
            Some(blocking(move || Ok(stack.generate(sc.initial_prompt, n, sc.base_seed)?)).await?)
        }
        None => None,
    };
    let session = Session {
        session_id: uuid::Uuid::new_v4().simple().to_string(),
        user_id,
        mode,
        scenario: found.map(|s| ScenarioRef {
            id: s.id.to_string(),
            background: s.background.to_string(),
            initial_prompt: s.initial_prompt.to_string(),
        }),
        initial_images,
        rounds: Vec::new(),
        status: SessionStatus::Active,
        final_selection: None,
        created_at: Utc::now(),
    };
    state.inner.events.append(
        &session.session_id,
        &Event::Created {
            session: session.clone(),
        },
    )?;
    state
        .inner
        .sessions
        .lock()
        .expect("session map lock")
        .insert(session.session_id.clone(), Arc::new(Mutex::new(session.clone())));
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    let cell = state.cell(&id)?;
    let session = cell.lock().await.clone();
    Ok(Json(session))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitPrompt {
    pub prompt: String,
}

/// Returned while a round runs; poll `poll_url` for the result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundHandle {
    pub session_id: String,
    pub round_index: usize,
    pub status: String,
    pub poll_url: String,
}

async fn submit_prompt(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<SubmitPrompt>, JsonRejection>,
) -> Result<(StatusCode, Json<RoundHandle>), ServiceError> {
    let req = body(payload)?;
    let cell = state.cell(&id)?;
    let mut session = cell.lock().await;
    let event = session.start_round(&req.prompt)?;
    let Event::RoundStarted { round_index, prompt } = event.clone() else {
        unreachable!("start_round yields RoundStarted")
    };
    // read the profile before committing so a corrupt profile fails the
    // request instead of leaving a pending round behind
    let context = if session.mode.personalizes() {
        profile_context(&state.profile_path(&session.user_id), state.inner.context_budget)?
    } else {
        String::new()
    };
    state.commit(&mut session, &event)?;
    let mode = session.mode;
    drop(session);

    let worker = state.clone();
    let sid = id.clone();
    tokio::spawn(async move {
        let inner = worker.inner.clone();
        let job_sid = sid.clone();
        let outcome = blocking(move || {
            RoundJob {
                stack: &inner.stack,
                mode,
                session_id: &job_sid,
                round_index,
                prompt: &prompt,
                context,
                session_images: inner.session_images,
            }
            .run()
        })
        .await;
        let event = outcome.unwrap_or_else(|e| {
            tracing::warn!(session = %sid, round = round_index, error = %e, "round failed");
            Event::RoundFailed {
                round_index,
                error: e.to_string(),
            }
        });
        let Ok(cell) = worker.cell(&sid) else { return };
        let mut session = cell.lock().await;
        if let Err(e) = worker.commit(&mut session, &event) {
            tracing::error!(session = %sid, error = %e, "could not record round outcome");
        }
    });

    Ok((
        StatusCode::ACCEPTED,
        Json(RoundHandle {
            poll_url: format!("/sessions/{id}/rounds/{round_index}"),
            session_id: id,
            round_index,
            status: "pending".into(),
        }),
    ))
}

async fn get_round(
    State(state): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
) -> Result<Json<Round>, ServiceError> {
    let cell = state.cell(&id)?;
    let session = cell.lock().await;
    session
        .round(k)
        .cloned()
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("round {k} of session {id}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub session_id: String,
    pub round_index: usize,
    pub session_status: SessionStatus,
    /// Notes about preference analysis that did not stop the request.
    pub warnings: Vec<String>,
}

async fn submit_feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<FeedbackOutcome>, ServiceError> {
    let req = body(payload)?;
    let cell = state.cell(&id)?;
    let mut session = cell.lock().await;
    let now = Utc::now();
    let event = session.record_feedback(&req, now)?;
    let Event::FeedbackRecorded { round_index, satisfaction, .. } = &event else {
        unreachable!("record_feedback yields FeedbackRecorded")
    };
    let round_index = *round_index;

    let mut warnings = Vec::new();
    if session.mode.personalizes() {
        let feedback = RoundFeedback {
            round_index,
            prompt: session.rounds[round_index].prompt.clone(),
            satisfaction: *satisfaction,
            most_preferred: req.most_preferred.clone().unwrap_or_default(),
            least_preferred: req.least_preferred.clone().unwrap_or_default(),
            timestamp: now,
        };
        let inventory = session.inventory();
        let path = state.profile_path(&session.user_id);
        let user = session.user_id.clone();
        let worker = state.clone();
        warnings = blocking(move || {
            let mut profile = if path.exists() {
                PreferenceProfile::load(&path)?
            } else {
                PreferenceProfile::new(user)
            };
            profile
                .record_feedback(continue_history(&profile, feedback), &inventory)
                .map_err(|e| ServiceError::Validation(e.to_string()))?;
            let stack = &worker.inner.stack;
            let store = stack.generator.store().clone();
            let locate = move |h: &str| store.get(h).ok().map(|i| i.path.display().to_string());
            // analysis failure keeps the recorded feedback and is reported
            let warnings = match analyze_image_preferences(
                &mut profile,
                &locate,
                stack.llm.as_ref(),
                &stack.templates,
                stack.config.expansion.retry,
            ) {
                Ok(w) => w,
                Err(e) => vec![format!("preference analysis skipped: {e}")],
            };
            profile.context(worker.inner.context_budget);
            profile.save(&path)?;
            Ok(warnings)
        })
        .await?;
    }

    state.commit(&mut session, &event)?;
    Ok(Json(FeedbackOutcome {
        session_id: id,
        round_index,
        session_status: session.status,
        warnings,
    }))
}

/// Profiles span sessions, so their round numbering keeps increasing even
/// when a new session starts again at round 0.
fn continue_history(profile: &PreferenceProfile, mut feedback: RoundFeedback) -> RoundFeedback {
    if let Some(last) = profile.history.last() {
        if feedback.round_index <= last.round_index {
            feedback.round_index = last.round_index + 1;
        }
    }
    feedback
}

async fn finalize(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<FinalizeRequest>, JsonRejection>,
) -> Result<Json<FinalSelection>, ServiceError> {
    let req = body(payload)?;
    let cell = state.cell(&id)?;
    let mut session = cell.lock().await;
    if let Some(event) = session.finalize(&req)? {
        state.commit(&mut session, &event)?;
    }
    let selection = session
        .final_selection
        .clone()
        .expect("finalized sessions hold a selection");
    Ok(Json(selection))
}

async fn get_image(State(state): State<AppState>, Path(hash): Path<String>) -> Result<Response, ServiceError> {
    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ServiceError::Validation(format!("`{hash}` is not a content hash")));
    }
    let store = state.inner.stack.generator.store().clone();
    let bytes = blocking(move || {
        store
            .read(&hash)
            .map_err(|_| ServiceError::NotFound(format!("image {hash}")))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
