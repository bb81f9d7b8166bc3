//! Session state machine and task queue, independent of HTTP.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use prefqrels_core::judgment_log::{JudgmentLog, LogError, LogEvent, PairKind};
use prefqrels_core::tasking::{validate_task_result, ExclusionList, ExportedTask, Side, TaskVerdict};
use serde::{Deserialize, Serialize};

/// Seconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock(AtomicU64::new(start))
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Whatever the operator knows about an assessor at sign-up.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssessorProfile {
    #[serde(default)]
    pub locale: Option<String>,
    #[serde(default)]
    pub approval_rate: Option<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub type Qualification = Arc<dyn Fn(&AssessorProfile) -> bool + Send + Sync>;

/// Requires a known approval rate of at least `min_rate` and, if `locales`
/// is non-empty, a locale from that list.
pub fn approval_qualification(min_rate: f64, locales: Vec<String>) -> Qualification {
    Arc::new(move |p: &AssessorProfile| {
        let rate_ok = p.approval_rate.is_some_and(|r| r >= min_rate);
        let locale_ok = locales.is_empty() || p.locale.as_ref().is_some_and(|l| locales.contains(l));
        rate_ok && locale_ok
    })
}

#[derive(Clone)]
pub struct ServiceConfig {
    /// Idle seconds before an open session is abandoned and its task returned.
    pub session_timeout: u64,
    /// `None` admits everyone not excluded.
    pub qualification: Option<Qualification>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session_timeout: 60 * 60,
            qualification: None,
        }
    }
}

impl std::fmt::Debug for ServiceConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceConfig")
            .field("session_timeout", &self.session_timeout)
            .field("qualification", &self.qualification.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    ConsentPending,
    Active,
    Completed,
    Abandoned,
    Rejected,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("assessor is excluded")]
    Excluded,
    #[error("assessor does not meet the qualification requirements")]
    NotQualified,
    #[error("assessor token must not be empty")]
    EmptyAssessor,
    #[error("session is {state:?}")]
    WrongState { state: SessionState },
    #[error("answer for pair {got} but pair {expected} is current")]
    OutOfOrder { expected: usize, got: usize },
    #[error("no tasks available")]
    NoTasks,
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub assessor: String,
    pub state: SessionState,
    /// Pairs answered so far.
    pub index: usize,
    /// Pairs in the checked-out task; 0 before consent.
    pub total: usize,
}

/// What the assessor sees for one pair. Deliberately carries nothing that
/// tells QC pairs from real ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextPair {
    Pair {
        index: usize,
        total: usize,
        query: String,
        left: String,
        right: String,
    },
    Done {
        state: SessionState,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnswerAck {
    pub state: SessionState,
    pub index: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub tasks_total: usize,
    pub tasks_queued: usize,
    pub tasks_active: usize,
    pub tasks_accepted: usize,
    pub tasks_rejected: usize,
    pub tasks_abandoned: usize,
    pub real_pairs_total: usize,
    pub real_pairs_judged: usize,
    pub real_pairs_remaining: usize,
    /// Rejected over (accepted + rejected) submissions; 0 when none.
    pub rejection_rate: f64,
}

/// Pair counts per assessor. A report only; no payment decision is made.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PaymentRow {
    pub assessor: String,
    pub tasks_accepted: usize,
    pub tasks_rejected: usize,
    pub tasks_abandoned: usize,
    pub pairs_answered: usize,
}

#[derive(Debug)]
struct Session {
    assessor: String,
    state: SessionState,
    task: Option<ExportedTask>,
    answers: Vec<Side>,
    last_seen: u64,
}

#[derive(Debug)]
struct Inner {
    queue: VecDeque<ExportedTask>,
    sessions: HashMap<String, Session>,
    /// task_id -> session_id for checked-out tasks.
    checked_out: HashMap<String, String>,
    /// task_id -> (real pairs, all pairs)
    sizes: BTreeMap<String, (usize, usize)>,
    log: JudgmentLog,
    exclusions: ExclusionList,
}

pub struct Service {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Service {
    /// Tasks already accepted in `log` are not queued again; tasks that were
    /// rejected or abandoned come back with a fresh layout.
    pub fn new(
        tasks: Vec<ExportedTask>,
        log: JudgmentLog,
        exclusions: ExclusionList,
        clock: Arc<dyn Clock>,
        config: ServiceConfig,
    ) -> Self {
        let mut done = std::collections::HashSet::new();
        let mut retries: HashMap<&str, u32> = HashMap::new();
        for e in log.entries() {
            match &e.event {
                LogEvent::TaskAccepted { task_id, .. } => {
                    done.insert(task_id.as_str());
                }
                LogEvent::TaskRejected { task_id, .. } | LogEvent::TaskAbandoned { task_id, .. } => {
                    *retries.entry(task_id.as_str()).or_default() += 1;
                }
                _ => {}
            }
        }
        let mut sizes = BTreeMap::new();
        let mut queue = VecDeque::new();
        for t in tasks {
            let real = t.pairs.iter().filter(|p| p.pair.kind == PairKind::Real).count();
            sizes.insert(t.task_id.clone(), (real, t.pairs.len()));
            if done.contains(t.task_id.as_str()) {
                continue;
            }
            let mut layout = t.task();
            for _ in 0..retries.get(t.task_id.as_str()).copied().unwrap_or(0) {
                layout = layout.rerandomized();
            }
            queue.push_back(t.with_layout(&layout));
        }
        Service {
            inner: Mutex::new(Inner {
                queue,
                sessions: HashMap::new(),
                checked_out: HashMap::new(),
                sizes,
                log,
                exclusions,
            }),
            clock,
            config,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panic while holding the lock leaves plain data behind; keep serving
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let now = self.clock.now();
        inner.expire(now, self.config.session_timeout);
        inner
    }

    pub fn create_session(&self, assessor: &str, profile: &AssessorProfile) -> Result<SessionView, ServiceError> {
        let assessor = assessor.trim();
        if assessor.is_empty() {
            return Err(ServiceError::EmptyAssessor);
        }
        let mut inner = self.lock();
        if inner.exclusions.contains(assessor) {
            return Err(ServiceError::Excluded);
        }
        if let Some(q) = &self.config.qualification {
            if !q(profile) {
                return Err(ServiceError::NotQualified);
            }
        }
        let id = format!("s{:032x}", rand::random::<u128>());
        inner.sessions.insert(
            id.clone(),
            Session {
                assessor: assessor.to_string(),
                state: SessionState::ConsentPending,
                task: None,
                answers: Vec::new(),
                last_seen: self.clock.now(),
            },
        );
        Ok(inner.view(&id))
    }

    /// Consent checks out the next queued task.
    pub fn consent(&self, id: &str) -> Result<SessionView, ServiceError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let state = inner.session_mut(id)?.state;
        if state != SessionState::ConsentPending {
            return Err(ServiceError::WrongState { state });
        }
        let task = inner.queue.pop_front().ok_or(ServiceError::NoTasks)?;
        inner.checked_out.insert(task.task_id.clone(), id.to_string());
        let s = inner.session_mut(id)?;
        s.task = Some(task);
        s.state = SessionState::Active;
        s.last_seen = now;
        Ok(inner.view(id))
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ServiceError> {
        let mut inner = self.lock();
        inner.session_mut(id)?;
        Ok(inner.view(id))
    }

    pub fn next(&self, id: &str) -> Result<NextPair, ServiceError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let s = inner.session_mut(id)?;
        match s.state {
            SessionState::Active => {}
            SessionState::Completed | SessionState::Rejected => return Ok(NextPair::Done { state: s.state }),
            state => return Err(ServiceError::WrongState { state }),
        }
        s.last_seen = now;
        let task = s.task.as_ref().expect("active sessions hold a task");
        let index = s.answers.len();
        let p = &task.pairs[index];
        Ok(NextPair::Pair {
            index,
            total: task.pairs.len(),
            query: p.query_text.clone(),
            left: p.left_text.clone(),
            right: p.right_text.clone(),
        })
    }

    /// Records the answer for `pair_index` (the current pair when `None`).
    /// Re-sending an already recorded answer is acknowledged without effect.
    pub fn answer(&self, id: &str, pair_index: Option<usize>, choice: Side) -> Result<AnswerAck, ServiceError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let s = inner.session_mut(id)?;
        let cursor = s.answers.len();
        let index = pair_index.unwrap_or(cursor);
        if index < cursor && s.answers[index] == choice {
            return Ok(inner.ack(id));
        }
        if s.state != SessionState::Active {
            return Err(ServiceError::WrongState { state: s.state });
        }
        if index != cursor {
            return Err(ServiceError::OutOfOrder { expected: cursor, got: index });
        }
        s.last_seen = now;
        s.answers.push(choice);
        let total = s.task.as_ref().map_or(0, |t| t.pairs.len());
        if s.answers.len() == total {
            if let Err(e) = inner.finish(id, now) {
                // leave the session able to resubmit its last answer
                inner.session_mut(id)?.answers.pop();
                return Err(e);
            }
        }
        Ok(inner.ack(id))
    }

    /// Early exit. Answers so far count for the payment report only.
    pub fn abandon(&self, id: &str) -> Result<SessionView, ServiceError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let state = inner.session_mut(id)?.state;
        match state {
            SessionState::ConsentPending => inner.session_mut(id)?.state = SessionState::Abandoned,
            SessionState::Active => inner.abandon_active(id, now)?,
            state => return Err(ServiceError::WrongState { state }),
        }
        Ok(inner.view(id))
    }

    pub fn progress(&self) -> Progress {
        let inner = self.lock();
        let mut p = Progress {
            tasks_total: inner.sizes.len(),
            tasks_queued: inner.queue.len(),
            tasks_active: inner.checked_out.len(),
            tasks_accepted: 0,
            tasks_rejected: 0,
            tasks_abandoned: 0,
            real_pairs_total: inner.sizes.values().map(|s| s.0).sum(),
            real_pairs_judged: 0,
            real_pairs_remaining: 0,
            rejection_rate: 0.0,
        };
        for e in inner.log.entries() {
            match &e.event {
                LogEvent::Judgment(j) if j.kind == PairKind::Real && inner.sizes.contains_key(&j.task_id) => {
                    p.real_pairs_judged += 1
                }
                LogEvent::TaskAccepted { .. } => p.tasks_accepted += 1,
                LogEvent::TaskRejected { .. } => p.tasks_rejected += 1,
                LogEvent::TaskAbandoned { .. } => p.tasks_abandoned += 1,
                _ => {}
            }
        }
        p.real_pairs_remaining = p.real_pairs_total.saturating_sub(p.real_pairs_judged);
        let decided = p.tasks_accepted + p.tasks_rejected;
        if decided > 0 {
            p.rejection_rate = p.tasks_rejected as f64 / decided as f64;
        }
        p
    }

    pub fn payments(&self) -> Vec<PaymentRow> {
        let inner = self.lock();
        let mut rows: BTreeMap<&str, PaymentRow> = BTreeMap::new();
        let size = |task_id: &str| inner.sizes.get(task_id).map_or(0, |s| s.1);
        for e in inner.log.entries() {
            // (assessor, accepted, rejected, abandoned, pairs)
            let (assessor, acc, rej, aban, pairs) = match &e.event {
                LogEvent::TaskAccepted { assessor, task_id, .. } => (assessor, 1, 0, 0, size(task_id)),
                LogEvent::TaskRejected { assessor, task_id, .. } => (assessor, 0, 1, 0, size(task_id)),
                LogEvent::TaskAbandoned { assessor, answered, .. } => (assessor, 0, 0, 1, *answered),
                _ => continue,
            };
            let row = rows.entry(assessor).or_insert_with(|| PaymentRow {
                assessor: assessor.to_string(),
                ..PaymentRow::default()
            });
            row.tasks_accepted += acc;
            row.tasks_rejected += rej;
            row.tasks_abandoned += aban;
            row.pairs_answered += pairs;
        }
        rows.into_values().collect()
    }

    /// Runs `f` against the judgment log under the service lock.
    pub fn with_log<T>(&self, f: impl FnOnce(&JudgmentLog) -> T) -> T {
        f(&self.lock().log)
    }
}

impl Inner {
    fn session_mut(&mut self, id: &str) -> Result<&mut Session, ServiceError> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    fn view(&self, id: &str) -> SessionView {
        let s = &self.sessions[id];
        SessionView {
            session_id: id.to_string(),
            assessor: s.assessor.clone(),
            state: s.state,
            index: s.answers.len(),
            total: s.task.as_ref().map_or(0, |t| t.pairs.len()),
        }
    }

    fn ack(&self, id: &str) -> AnswerAck {
        let v = self.view(id);
        AnswerAck {
            state: v.state,
            index: v.index,
            total: v.total,
        }
    }

    fn answers_by_pair(s: &Session) -> BTreeMap<String, Side> {
        let task = s.task.as_ref().expect("session holds a task");
        task.pairs
            .iter()
            .zip(&s.answers)
            .map(|(p, a)| (p.pair.pair_id.clone(), *a))
            .collect()
    }

    fn finish(&mut self, id: &str, now: u64) -> Result<(), ServiceError> {
        let s = &self.sessions[id];
        let exported = s.task.as_ref().expect("session holds a task");
        let task = exported.task();
        let answers = Self::answers_by_pair(s);
        let assessor = s.assessor.clone();
        match validate_task_result(&task, &answers) {
            TaskVerdict::Accepted => {
                let mut events: Vec<LogEvent> = task
                    .judgments(&answers, &assessor, now)
                    .into_iter()
                    .map(LogEvent::Judgment)
                    .collect();
                events.push(LogEvent::TaskAccepted {
                    task_id: task.task_id.clone(),
                    assessor,
                    timestamp: now,
                });
                self.log.append(events)?;
                self.checked_out.remove(&task.task_id);
                self.session_mut(id)?.state = SessionState::Completed;
            }
            TaskVerdict::Rejected { failed_qc } => {
                self.log.append(vec![LogEvent::TaskRejected {
                    task_id: task.task_id.clone(),
                    assessor: assessor.clone(),
                    failed_qc,
                    timestamp: now,
                }])?;
                self.exclusions.add(&assessor)?;
                self.requeue(exported.with_layout(&task.rerandomized()));
                self.session_mut(id)?.state = SessionState::Rejected;
            }
            TaskVerdict::Incomplete { .. } => unreachable!("every pair has an answer"),
        }
        Ok(())
    }

    fn abandon_active(&mut self, id: &str, now: u64) -> Result<(), ServiceError> {
        let s = &self.sessions[id];
        let exported = s.task.as_ref().expect("active sessions hold a task");
        let task = exported.task();
        self.log.append(vec![LogEvent::TaskAbandoned {
            task_id: task.task_id.clone(),
            assessor: s.assessor.clone(),
            answered: s.answers.len(),
            timestamp: now,
        }])?;
        self.requeue(exported.with_layout(&task.rerandomized()));
        self.session_mut(id)?.state = SessionState::Abandoned;
        Ok(())
    }

    fn requeue(&mut self, task: ExportedTask) {
        self.checked_out.remove(&task.task_id);
        self.queue.push_back(task);
    }

    fn expire(&mut self, now: u64, timeout: u64) {
        let stale: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| {
                matches!(s.state, SessionState::ConsentPending | SessionState::Active)
                    && now.saturating_sub(s.last_seen) > timeout
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            if self.sessions[&id].state == SessionState::Active {
                // a failed write keeps the task checked out; retried on the next sweep
                let _ = self.abandon_active(&id, now);
            } else if let Some(s) = self.sessions.get_mut(&id) {
                s.state = SessionState::Abandoned;
            }
        }
    }
}
