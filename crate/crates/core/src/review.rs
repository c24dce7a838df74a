//! Human review queue persisted as an append-only JSON-Lines event log.
//!
//! Mutations go through one writer that appends and syncs an event before
//! applying it; readers work on immutable snapshots. Opening a store replays
//! the log, so acknowledged decisions survive restarts.

pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::SignalRef;
use crate::metrics::{Annotation, PredictionRow};
use crate::pipeline::AssistantOutput;
use crate::schema::{Label, LabeledTransaction, Polarity, ReviewerReason, TransactionRecord};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(30 * 60);

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, d: Duration) {
        self.0.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pending,
    InReview,
    Decided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Up,
    Down,
}

/// Thumbs up or down on one assistant reason, addressed by polarity list and
/// position within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonFeedback {
    pub case_id: String,
    pub polarity: Polarity,
    pub reason_index: usize,
    pub rating: Vote,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCase {
    pub case_id: String,
    pub seq: u64,
    pub record: TransactionRecord,
    pub assistant: AssistantOutput,
    pub status: CaseStatus,
    pub reviewer: Option<String>,
    pub verdict: Option<Label>,
    pub enqueued_at: u64,
    pub leased_at: Option<u64>,
    pub decided_at: Option<u64>,
    pub feedback: Vec<ReasonFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Enqueued {
        case_id: String,
        seq: u64,
        at: u64,
        record: TransactionRecord,
        assistant: AssistantOutput,
    },
    Assigned {
        case_id: String,
        reviewer: String,
        at: u64,
    },
    Released {
        case_id: String,
        at: u64,
    },
    Decided {
        case_id: String,
        reviewer: String,
        verdict: Label,
        at: u64,
    },
    Feedback {
        at: u64,
        feedback: ReasonFeedback,
    },
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("case {case_id:?} is {status:?}, not in review")]
    NotInReview { case_id: String, status: CaseStatus },
    #[error("case {case_id:?} is held by another reviewer")]
    WrongReviewer { case_id: String },
    #[error("case {case_id:?} has no {polarity:?} reason at index {index}")]
    UnknownReason {
        case_id: String,
        polarity: Polarity,
        index: usize,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("event log {path}: line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("event log I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct QueueState {
    cases: BTreeMap<u64, Arc<ReviewCase>>,
    by_case: HashMap<String, u64>,
    by_record: HashMap<String, u64>,
    next_seq: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub pending: u64,
    pub in_review: u64,
    pub decided: u64,
    pub total: u64,
}

impl QueueState {
    pub fn case(&self, case_id: &str) -> Option<&Arc<ReviewCase>> {
        self.cases.get(self.by_case.get(case_id)?)
    }

    pub fn case_for_record(&self, record_id: &str) -> Option<&Arc<ReviewCase>> {
        self.cases.get(self.by_record.get(record_id)?)
    }

    /// Cases in enqueue order.
    pub fn cases(&self) -> impl Iterator<Item = &Arc<ReviewCase>> {
        self.cases.values()
    }

    pub fn counts(&self) -> QueueCounts {
        let mut c = QueueCounts::default();
        for case in self.cases.values() {
            match case.status {
                CaseStatus::Pending => c.pending += 1,
                CaseStatus::InReview => c.in_review += 1,
                CaseStatus::Decided => c.decided += 1,
            }
        }
        c.total = self.cases.len() as u64;
        c
    }

    fn update(&mut self, case_id: &str, f: impl FnOnce(&mut ReviewCase)) {
        if let Some(seq) = self.by_case.get(case_id) {
            if let Some(case) = self.cases.get_mut(seq) {
                f(Arc::make_mut(case));
            }
        }
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::Enqueued {
                case_id,
                seq,
                at,
                record,
                assistant,
            } => {
                self.next_seq = self.next_seq.max(seq + 1);
                self.by_case.insert(case_id.clone(), seq);
                self.by_record.insert(record.id.clone(), seq);
                self.cases.insert(
                    seq,
                    Arc::new(ReviewCase {
                        case_id,
                        seq,
                        record,
                        assistant,
                        status: CaseStatus::Pending,
                        reviewer: None,
                        verdict: None,
                        enqueued_at: at,
                        leased_at: None,
                        decided_at: None,
                        feedback: Vec::new(),
                    }),
                );
            }
            Event::Assigned { case_id, reviewer, at } => self.update(&case_id, |c| {
                c.status = CaseStatus::InReview;
                c.reviewer = Some(reviewer);
                c.leased_at = Some(at);
            }),
            Event::Released { case_id, .. } => self.update(&case_id, |c| {
                c.status = CaseStatus::Pending;
                c.reviewer = None;
                c.leased_at = None;
            }),
            Event::Decided {
                case_id,
                reviewer,
                verdict,
                at,
            } => self.update(&case_id, |c| {
                c.status = CaseStatus::Decided;
                c.reviewer = Some(reviewer);
                c.verdict = Some(verdict);
                c.decided_at = Some(at);
            }),
            Event::Feedback { feedback, .. } => {
                let id = feedback.case_id.clone();
                self.update(&id, |c| c.feedback.push(feedback));
            }
        }
    }
}

struct Writer {
    log: Option<File>,
    state: QueueState,
}

impl Writer {
    /// Appends and syncs the events, then applies them.
    fn commit(&mut self, events: Vec<Event>) -> Result<(), ReviewError> {
        if events.is_empty() {
            return Ok(());
        }
        if let Some(log) = &mut self.log {
            let mut buf = String::new();
            for e in &events {
                buf.push_str(&serde_json::to_string(e).expect("event serializes"));
                buf.push('\n');
            }
            log.write_all(buf.as_bytes())?;
            log.sync_data()?;
        }
        for e in events {
            self.state.apply(e);
        }
        Ok(())
    }
}

/// Outcome of enqueueing one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnqueueOutcome {
    pub record_id: String,
    pub case_id: String,
    pub created: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparsed: bool,
}

pub struct ReviewStore {
    writer: Mutex<Writer>,
    snapshot: RwLock<Arc<QueueState>>,
    clock: Arc<dyn Clock>,
    lease: Duration,
    path: Option<PathBuf>,
}

fn replay(path: &Path) -> Result<(QueueState, File), ReviewError> {
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)?;
    let mut state = QueueState::default();
    let mut reader = BufReader::new(&mut file);
    let mut good_len = 0u64;
    let mut line_no = 0usize;
    let mut buf = String::new();
    let mut pending_err: Option<(usize, String)> = None;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some((line, message)) = pending_err.take() {
            return Err(ReviewError::Corrupt {
                path: path.to_path_buf(),
                line,
                message,
            });
        }
        if buf.trim().is_empty() {
            good_len += n as u64;
            continue;
        }
        match serde_json::from_str::<Event>(buf.trim_end()) {
            Ok(e) if buf.ends_with('\n') => {
                state.apply(e);
                good_len += n as u64;
            }
            Ok(_) => pending_err = Some((line_no, "unterminated final line".into())),
            Err(e) => pending_err = Some((line_no, e.to_string())),
        }
    }
    if let Some((line, message)) = pending_err {
        log::warn!(
            "event log {}: dropping torn final line {line} ({message})",
            path.display()
        );
        file.set_len(good_len)?;
        file.seek(SeekFrom::End(0))?;
    }
    Ok((state, file))
}

impl ReviewStore {
    pub fn in_memory(clock: Arc<dyn Clock>, lease: Duration) -> Self {
        Self::with_state(QueueState::default(), None, None, clock, lease)
    }

    /// Opens (or creates) the log at `path` and rebuilds state from it. A
    /// torn final line from an interrupted write is dropped.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>, lease: Duration) -> Result<Self, ReviewError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let (state, file) = replay(path)?;
        Ok(Self::with_state(state, Some(file), Some(path.to_path_buf()), clock, lease))
    }

    fn with_state(
        state: QueueState,
        log: Option<File>,
        path: Option<PathBuf>,
        clock: Arc<dyn Clock>,
        lease: Duration,
    ) -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(state.clone())),
            writer: Mutex::new(Writer { log, state }),
            clock,
            lease,
            path,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Current immutable view of the queue.
    pub fn snapshot(&self) -> Arc<QueueState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn mutate<T>(&self, f: impl FnOnce(&QueueState, u64) -> Result<(Vec<Event>, T), ReviewError>) -> Result<T, ReviewError> {
        let mut w = self.writer.lock().expect("writer lock");
        let now = self.clock.now_ms();
        let (events, out) = f(&w.state, now)?;
        if !events.is_empty() {
            w.commit(events)?;
            *self.snapshot.write().expect("snapshot lock") = Arc::new(w.state.clone());
        }
        Ok(out)
    }

    pub fn contains_record(&self, record_id: &str) -> bool {
        self.snapshot().case_for_record(record_id).is_some()
    }

    /// Stores assessed records as pending cases. Records already queued keep
    /// their existing case.
    pub fn enqueue(&self, items: Vec<(TransactionRecord, AssistantOutput)>) -> Result<Vec<EnqueueOutcome>, ReviewError> {
        self.mutate(|state, now| {
            let mut events = Vec::new();
            let mut out = Vec::new();
            let mut fresh: HashMap<String, String> = HashMap::new();
            let mut seq = state.next_seq;
            for (record, assistant) in items {
                if record.id.is_empty() {
                    return Err(ReviewError::Invalid("record id is empty".into()));
                }
                let existing = state
                    .case_for_record(&record.id)
                    .map(|c| c.case_id.clone())
                    .or_else(|| fresh.get(&record.id).cloned());
                if let Some(case_id) = existing {
                    out.push(EnqueueOutcome {
                        record_id: record.id,
                        case_id,
                        created: false,
                        unparsed: false,
                    });
                    continue;
                }
                let case_id = format!("case-{seq}");
                fresh.insert(record.id.clone(), case_id.clone());
                out.push(EnqueueOutcome {
                    record_id: record.id.clone(),
                    case_id: case_id.clone(),
                    created: true,
                    unparsed: assistant.unparsed(),
                });
                events.push(Event::Enqueued {
                    case_id,
                    seq,
                    at: now,
                    record,
                    assistant,
                });
                seq += 1;
            }
            Ok((events, out))
        })
    }

    /// Assigns the oldest pending case to `reviewer`, or returns the case the
    /// reviewer already holds. Leases idle longer than the lease period are
    /// released first.
    pub fn next_case(&self, reviewer: &str) -> Result<Option<ReviewCase>, ReviewError> {
        if reviewer.trim().is_empty() {
            return Err(ReviewError::Invalid("reviewer id is empty".into()));
        }
        let lease_ms = self.lease.as_millis() as u64;
        let assigned = self.mutate(|state, now| {
            let held = state.cases.values().find(|c| {
                c.status == CaseStatus::InReview
                    && c.reviewer.as_deref() == Some(reviewer)
                    && c.leased_at.is_some_and(|t| now.saturating_sub(t) < lease_ms)
            });
            if let Some(c) = held {
                return Ok((Vec::new(), Some(c.case_id.clone())));
            }
            let mut events = Vec::new();
            let mut chosen = None;
            for case in state.cases.values() {
                match case.status {
                    CaseStatus::InReview if case.leased_at.is_some_and(|t| now.saturating_sub(t) >= lease_ms) => {
                        events.push(Event::Released {
                            case_id: case.case_id.clone(),
                            at: now,
                        });
                        chosen = chosen.or(Some(case.seq));
                    }
                    CaseStatus::Pending => chosen = chosen.or(Some(case.seq)),
                    _ => {}
                }
            }
            let chosen = chosen.map(|seq| state.cases[&seq].case_id.clone());
            if let Some(case_id) = &chosen {
                events.push(Event::Assigned {
                    case_id: case_id.clone(),
                    reviewer: reviewer.to_string(),
                    at: now,
                });
            }
            Ok((events, chosen))
        })?;
        Ok(assigned.and_then(|id| self.snapshot().case(&id).map(|c| (**c).clone())))
    }

    pub fn submit_verdict(&self, case_id: &str, reviewer: &str, verdict: Label) -> Result<ReviewCase, ReviewError> {
        self.mutate(|state, now| {
            let case = state
                .case(case_id)
                .ok_or_else(|| ReviewError::UnknownCase(case_id.to_string()))?;
            if case.status != CaseStatus::InReview {
                return Err(ReviewError::NotInReview {
                    case_id: case_id.to_string(),
                    status: case.status,
                });
            }
            if case.reviewer.as_deref() != Some(reviewer) {
                return Err(ReviewError::WrongReviewer {
                    case_id: case_id.to_string(),
                });
            }
            Ok((
                vec![Event::Decided {
                    case_id: case_id.to_string(),
                    reviewer: reviewer.to_string(),
                    verdict,
                    at: now,
                }],
                (),
            ))
        })?;
        Ok((**self.snapshot().case(case_id).expect("decided case exists")).clone())
    }

    pub fn submit_feedback(&self, feedback: ReasonFeedback) -> Result<(), ReviewError> {
        self.mutate(|state, now| {
            let case = state
                .case(&feedback.case_id)
                .ok_or_else(|| ReviewError::UnknownCase(feedback.case_id.clone()))?;
            let len = case
                .assistant
                .evaluation
                .as_ref()
                .map_or(0, |e| e.reasons(feedback.polarity).len());
            if feedback.reason_index >= len {
                return Err(ReviewError::UnknownReason {
                    case_id: feedback.case_id.clone(),
                    polarity: feedback.polarity,
                    index: feedback.reason_index,
                });
            }
            Ok((vec![Event::Feedback { at: now, feedback }], ()))
        })
    }

    /// Decided cases as annotation lines. Up-voted assistant reasons become
    /// reviewer reasons.
    pub fn export_decisions(&self) -> Vec<Annotation> {
        self.snapshot()
            .cases()
            .filter(|c| c.status == CaseStatus::Decided)
            .map(|c| annotation_for(c))
            .collect()
    }

    /// Assistant predictions and reviewer-labeled gold for decided cases.
    pub fn decided_pairs(&self) -> (Vec<PredictionRow>, Vec<LabeledTransaction>) {
        let snap = self.snapshot();
        snap.cases()
            .filter_map(|c| {
                let label = c.verdict?;
                Some((
                    c.assistant.prediction_row(&c.record.id),
                    LabeledTransaction::new(c.record.clone(), label),
                ))
            })
            .unzip()
    }
}

fn annotation_for(case: &ReviewCase) -> Annotation {
    let mut reviewer_reasons = Vec::new();
    if let Some(e) = &case.assistant.evaluation {
        let mut seen = Vec::new();
        for f in case.feedback.iter().filter(|f| f.rating == Vote::Up) {
            if seen.contains(&(f.polarity, f.reason_index)) {
                continue;
            }
            seen.push((f.polarity, f.reason_index));
            if let Some(r) = e.reasons(f.polarity).get(f.reason_index) {
                if let SignalRef::Known(id) = &r.signal {
                    reviewer_reasons.push(ReviewerReason::new(id, f.polarity, &r.text));
                }
            }
        }
    }
    Annotation {
        id: case.record.id.clone(),
        reviewer_reasons,
        quality_ratings: Vec::new(),
        label: case.verdict,
        case_id: Some(case.case_id.clone()),
        feedback: case.feedback.clone(),
    }
}

/// JSON-Lines rendering of annotations.
pub fn annotations_jsonl(annotations: &[Annotation]) -> String {
    annotations
        .iter()
        .map(|a| serde_json::to_string(a).expect("annotation serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{Evaluation, Reason, Verdict};
    use crate::prompt::PromptKind;

    fn output(fraud: usize) -> AssistantOutput {
        let reasons = (0..fraud)
            .map(|i| Reason::known("memo", &format!("reason {i}")).unwrap())
            .collect();
        let e = Evaluation::new(reasons, vec![], Verdict::Fraudulent, None, 0.8).unwrap();
        AssistantOutput {
            kind: PromptKind::Reasoning,
            raw_text: crate::evaluation::render_evaluation(&e),
            evaluation: Some(e),
            verdict: Verdict::Fraudulent,
            confidence: 0.8,
            explanation: None,
            warnings: vec![],
            parse_error: None,
            template_version: "t".into(),
        }
    }

    fn item(id: &str) -> (TransactionRecord, AssistantOutput) {
        (TransactionRecord::new(id, "qr_scan"), output(2))
    }

    fn store() -> (ReviewStore, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_000));
        (ReviewStore::in_memory(clock.clone(), DEFAULT_LEASE), clock)
    }

    #[test]
    fn enqueue_is_idempotent() {
        let (s, _) = store();
        let out = s.enqueue(vec![item("a"), item("b"), item("c")]).unwrap();
        assert!(out.iter().all(|o| o.created));
        assert_eq!(s.snapshot().counts().pending, 3);
        let again = s.enqueue(vec![item("b"), item("b")]).unwrap();
        assert_eq!(again[0].case_id, out[1].case_id);
        assert!(!again[0].created && !again[1].created);
        assert_eq!(s.snapshot().counts().total, 3);
    }

    #[test]
    fn fifo_and_empty_queue() {
        let (s, _) = store();
        s.enqueue((0..5).map(|i| item(&format!("r{i}"))).collect()).unwrap();
        let got: Vec<String> = (0..5)
            .map(|i| s.next_case(&format!("rev{i}")).unwrap().unwrap().record.id)
            .collect();
        assert_eq!(got, ["r0", "r1", "r2", "r3", "r4"]);
        assert!(s.next_case("rev5").unwrap().is_none());
        assert_eq!(s.next_case("rev2").unwrap().unwrap().record.id, "r2");
        assert!(matches!(s.next_case(" "), Err(ReviewError::Invalid(_))));
    }

    #[test]
    fn verdict_rules() {
        let (s, _) = store();
        s.enqueue(vec![item("a")]).unwrap();
        let case = s.next_case("alice").unwrap().unwrap();
        assert!(matches!(
            s.submit_verdict(&case.case_id, "bob", Label::Scam),
            Err(ReviewError::WrongReviewer { .. })
        ));
        let decided = s.submit_verdict(&case.case_id, "alice", Label::Scam).unwrap();
        assert_eq!(decided.status, CaseStatus::Decided);
        assert_eq!(decided.verdict, Some(Label::Scam));
        assert!(decided.decided_at.is_some());
        assert!(matches!(
            s.submit_verdict(&case.case_id, "alice", Label::Scam),
            Err(ReviewError::NotInReview { .. })
        ));
        assert!(matches!(
            s.submit_verdict("case-99", "alice", Label::Scam),
            Err(ReviewError::UnknownCase(_))
        ));
    }

    #[test]
    fn leases_expire() {
        let (s, clock) = store();
        s.enqueue(vec![item("a")]).unwrap();
        let case = s.next_case("alice").unwrap().unwrap();
        assert!(s.next_case("bob").unwrap().is_none());
        clock.advance(DEFAULT_LEASE);
        let again = s.next_case("bob").unwrap().unwrap();
        assert_eq!(again.case_id, case.case_id);
        assert_eq!(again.reviewer.as_deref(), Some("bob"));
        assert!(matches!(
            s.submit_verdict(&case.case_id, "alice", Label::Scam),
            Err(ReviewError::WrongReviewer { .. })
        ));
    }

    #[test]
    fn feedback_and_export() {
        let (s, _) = store();
        s.enqueue(vec![item("a")]).unwrap();
        assert!(s.export_decisions().is_empty());
        let case = s.next_case("alice").unwrap().unwrap();
        let fb = |i, rating| ReasonFeedback {
            case_id: case.case_id.clone(),
            polarity: Polarity::SupportsFraud,
            reason_index: i,
            rating,
            note: Some(format!("note {i}")),
            reviewer: None,
        };
        s.submit_feedback(fb(0, Vote::Down)).unwrap();
        s.submit_feedback(fb(1, Vote::Up)).unwrap();
        assert!(matches!(s.submit_feedback(fb(2, Vote::Up)), Err(ReviewError::UnknownReason { .. })));
        let mut legit = fb(0, Vote::Up);
        legit.polarity = Polarity::SupportsLegitimacy;
        assert!(matches!(s.submit_feedback(legit), Err(ReviewError::UnknownReason { .. })));
        s.submit_verdict(&case.case_id, "alice", Label::Scam).unwrap();
        let export = s.export_decisions();
        assert_eq!(export.len(), 1);
        let a = &export[0];
        assert_eq!(a.label, Some(Label::Scam));
        assert_eq!(a.feedback.len(), 2);
        assert_eq!(a.feedback[0].rating, Vote::Down);
        assert_eq!(a.reviewer_reasons, vec![ReviewerReason::new("memo", Polarity::SupportsFraud, "reason 1")]);
        let line = annotations_jsonl(&export);
        let back: Annotation = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(&back, a);
    }

    #[test]
    fn replay_restores_state_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(5));
        {
            let s = ReviewStore::open(&path, clock.clone(), DEFAULT_LEASE).unwrap();
            s.enqueue(vec![item("a"), item("b")]).unwrap();
            let c = s.next_case("alice").unwrap().unwrap();
            s.submit_verdict(&c.case_id, "alice", Label::NotScam).unwrap();
            s.next_case("bob").unwrap().unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event\":\"assig").unwrap();
        drop(f);
        let s = ReviewStore::open(&path, clock.clone(), DEFAULT_LEASE).unwrap();
        let snap = s.snapshot();
        assert_eq!(
            snap.counts(),
            QueueCounts {
                pending: 0,
                in_review: 1,
                decided: 1,
                total: 2
            }
        );
        assert_eq!(snap.case("case-0").unwrap().verdict, Some(Label::NotScam));
        s.enqueue(vec![item("c")]).unwrap();
        drop(s);
        let s = ReviewStore::open(&path, clock, DEFAULT_LEASE).unwrap();
        assert_eq!(s.snapshot().counts().total, 3);
        assert_eq!(s.snapshot().case_for_record("c").unwrap().case_id, "case-2");
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "garbage\n{}\n").unwrap();
        let r = ReviewStore::open(&path, Arc::new(SystemClock), DEFAULT_LEASE);
        assert!(matches!(r, Err(ReviewError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn concurrent_next_case_never_double_assigns() {
        let (s, _) = store();
        s.enqueue(vec![item("only")]).unwrap();
        let s = Arc::new(s);
        let winners: Vec<bool> = std::thread::scope(|scope| {
            let hs: Vec<_> = (0..8)
                .map(|i| {
                    let s = s.clone();
                    scope.spawn(move || s.next_case(&format!("r{i}")).unwrap().is_some())
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(winners.iter().filter(|w| **w).count(), 1);
    }
}
