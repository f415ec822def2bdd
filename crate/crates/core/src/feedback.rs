//! Review loop: mine confident false positives, record reviewer decisions
//! in an append-only log, and fold confirmations back into the labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::audio_io::RecordingSession;
use crate::dataset::{self, DatasetManifest, Label, LabeledSample, Origin, Registry, Split};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::synth::{self, SynthConfig};
use crate::traineval::{self, Metrics, TrainRecipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Confirmed,
    Rejected,
}

impl std::str::FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(Status::Pending),
            "confirmed" => Ok(Status::Confirmed),
            "rejected" => Ok(Status::Rejected),
            other => Err(Error::arg(format!("unknown status `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Confirm,
    Reject,
}

impl Decision {
    fn status(self) -> Status {
        match self {
            Decision::Confirm => Status::Confirmed,
            Decision::Reject => Status::Rejected,
        }
    }
}

impl std::str::FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confirm" => Ok(Decision::Confirm),
            "reject" => Ok(Decision::Reject),
            other => Err(Error::arg(format!("unknown decision `{other}` (expected confirm or reject)"))),
        }
    }
}

/// A negative window the model scored as positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Same as the sample key: `<session>_t<milliseconds>`.
    pub id: String,
    pub session_id: String,
    pub window_start_s: f64,
    pub score: f64,
    pub status: Status,
    pub decided_at: Option<DateTime<Utc>>,
    pub reviewer_note: Option<String>,
}

impl Candidate {
    pub fn pending(sample: &LabeledSample, score: f64) -> Self {
        Candidate {
            id: sample.key(),
            session_id: sample.session_id.clone(),
            window_start_s: sample.window_start_s,
            score,
            status: Status::Pending,
            decided_at: None,
            reviewer_note: None,
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Candidate {
        id: String,
        session_id: String,
        window_start_s: f64,
        score: f64,
    },
    Decision {
        id: String,
        decision: Decision,
        decided_at: DateTime<Utc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
}

/// Append-only review log plus the status view derived from it.
///
/// When backed by a file, every record is written and synced before the
/// in-memory view changes, so the view never runs ahead of the disk.
#[derive(Debug, Default)]
pub struct ReviewStore {
    records: Vec<LogRecord>,
    view: BTreeMap<String, Candidate>,
    file: Option<(PathBuf, File)>,
}

impl ReviewStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file and replays it. A torn final line left
    /// by an interrupted append is dropped and truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let (mut store, good_len) = Self::replay_text(&text)?;
        if good_len < text.len() {
            log::warn!("{}: dropping incomplete trailing record", path.display());
            let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
            f.set_len(good_len as u64).map_err(|e| Error::io(path, e))?;
            f.sync_all().map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.file = Some((path.to_path_buf(), file));
        Ok(store)
    }

    /// Rebuilds a store from log text without attaching a file.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let (store, good_len) = Self::replay_text(text)?;
        if good_len < text.len() {
            return Err(Error::Format("log ends with an incomplete record".into()));
        }
        Ok(store)
    }

    fn replay_text(text: &str) -> Result<(Self, usize)> {
        let mut store = Self::default();
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let complete = line.ends_with('\n');
            let body = line.trim_end();
            if body.is_empty() {
                offset += line.len();
                continue;
            }
            match serde_json::from_str::<LogRecord>(body) {
                Ok(rec) => {
                    store.apply(&rec).map_err(|e| Error::Format(format!("log line {}: {e}", i + 1)))?;
                    store.records.push(rec);
                }
                Err(_) if !complete => return Ok((store, offset)),
                Err(e) => return Err(Error::Format(format!("log line {}: {e}", i + 1))),
            }
            offset += line.len();
        }
        Ok((store, offset))
    }

    fn check(&self, rec: &LogRecord) -> Result<()> {
        match rec {
            LogRecord::Candidate { id, .. } if self.view.contains_key(id) => {
                Err(Error::Consistency(format!("candidate `{id}` listed twice")))
            }
            LogRecord::Candidate { .. } => Ok(()),
            LogRecord::Decision { id, .. } => match self.view.get(id) {
                None => Err(Error::NotFound(format!("candidate `{id}`"))),
                Some(c) if c.status != Status::Pending => {
                    Err(Error::Conflict(format!("candidate `{id}` is already {}", status_name(c.status))))
                }
                Some(_) => Ok(()),
            },
        }
    }

    fn apply(&mut self, rec: &LogRecord) -> Result<()> {
        self.check(rec)?;
        match rec {
            LogRecord::Candidate {
                id,
                session_id,
                window_start_s,
                score,
            } => {
                self.view.insert(
                    id.clone(),
                    Candidate {
                        id: id.clone(),
                        session_id: session_id.clone(),
                        window_start_s: *window_start_s,
                        score: *score,
                        status: Status::Pending,
                        decided_at: None,
                        reviewer_note: None,
                    },
                );
            }
            LogRecord::Decision {
                id,
                decision,
                decided_at,
                note,
            } => {
                let c = self.view.get_mut(id).expect("checked above");
                c.status = decision.status();
                c.decided_at = Some(*decided_at);
                c.reviewer_note = note.clone();
            }
        }
        Ok(())
    }

    fn append(&mut self, rec: LogRecord) -> Result<()> {
        // a rejected record must never reach the file
        self.check(&rec)?;
        if let Some((path, file)) = &mut self.file {
            let mut line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
            file.sync_data().map_err(|e| Error::io(&*path, e))?;
        }
        self.apply(&rec)?;
        self.records.push(rec);
        Ok(())
    }

    /// Adds candidates whose ids are not yet known; returns how many were new.
    pub fn add_candidates(&mut self, candidates: &[Candidate]) -> Result<usize> {
        let mut added = 0;
        for c in candidates {
            if self.view.contains_key(&c.id) {
                continue;
            }
            self.append(LogRecord::Candidate {
                id: c.id.clone(),
                session_id: c.session_id.clone(),
                window_start_s: c.window_start_s,
                score: c.score,
            })?;
            added += 1;
        }
        Ok(added)
    }

    /// Records a decision on a pending candidate.
    pub fn decide(&mut self, id: &str, decision: Decision, note: Option<String>, at: DateTime<Utc>) -> Result<Candidate> {
        self.append(LogRecord::Decision {
            id: id.to_string(),
            decision,
            decided_at: at,
            note,
        })?;
        Ok(self.view[id].clone())
    }

    pub fn get(&self, id: &str) -> Option<&Candidate> {
        self.view.get(id)
    }

    pub fn len(&self) -> usize {
        self.view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view.is_empty()
    }

    /// Candidates with the given status (all when `None`), score descending
    /// with id as tiebreak.
    pub fn candidates(&self, status: Option<Status>) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = self
            .view
            .values()
            .filter(|c| status.is_none_or(|s| c.status == s))
            .cloned()
            .collect();
        sort_candidates(&mut out);
        out
    }

    pub fn count(&self, status: Status) -> usize {
        self.view.values().filter(|c| c.status == status).count()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Pending => "pending",
        Status::Confirmed => "confirmed",
        Status::Rejected => "rejected",
    }
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MineOptions {
    pub threshold: f64,
    pub limit: Option<usize>,
    /// Re-surface candidates the reviewer already rejected.
    pub include_rejected: bool,
}

impl Default for MineOptions {
    fn default() -> Self {
        MineOptions {
            threshold: 0.5,
            limit: None,
            include_rejected: false,
        }
    }
}

/// Negative samples (any split) scoring at least the threshold on clean
/// features, highest score first.
pub fn mine_candidates(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    registry: &Registry,
    opts: &MineOptions,
    previous: Option<&ReviewStore>,
) -> Result<Vec<Candidate>> {
    let stats = match ckpt.norm_stats {
        Some(s) => s,
        None => manifest.norm_stats()?,
    };
    let rejected: BTreeSet<String> = match previous {
        Some(store) if !opts.include_rejected => store.candidates(Some(Status::Rejected)).into_iter().map(|c| c.id).collect(),
        _ => BTreeSet::new(),
    };
    let negatives: Vec<&LabeledSample> = manifest
        .samples
        .iter()
        .filter(|s| s.label == Label::Negative && !rejected.contains(&s.key()))
        .collect();
    let scores = traineval::score_samples(&ckpt.params, registry, &negatives, &stats)?;
    let mut out: Vec<Candidate> = negatives
        .iter()
        .zip(scores)
        .filter(|(_, score)| *score >= opts.threshold)
        .map(|(s, score)| Candidate::pending(s, score))
        .collect();
    sort_candidates(&mut out);
    if let Some(limit) = opts.limit {
        out.truncate(limit);
    }
    Ok(out)
}

/// Flips confirmed candidates to positive (origin feedback) and bumps the
/// revision. Split, sample order and normalization statistics carry over:
/// features do not depend on labels, so train statistics are unchanged.
pub fn apply_decisions(manifest: &DatasetManifest, store: &ReviewStore) -> Result<DatasetManifest> {
    let index = manifest.index_by_key();
    let mut out = manifest.clone();
    for c in store.candidates(None) {
        let &i = index
            .get(&c.id)
            .ok_or_else(|| Error::Consistency(format!("decision references unknown sample `{}`", c.id)))?;
        if c.status == Status::Confirmed && out.samples[i].label == Label::Negative {
            out.samples[i].label = Label::Positive;
            out.samples[i].origin = Origin::Feedback;
        }
    }
    out.revision += 1;
    Ok(out)
}

/// Inputs of the synthetic mine, confirm, retrain experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub n_sessions: usize,
    pub train_fraction: f64,
    pub model: ModelConfig,
    pub recipe: TrainRecipe,
    pub mine_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig {
                withhold_fraction: 0.5,
                ..SynthConfig::default()
            },
            n_sessions: 20,
            train_fraction: dataset::DEFAULT_TRAIN_FRACTION,
            model: ModelConfig::desk(),
            recipe: TrainRecipe::default(),
            mine_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub seed: u64,
    pub train_before: dataset::ClassCounts,
    pub train_after: dataset::ClassCounts,
    pub n_candidates: usize,
    pub n_confirmed: usize,
    /// Windows positive under the full annotation but negative under the
    /// visible one.
    pub n_hidden_windows: usize,
    pub recovered_fraction: f64,
    /// Pre-feedback model on the original test labels.
    pub before: Metrics,
    /// Retrained model on the revised test labels.
    pub after: Metrics,
    /// Both models against the full annotation.
    pub before_truth: Metrics,
    pub after_truth: Metrics,
}

fn with_annotations(s: &RecordingSession, ann: &[crate::audio_io::Annotation]) -> Result<RecordingSession> {
    RecordingSession::new(s.id.clone(), s.clip.clone(), ann.to_vec())
}

fn test_metrics(scores: &[f64], idx: &[usize], manifest: &DatasetManifest, threshold: f64) -> Metrics {
    let labels: Vec<bool> = idx.iter().map(|&i| manifest.samples[i].label.is_positive()).collect();
    Metrics::from_scores(scores, &labels, threshold)
}

/// Synthesizes a corpus with withheld calls, trains on the visible labels,
/// mines candidates, lets an oracle confirm those whose window is positive
/// under the withheld annotation (same coverage rule), applies the
/// decisions and retrains from scratch.
pub fn feedback_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<FeedbackReport> {
    let corpus = synth::synth_corpus(&cfg.synth, cfg.n_sessions, seed)?;
    let registry = Registry::from_sessions(corpus.iter().map(|s| s.session.clone()));
    let visible = DatasetManifest::from_sessions(corpus.iter().map(|s| &s.session), seed);
    let manifest = dataset::split_train_test(&visible, cfg.train_fraction, seed, &registry)?;

    let truth_sessions = corpus
        .iter()
        .map(|s| with_annotations(&s.session, &s.ground_truth()))
        .collect::<Result<Vec<_>>>()?;
    let hidden_sessions = corpus
        .iter()
        .map(|s| with_annotations(&s.session, &s.hidden))
        .collect::<Result<Vec<_>>>()?;
    let mut truth = DatasetManifest::from_sessions(&truth_sessions, seed);
    for (t, m) in truth.samples.iter_mut().zip(&manifest.samples) {
        t.split = m.split;
    }
    let hidden_positive: BTreeSet<String> = DatasetManifest::from_sessions(&hidden_sessions, seed)
        .samples
        .iter()
        .zip(&manifest.samples)
        .filter(|(h, m)| h.label.is_positive() && !m.label.is_positive())
        .map(|(h, _)| h.key())
        .collect();

    let recipe = TrainRecipe { seed, ..cfg.recipe };
    let first = traineval::train(&manifest, &registry, &cfg.model, &recipe)?;
    let stats = manifest.norm_stats()?;
    let (test_idx, before_scores) = traineval::score_split(&first.checkpoint.params, &manifest, &registry, Split::Test, &stats)?;

    let opts = MineOptions {
        threshold: cfg.mine_threshold,
        ..MineOptions::default()
    };
    let candidates = mine_candidates(&first.checkpoint, &manifest, &registry, &opts, None)?;
    let mut store = ReviewStore::in_memory();
    store.add_candidates(&candidates)?;
    let at = DateTime::<Utc>::UNIX_EPOCH;
    for c in &candidates {
        let d = if hidden_positive.contains(&c.id) {
            Decision::Confirm
        } else {
            Decision::Reject
        };
        store.decide(&c.id, d, Some("oracle".into()), at)?;
    }
    let revised = apply_decisions(&manifest, &store)?;
    let n_confirmed = store.count(Status::Confirmed);

    let second = traineval::train(&revised, &registry, &cfg.model, &recipe)?;
    let (_, after_scores) = traineval::score_split(&second.checkpoint.params, &revised, &registry, Split::Test, &stats)?;

    let t = 0.5;
    Ok(FeedbackReport {
        seed,
        train_before: manifest.counts().train,
        train_after: revised.counts().train,
        n_candidates: candidates.len(),
        n_confirmed,
        n_hidden_windows: hidden_positive.len(),
        recovered_fraction: if hidden_positive.is_empty() {
            0.0
        } else {
            n_confirmed as f64 / hidden_positive.len() as f64
        },
        before: test_metrics(&before_scores, &test_idx, &manifest, t),
        after: test_metrics(&after_scores, &test_idx, &revised, t),
        before_truth: test_metrics(&before_scores, &test_idx, &truth, t),
        after_truth: test_metrics(&after_scores, &test_idx, &truth, t),
    })
}
