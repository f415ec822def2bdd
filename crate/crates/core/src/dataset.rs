//! Windowed, labelled and split datasets.
//!
//! Sessions are cut into 1 s windows every 0.5 s. A window is positive when
//! at least half of some annotated call lies inside it. The manifest keeps
//! only window references into the session registry; features are
//! recomputed on demand, which is what makes per-epoch noise injection cheap
//! to express.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{self, cut_samples, AudioClip, RecordingSession, SAMPLE_RATE_HZ};
use crate::dsp::{self, FeatureExtractor, FilterbankFeature, NormStats, StatsAccumulator};
use crate::error::{Error, Result};
use crate::seed;

pub const WINDOW_S: f64 = 1.0;
pub const HOP_S: f64 = 0.5;
const WINDOW_SAMPLES: usize = 48_000;
const HOP_SAMPLES: usize = 24_000;

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_SNR_DB: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Expert,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub session_id: String,
    pub window_start_s: f64,
    pub label: Label,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl LabeledSample {
    /// Stable identifier derived from the window position.
    pub fn key(&self) -> String {
        sample_key(&self.session_id, self.window_start_s)
    }

    pub fn start_sample(&self) -> usize {
        (self.window_start_s * SAMPLE_RATE_HZ as f64).round() as usize
    }
}

pub fn sample_key(session_id: &str, window_start_s: f64) -> String {
    format!("{session_id}_t{}", (window_start_s * 1000.0).round() as u64)
}

/// When does a window count as containing a call?
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelRule {
    /// At least this fraction of a call's duration lies inside the window.
    CallCoverage(f64),
    /// At least this fraction of the window is covered by a single call.
    WindowCoverage(f64),
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule::CallCoverage(0.5)
    }
}

impl LabelRule {
    pub fn is_positive(&self, overlap_s: f64, call_s: f64, window_s: f64) -> bool {
        match *self {
            LabelRule::CallCoverage(f) => overlap_s > 0.0 && overlap_s / call_s >= f,
            LabelRule::WindowCoverage(f) => overlap_s > 0.0 && overlap_s / window_s >= f,
        }
    }
}

/// Number of windows for a session of `n_samples`: full windows every hop,
/// plus one zero-filled tail window when the last full window stops short
/// of the end. Sessions shorter than a window still get one window.
pub fn window_count(n_samples: usize) -> usize {
    if n_samples <= WINDOW_SAMPLES {
        1
    } else {
        (n_samples - WINDOW_SAMPLES).div_ceil(HOP_SAMPLES) + 1
    }
}

pub fn window_and_label(session: &RecordingSession) -> Vec<LabeledSample> {
    window_and_label_with(session, LabelRule::default())
}

pub fn window_and_label_with(session: &RecordingSession, rule: LabelRule) -> Vec<LabeledSample> {
    let n = window_count(session.clip.len());
    let mut positive = vec![false; n];
    for a in &session.annotations {
        // windows k with k*hop < end and k*hop + window > start
        let first = ((a.start_s - WINDOW_S) / HOP_S).floor().max(0.0) as usize;
        let last = ((a.end_s / HOP_S).ceil() as usize).min(n);
        for (k, pos) in positive.iter_mut().enumerate().take(last).skip(first) {
            let ws = k as f64 * HOP_S;
            if rule.is_positive(a.overlap_s(ws, ws + WINDOW_S), a.duration_s(), WINDOW_S) {
                *pos = true;
            }
        }
    }
    positive
        .into_iter()
        .enumerate()
        .map(|(k, pos)| LabeledSample {
            session_id: session.id.clone(),
            window_start_s: k as f64 * HOP_S,
            label: if pos { Label::Positive } else { Label::Negative },
            origin: Origin::Expert,
            split: None,
        })
        .collect()
}

/// Adds white Gaussian noise at `snr_db` relative to the clip's mean power.
/// Silent clips are returned unchanged.
pub fn inject_noise<R: Rng>(clip: &AudioClip, snr_db: f64, rng: &mut R) -> AudioClip {
    let p = clip.power();
    if p <= 0.0 {
        return clip.clone();
    }
    let std = (p / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    AudioClip {
        samples: clip
            .samples
            .iter()
            .map(|&x| (x as f64 + normal.sample(rng)) as f32)
            .collect(),
        sample_rate_hz: clip.sample_rate_hz,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.n_pos + self.n_neg
    }

    pub fn positive_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.n_pos as f64 / self.total() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: ClassCounts,
    pub test: ClassCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub pos: f64,
    pub neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { pos: 1.0, neg: 1.0 };

    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Positive => self.pos,
            Label::Negative => self.neg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<LabeledSample>,
    /// Computed on the train split only; `None` until split.
    pub norm_stats: Option<NormStats>,
    pub seed: u64,
    pub train_fraction: f64,
    /// Bumped every time review decisions are merged.
    pub revision: u32,
    /// Session registry directory the windows refer to, if on disk.
    pub registry: Option<PathBuf>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn from_sessions<'a>(sessions: impl IntoIterator<Item = &'a RecordingSession>, seed: u64) -> Self {
        Self::from_sessions_with(sessions, seed, LabelRule::default())
    }

    pub fn from_sessions_with<'a>(
        sessions: impl IntoIterator<Item = &'a RecordingSession>,
        seed: u64,
        rule: LabelRule,
    ) -> Self {
        let samples = sessions
            .into_iter()
            .flat_map(|s| window_and_label_with(s, rule))
            .collect();
        DatasetManifest {
            samples,
            norm_stats: None,
            seed,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            revision: 0,
            registry: None,
            warnings: Vec::new(),
        }
    }

    pub fn is_split(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.split.is_some())
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in &self.samples {
            let slot = match s.split {
                Some(Split::Train) => &mut c.train,
                Some(Split::Test) => &mut c.test,
                None => continue,
            };
            match s.label {
                Label::Positive => slot.n_pos += 1,
                Label::Negative => slot.n_neg += 1,
            }
        }
        c
    }

    /// Counts over every sample regardless of split.
    pub fn total_counts(&self) -> ClassCounts {
        let n_pos = self.samples.iter().filter(|s| s.label.is_positive()).count();
        ClassCounts {
            n_pos,
            n_neg: self.samples.len() - n_pos,
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        self.norm_stats
            .ok_or_else(|| Error::State("manifest has no normalization statistics (not split yet)".into()))
    }

    pub fn index_by_key(&self) -> BTreeMap<String, usize> {
        self.samples.iter().enumerate().map(|(i, s)| (s.key(), i)).collect()
    }

    /// Equality of dataset content, ignoring the revision stamp and warnings.
    pub fn same_content(&self, other: &DatasetManifest) -> bool {
        self.samples == other.samples
            && self.norm_stats == other.norm_stats
            && self.seed == other.seed
            && self.train_fraction == other.train_fraction
    }
}

/// Sessions addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    pub sessions: BTreeMap<String, RecordingSession>,
}

impl Registry {
    pub fn from_sessions(sessions: impl IntoIterator<Item = RecordingSession>) -> Self {
        Registry {
            sessions: sessions.into_iter().map(|s| (s.id.clone(), s)).collect(),
        }
    }

    /// Loads every `<id>.wav` in `dir` with its `<id>.csv` annotations.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut ids: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Error::arg(format!("no .wav sessions found in {}", dir.display())));
        }
        let sessions = ids
            .par_iter()
            .map(|id| Self::load_session(dir, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_sessions(sessions))
    }

    pub fn load_session(dir: &Path, id: &str) -> Result<RecordingSession> {
        let csv = dir.join(format!("{id}.csv"));
        if !csv.exists() {
            return Err(Error::arg(format!("session `{id}` has no annotation file {}", csv.display())));
        }
        let clip = audio_io::load_wav(dir.join(format!("{id}.wav")))?;
        let annotations = audio_io::load_annotations(&csv)?;
        RecordingSession::new(id, clip, annotations)
    }

    pub fn get(&self, id: &str) -> Result<&RecordingSession> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::Consistency(format!("session `{id}` is not in the registry")))
    }

    pub fn window_clip(&self, sample: &LabeledSample) -> Result<AudioClip> {
        let session = self.get(&sample.session_id)?;
        Ok(cut_samples(&session.clip, sample.start_sample(), WINDOW_SAMPLES))
    }

    /// Un-normalized log-Mel feature of a sample's window.
    pub fn raw_feature(&self, sample: &LabeledSample) -> Result<FilterbankFeature> {
        FeatureExtractor::shared().log_mel(&self.window_clip(sample)?)
    }

    /// Normalized feature, optionally with waveform noise injected first.
    pub fn feature<R: Rng>(
        &self,
        sample: &LabeledSample,
        stats: &NormStats,
        noise: Option<(f64, &mut R)>,
    ) -> Result<FilterbankFeature> {
        let mut clip = self.window_clip(sample)?;
        if let Some((snr_db, rng)) = noise {
            clip = inject_noise(&clip, snr_db, rng);
        }
        dsp::normalize(&FeatureExtractor::shared().log_mel(&clip)?, stats)
    }
}

/// Clean-feature statistics over the train split.
pub fn train_stats(manifest: &DatasetManifest, registry: &Registry) -> Result<NormStats> {
    let train = manifest.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::arg("train split is empty"));
    }
    let parts = train
        .par_iter()
        .map(|&i| {
            let f = registry.raw_feature(&manifest.samples[i])?;
            let mut acc = StatsAccumulator::default();
            acc.push_feature(&f);
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    // merge in index order so the result does not depend on scheduling
    let mut acc = StatsAccumulator::default();
    for p in parts {
        acc.merge(p);
    }
    acc.finish()
}

/// Uniform random sample-level split; recomputes train-split statistics.
pub fn split_train_test(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
    registry: &Registry,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::arg(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    if manifest.samples.iter().any(|s| s.split.is_some()) {
        return Err(Error::State("manifest is already split".into()));
    }
    let mut out = manifest.clone();
    assign_split(&mut out, train_fraction, seed);
    out.norm_stats = Some(train_stats(&out, registry)?);
    Ok(out)
}

/// Split assignment alone, without computing statistics.
pub fn assign_split(manifest: &mut DatasetManifest, train_fraction: f64, seed: u64) {
    let n = manifest.samples.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, &[seed::stream::SPLIT]));
    for (rank, &i) in order.iter().enumerate() {
        manifest.samples[i].split = Some(if rank < n_train { Split::Train } else { Split::Test });
    }
    manifest.seed = seed;
    manifest.train_fraction = train_fraction;
    manifest.warnings.retain(|w| !w.starts_with("train split has no positive"));
    if manifest.counts().train.n_pos == 0 {
        let msg = "train split has no positive samples".to_string();
        log::warn!("{msg}");
        manifest.warnings.push(msg);
    }
}

/// `w_pos = 1`, `w_neg = 20 * n_pos / n_neg` on the train split.
pub fn class_weights(manifest: &DatasetManifest) -> Result<ClassWeights> {
    class_weights_for(manifest.counts().train)
}

pub fn class_weights_for(train: ClassCounts) -> Result<ClassWeights> {
    if train.n_pos == 0 || train.n_neg == 0 {
        return Err(Error::DegenerateData(format!(
            "class weights need both classes in the train split (n_pos = {}, n_neg = {})",
            train.n_pos, train.n_neg
        )));
    }
    Ok(ClassWeights {
        pos: 1.0,
        neg: 20.0 * train.n_pos as f64 / train.n_neg as f64,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    seed: u64,
    train_fraction: f64,
    revision: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    registry: Option<PathBuf>,
    norm_stats: NormStats,
    counts: SplitCounts,
    #[serde(default)]
    warnings: Vec<String>,
    samples: Vec<LabeledSample>,
}

const MANIFEST_FIELDS: &[&str] = &[
    "version",
    "seed",
    "train_fraction",
    "revision",
    "registry",
    "norm_stats",
    "counts",
    "warnings",
    "samples",
];

pub fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    let norm_stats = manifest.norm_stats()?;
    if !manifest.is_split() {
        return Err(Error::State("only split manifests can be saved".into()));
    }
    let file = ManifestFile {
        version: MANIFEST_VERSION,
        seed: manifest.seed,
        train_fraction: manifest.train_fraction,
        revision: manifest.revision,
        registry: manifest.registry.clone(),
        norm_stats,
        counts: manifest.counts(),
        warnings: manifest.warnings.clone(),
        samples: manifest.samples.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
}

/// Parses a manifest, returning warnings for fields this version ignores.
pub fn manifest_from_str(text: &str) -> Result<(DatasetManifest, Vec<String>)> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Format("manifest must be a JSON object".into()))?;
    let found = obj
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest has no version".into()))? as u32;
    if found != MANIFEST_VERSION {
        return Err(Error::Version {
            found,
            expected: MANIFEST_VERSION,
        });
    }
    let warnings: Vec<String> = obj
        .keys()
        .filter(|k| !MANIFEST_FIELDS.contains(&k.as_str()))
        .map(|k| format!("ignoring unknown manifest field `{k}`"))
        .collect();
    let file: ManifestFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let manifest = DatasetManifest {
        samples: file.samples,
        norm_stats: Some(file.norm_stats),
        seed: file.seed,
        train_fraction: file.train_fraction,
        revision: file.revision,
        registry: file.registry,
        warnings: file.warnings,
    };
    if !manifest.is_split() {
        return Err(Error::Format("every manifest sample needs a split".into()));
    }
    if manifest.counts() != file.counts {
        return Err(Error::Format(format!(
            "stored counts {:?} disagree with samples {:?}",
            file.counts,
            manifest.counts()
        )));
    }
    if !(manifest.norm_stats()?.std > 0.0) {
        return Err(Error::Format("norm_stats.std must be positive".into()));
    }
    let mut keys = BTreeSet::new();
    for s in &manifest.samples {
        if !keys.insert(s.key()) {
            return Err(Error::Format(format!("duplicate sample {}", s.key())));
        }
    }
    Ok((manifest, warnings))
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    crate::fsutil::write_atomic(path, manifest_to_string(manifest)?.as_bytes())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (manifest, warnings) = manifest_from_str(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(manifest)
}
