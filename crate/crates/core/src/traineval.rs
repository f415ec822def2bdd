//! Training loop, threshold metrics, precision-recall sweep and run
//! comparison.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, LabeledSample, Registry, Split};
use crate::dsp::{FilterbankFeature, NormStats};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{self, AdamConfig, Checkpoint, ModelConfig, Parameters};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// SNR of the waveform noise injected into every training window.
    pub snr_db: f64,
    pub seed: u64,
    /// Reduce per-sample gradients in sample order so results do not depend
    /// on thread scheduling. When off, gradients are summed per worker.
    pub deterministic: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: 25,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 5e-7,
            snr_db: dataset::DEFAULT_SNR_DB,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::arg(format!("learning rate {} must be positive", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Confusion counts at one threshold and the derived scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize, threshold: f64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            threshold,
        }
    }

    /// Predicted positive iff `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn, threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    /// Mean weighted loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean weighted loss of the initial model on the first epoch's inputs.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Normalized clean features for the given samples, in order.
pub fn clean_features(registry: &Registry, samples: &[&LabeledSample], stats: &NormStats) -> Result<Vec<FilterbankFeature>> {
    samples
        .par_iter()
        .map(|s| registry.feature::<rand_chacha::ChaCha8Rng>(s, stats, None))
        .collect()
}

/// Training features for one epoch; every window gets fresh noise drawn from
/// a stream keyed by (seed, epoch, sample index).
fn noisy_features(
    registry: &Registry,
    manifest: &DatasetManifest,
    indices: &[usize],
    stats: &NormStats,
    recipe: &TrainRecipe,
    epoch: u32,
) -> Result<Vec<FilterbankFeature>> {
    indices
        .par_iter()
        .map(|&i| {
            let mut rng = seed::rng_for(recipe.seed, &[seed::stream::NOISE, epoch as u64, i as u64]);
            registry.feature(&manifest.samples[i], stats, Some((recipe.snr_db, &mut rng)))
        })
        .collect()
}

/// Mean loss and mean gradient over a batch.
fn batch_gradient(
    params: &Parameters,
    features: &[&FilterbankFeature],
    labels: &[f64],
    weights: dataset::ClassWeights,
    deterministic: bool,
) -> Result<(f64, Parameters)> {
    let one = |f: &FilterbankFeature, y: f64| model::backward(params, f, y, weights);
    let (loss_sum, mut grads) = if deterministic {
        let parts = features
            .par_iter()
            .zip(labels)
            .map(|(f, &y)| one(f, y))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = params.zeros_like();
        let mut loss_sum = 0.0;
        for (l, _, g) in parts {
            loss_sum += l;
            grads.accumulate(&g);
        }
        (loss_sum, grads)
    } else {
        features
            .par_iter()
            .zip(labels)
            .try_fold(
                || (0.0, params.zeros_like()),
                |(acc_l, mut acc_g), (f, &y)| {
                    let (l, _, g) = one(f, y)?;
                    acc_g.accumulate(&g);
                    Ok::<_, Error>((acc_l + l, acc_g))
                },
            )
            .try_reduce(
                || (0.0, params.zeros_like()),
                |(la, mut ga), (lb, gb)| {
                    ga.accumulate(&gb);
                    Ok((la + lb, ga))
                },
            )?
    };
    let n = features.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss_sum / n, grads))
}

/// Trains a freshly initialized model on the train split.
pub fn train(manifest: &DatasetManifest, registry: &Registry, config: &ModelConfig, recipe: &TrainRecipe) -> Result<TrainOutcome> {
    let params = Parameters::init(*config, recipe.seed)?;
    train_from(manifest, registry, Checkpoint::new(params), recipe)
}

/// Continues training `start` for `recipe.epochs` further epochs; the
/// learning-rate schedule picks up at `start.epoch`.
pub fn train_from(manifest: &DatasetManifest, registry: &Registry, start: Checkpoint, recipe: &TrainRecipe) -> Result<TrainOutcome> {
    recipe.validate()?;
    if !manifest.is_split() {
        return Err(Error::State("manifest has no train/test split".into()));
    }
    let stats = manifest.norm_stats()?;
    let train_idx = manifest.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::arg("train split is empty"));
    }
    let weights = dataset::class_weights(manifest)?;
    let test_idx = manifest.split_indices(Split::Test);
    let test_samples: Vec<&LabeledSample> = test_idx.iter().map(|&i| &manifest.samples[i]).collect();
    let test_labels: Vec<bool> = test_samples.iter().map(|s| s.label.is_positive()).collect();
    let test_features = clean_features(registry, &test_samples, &stats)?;

    let adam = AdamConfig {
        weight_decay: recipe.weight_decay,
        ..AdamConfig::default()
    };
    let mut ckpt = start;
    ckpt.norm_stats = Some(stats);
    let mut records = Vec::with_capacity(recipe.epochs as usize);
    let mut initial_loss = f64::NAN;

    for e in 0..recipe.epochs {
        let epoch = ckpt.epoch;
        let lr = model::lr_at_epoch(recipe.base_lr, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::rng_for(recipe.seed, &[seed::stream::SHUFFLE, epoch as u64]));
        let features = noisy_features(registry, manifest, &order, &stats, recipe, epoch)?;
        let labels: Vec<f64> = order.iter().map(|&i| manifest.samples[i].label.as_f64()).collect();
        if e == 0 {
            let scores = model::score_features(&ckpt.params, &features)?;
            initial_loss = scores
                .iter()
                .zip(&labels)
                .map(|(&s, &y)| model::loss(s, y, weights.pos, weights.neg))
                .sum::<f64>()
                / scores.len() as f64;
        }

        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (fs, ys) in features.chunks(recipe.batch_size).zip(labels.chunks(recipe.batch_size)) {
            let refs: Vec<&FilterbankFeature> = fs.iter().collect();
            let (l, grads) = batch_gradient(&ckpt.params, &refs, ys, weights, recipe.deterministic)?;
            model::adam_step(&mut ckpt.params, &grads, &mut ckpt.optimizer, lr, &adam)?;
            loss_sum += l;
            n_batches += 1;
        }
        ckpt.epoch += 1;

        let test = if test_features.is_empty() {
            None
        } else {
            let scores = model::score_features(&ckpt.params, &test_features)?;
            Some(Metrics::from_scores(&scores, &test_labels, 0.5))
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n_batches as f64,
            test,
        };
        match &record.test {
            Some(m) => log::info!(
                "epoch {:>2}  lr {:.3e}  loss {:.4}  test P {:.3} R {:.3} F1 {:.3}",
                epoch,
                lr,
                record.train_loss,
                m.precision,
                m.recall,
                m.f1
            ),
            None => log::info!("epoch {:>2}  lr {:.3e}  loss {:.4}", epoch, lr, record.train_loss),
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        history: TrainHistory {
            initial_loss,
            epochs: records,
        },
    })
}

/// Clean-feature scores for every sample of `split`, with their indices.
pub fn score_split(params: &Parameters, manifest: &DatasetManifest, registry: &Registry, split: Split, stats: &NormStats) -> Result<(Vec<usize>, Vec<f64>)> {
    let idx = manifest.split_indices(split);
    let samples: Vec<&LabeledSample> = idx.iter().map(|&i| &manifest.samples[i]).collect();
    let scores = score_samples(params, registry, &samples, stats)?;
    Ok((idx, scores))
}

/// Scores samples without noise injection, in input order.
pub fn score_samples(params: &Parameters, registry: &Registry, samples: &[&LabeledSample], stats: &NormStats) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model::forward(params, &registry.feature::<rand_chacha::ChaCha8Rng>(s, stats, None)?))
        .collect()
}

/// Statistics stored with the checkpoint, falling back to the manifest's.
fn stats_for(ckpt: &Checkpoint, manifest: &DatasetManifest) -> Result<NormStats> {
    match ckpt.norm_stats {
        Some(s) => Ok(s),
        None => manifest.norm_stats(),
    }
}

/// Scores and labels of one split, scored with clean features.
pub fn split_scores(ckpt: &Checkpoint, manifest: &DatasetManifest, registry: &Registry, split: Split) -> Result<(Vec<f64>, Vec<bool>)> {
    let stats = stats_for(ckpt, manifest)?;
    let (idx, scores) = score_split(&ckpt.params, manifest, registry, split, &stats)?;
    if idx.is_empty() {
        return Err(Error::arg(format!("{split} split is empty")));
    }
    let labels = idx.iter().map(|&i| manifest.samples[i].label.is_positive()).collect();
    Ok((scores, labels))
}

pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, registry: &Registry, split: Split, threshold: f64) -> Result<Metrics> {
    let (scores, labels) = split_scores(ckpt, manifest, registry, split)?;
    Ok(Metrics::from_scores(&scores, &labels, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

/// Threshold sweep over every distinct score; AP is the step sum
/// `sum_k (R_k - R_{k-1}) * P_k` with `R_0 = 0`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", scores.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::arg(format!("score {s} is not a number")));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::arg("precision-recall curve needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }
    Ok(PrCurve {
        points,
        average_precision: ap,
    })
}

pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    out
}

pub fn save_pr_curve(path: impl AsRef<Path>, curve: &PrCurve) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), pr_curve_csv(curve).as_bytes())
}

/// One JSON record per epoch, preceded by a record holding the initial loss.
pub fn history_jsonl(history: &TrainHistory) -> Result<String> {
    let to_json = |v: serde_json::Value| serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string()));
    let mut out = to_json(serde_json::json!({ "initial_loss": history.initial_loss }))?;
    out.push('\n');
    for r in &history.epochs {
        out.push_str(&to_json(serde_json::to_value(r).map_err(|e| Error::Format(e.to_string()))?)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_history(path: impl AsRef<Path>, history: &TrainHistory) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), history_jsonl(history)?.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    /// Mean of per-run F1, not F1 of the mean precision and recall.
    pub f1: MeanStd,
}

impl RunSummary {
    pub fn of(runs: &[Metrics]) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::arg(format!("need at least 2 runs per arm, got {}", runs.len())));
        }
        let col = |f: fn(&Metrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(RunSummary {
            n_runs: runs.len(),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub rows: Vec<(String, RunSummary)>,
}

pub fn compare_runs(a: (&str, &[Metrics]), b: (&str, &[Metrics])) -> Result<RunComparison> {
    Ok(RunComparison {
        rows: vec![(a.0.to_string(), RunSummary::of(a.1)?), (b.0.to_string(), RunSummary::of(b.1)?)],
    })
}

fn cell(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", m.mean, m.std)
}

/// Fixed-width text table with a `Dataset | Precision | Recall | F1-score`
/// header and one row per arm.
pub fn format_comparison(cmp: &RunComparison) -> String {
    let width = cmp.rows.iter().map(|(name, _)| name.chars().count()).max().unwrap_or(0).max("Dataset".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<12}  {:<12}  F1-score", "Dataset", "Precision", "Recall");
    for (name, s) in &cmp.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<12}  {:<12}  {}",
            name,
            cell(&s.precision),
            cell(&s.recall),
            cell(&s.f1)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_arithmetic() {
        let m = Metrics::from_counts(91, 9, 6, 0, 0.5);
        assert!((m.precision - 0.910).abs() < 5e-4);
        assert!((m.recall - 0.938).abs() < 5e-4);
        assert!((m.f1 - 0.924).abs() < 5e-4);
    }

    #[test]
    fn zero_denominators_give_zero() {
        let m = Metrics::from_counts(0, 0, 0, 10, 0.5);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn all_correct_is_perfect() {
        let m = Metrics::from_scores(&[0.9, 0.1, 0.7], &[true, false, true], 0.5);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_pr_example() {
        let c = pr_curve(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        let p: Vec<f64> = c.points.iter().map(|p| p.precision).collect();
        let r: Vec<f64> = c.points.iter().map(|p| p.recall).collect();
        assert_eq!(p, vec![1.0, 0.5, 2.0 / 3.0]);
        assert_eq!(r, vec![0.5, 0.5, 1.0]);
        assert!((c.average_precision - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_ap_one() {
        let labels = [true, false, true, false];
        let scores: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        assert_eq!(pr_curve(&scores, &labels).unwrap().average_precision, 1.0);
    }

    #[test]
    fn pr_needs_positive() {
        assert!(matches!(pr_curve(&[0.3], &[false]), Err(Error::Argument(_))));
    }

    #[test]
    fn two_run_summary() {
        let runs = [Metrics::from_counts(9, 1, 1, 0, 0.5), Metrics::from_counts(9, 1, 1, 0, 0.5)];
        let mut a = runs;
        a[0].f1 = 0.90;
        a[1].f1 = 0.94;
        let s = RunSummary::of(&a).unwrap();
        assert!((s.f1.mean - 0.92).abs() < 1e-12);
        assert!((s.f1.std - 0.02).abs() < 1e-12);
        assert_eq!(RunSummary::of(&runs).unwrap().precision.std, 0.0);
        assert!(RunSummary::of(&runs[..1]).is_err());
    }

    #[test]
    fn recipe_rejects_zero_epochs() {
        let r = TrainRecipe {
            epochs: 0,
            ..TrainRecipe::default()
        };
        assert!(matches!(r.validate(), Err(Error::Argument(_))));
    }
}
