//! Log-Mel filterbank features.
//!
//! A 1 s clip (48000 samples) is framed into 128 Hamming-windowed frames of
//! 750 samples with a 375-sample hop (50% overlap). The clip is zero-padded
//! at the tail to 48375 samples so the frame count is exact. Each frame's
//! 750-point power spectrum (376 bins, 64 Hz apart) is pooled by 64
//! triangular Mel filters spanning 2–24 kHz and log-compressed.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioClip, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

pub const CLIP_SAMPLES: usize = 48_000;
pub const FRAME_LEN: usize = 750;
pub const HOP: usize = 375;
pub const N_FRAMES: usize = 128;
pub const N_FFT_BINS: usize = FRAME_LEN / 2 + 1;
pub const N_MELS: usize = 64;
pub const FMIN_HZ: f64 = 2_000.0;
pub const FMAX_HZ: f64 = 24_000.0;
/// Floor added before the logarithm so silence maps to ln(1e-10).
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::arg(format!("window length must be >= 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
        .collect())
}

/// HTK Mel scale.
pub fn mel_scale(f_hz: f64) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(Error::arg(format!("frequency must be >= 0, got {f_hz}")));
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filters sampled at FFT bin centre frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Row-major `n_mels x n_fft_bins`.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_fft_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub centers_hz: Vec<f64>,
    /// Per filter, the half-open range of bins with nonzero weight.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_fft_bins..(m + 1) * self.n_fft_bins]
    }

    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * SAMPLE_RATE_HZ as f64 / (2 * (self.n_fft_bins - 1)) as f64
    }

    /// Index of the filter whose centre is closest to `f_hz`.
    pub fn nearest_filter(&self, f_hz: f64) -> usize {
        self.centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f_hz).abs().total_cmp(&(b.1 - f_hz).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Applies the bank to one power spectrum.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            let (lo, hi) = self.support[m];
            let row = self.row(m);
            *o = (lo..hi).map(|k| row[k] * power[k]).sum();
        }
    }
}

/// Builds `n_mels` triangles from `n_mels + 2` edges equally spaced in Mel
/// between `fmin` and `fmax`; filter `i` peaks at edge `i + 1`.
pub fn build_mel_filterbank(n_fft_bins: usize, n_mels: usize, fmin_hz: f64, fmax_hz: f64) -> Result<MelFilterbank> {
    let nyquist = SAMPLE_RATE_HZ as f64 / 2.0;
    if n_fft_bins < 2 || n_mels == 0 {
        return Err(Error::arg("filterbank needs >= 2 FFT bins and >= 1 filter"));
    }
    if fmax_hz > nyquist {
        return Err(Error::arg(format!("fmax {fmax_hz} Hz exceeds Nyquist {nyquist} Hz")));
    }
    if !(0.0 <= fmin_hz && fmin_hz < fmax_hz) {
        return Err(Error::arg(format!("need 0 <= fmin < fmax, got [{fmin_hz}, {fmax_hz}]")));
    }
    let (mel_lo, mel_hi) = (mel_scale(fmin_hz)?, mel_scale(fmax_hz)?);
    let n_edges = n_mels + 2;
    let edges: Vec<f64> = (0..n_edges)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_edges - 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * nyquist / (n_fft_bins - 1) as f64;

    let mut weights = vec![0.0; n_mels * n_fft_bins];
    let mut support = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_fft_bins..(m + 1) * n_fft_bins];
        let (mut lo, mut hi) = (n_fft_bins, 0);
        for (k, w) in row.iter_mut().enumerate() {
            let f = bin_hz(k);
            let v = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if v > 0.0 {
                *w = v;
                lo = lo.min(k);
                hi = hi.max(k + 1);
            }
        }
        if lo >= hi {
            return Err(Error::arg(format!(
                "filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer filters or finer bins"
            )));
        }
        support.push((lo, hi));
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_fft_bins,
        fmin_hz,
        fmax_hz,
        centers_hz: edges[1..=n_mels].to_vec(),
        support,
    })
}

/// A `(64, 128)` log-Mel matrix, row-major with Mel bins as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankFeature {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FilterbankFeature {
    pub const ROWS: usize = N_MELS;
    pub const COLS: usize = N_FRAMES;

    pub fn from_values(values: Vec<f64>, normalized: bool) -> Result<Self> {
        if values.len() != N_MELS * N_FRAMES {
            return Err(Error::Shape {
                expected: format!("{} values", N_MELS * N_FRAMES),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(FilterbankFeature { values, normalized })
    }

    pub fn shape(&self) -> (usize, usize) {
        (N_MELS, self.values.len() / N_MELS)
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * N_FRAMES + frame]
    }
}

/// Reusable FFT plan, window and filterbank.
pub struct FeatureExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new() -> Self {
        FeatureExtractor {
            window: hamming_window(FRAME_LEN).expect("frame length is valid"),
            fft: FftPlanner::new().plan_fft_forward(FRAME_LEN),
            bank: build_mel_filterbank(N_FFT_BINS, N_MELS, FMIN_HZ, FMAX_HZ).expect("canonical bank is valid"),
        }
    }

    /// Process-wide shared instance.
    pub fn shared() -> &'static FeatureExtractor {
        static EXTRACTOR: OnceLock<FeatureExtractor> = OnceLock::new();
        EXTRACTOR.get_or_init(FeatureExtractor::new)
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Returns a row-major `N_FFT_BINS x N_FRAMES` power spectrogram.
    pub fn stft_power(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        if clip.samples.len() != CLIP_SAMPLES || clip.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::Shape {
                expected: format!("{CLIP_SAMPLES} samples at {SAMPLE_RATE_HZ} Hz"),
                actual: format!("{} samples at {} Hz", clip.samples.len(), clip.sample_rate_hz),
            });
        }
        let mut out = vec![0.0; N_FFT_BINS * N_FRAMES];
        let mut buf = vec![Complex::new(0.0, 0.0); FRAME_LEN];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..N_FRAMES {
            let start = t * HOP;
            for (k, slot) in buf.iter_mut().enumerate() {
                let x = clip.samples.get(start + k).copied().unwrap_or(0.0) as f64;
                *slot = Complex::new(x * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(N_FFT_BINS).enumerate() {
                out[k * N_FRAMES + t] = c.norm_sqr();
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<FilterbankFeature> {
        let power = self.stft_power(clip)?;
        let mut values = vec![0.0; N_MELS * N_FRAMES];
        let mut frame = vec![0.0; N_FFT_BINS];
        let mut mel = vec![0.0; N_MELS];
        for t in 0..N_FRAMES {
            for (k, p) in frame.iter_mut().enumerate() {
                *p = power[k * N_FRAMES + t];
            }
            self.bank.apply(&frame, &mut mel);
            for (m, e) in mel.iter().enumerate() {
                values[m * N_FRAMES + t] = (e + LOG_FLOOR).ln();
            }
        }
        Ok(FilterbankFeature {
            values,
            normalized: false,
        })
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

pub fn stft_power(clip: &AudioClip) -> Result<Vec<f64>> {
    FeatureExtractor::shared().stft_power(clip)
}

pub fn log_mel(clip: &AudioClip) -> Result<FilterbankFeature> {
    FeatureExtractor::shared().log_mel(clip)
}

/// Global scalar normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Streaming mean/variance over feature entries (Chan et al. merge), so
/// statistics can be accumulated without holding every feature in memory.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl StatsAccumulator {
    pub fn push_feature(&mut self, f: &FilterbankFeature) {
        let n = f.values.len() as u64;
        if n == 0 {
            return;
        }
        let mean = f.values.iter().sum::<f64>() / n as f64;
        let m2 = f.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        self.merge(StatsAccumulator { count: n, mean, m2 });
    }

    pub fn merge(&mut self, other: StatsAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<NormStats> {
        if self.count == 0 {
            return Err(Error::arg("cannot compute statistics of an empty collection"));
        }
        let std = (self.m2 / self.count as f64).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateData(format!("feature variance is {}", std * std)));
        }
        Ok(NormStats { mean: self.mean, std })
    }
}

/// Population mean and std over all entries of all features.
pub fn compute_stats<'a, I>(features: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FilterbankFeature>,
{
    let mut acc = StatsAccumulator::default();
    for f in features {
        acc.push_feature(f);
    }
    acc.finish()
}

pub fn normalize(feature: &FilterbankFeature, stats: &NormStats) -> Result<FilterbankFeature> {
    if feature.normalized {
        return Err(Error::State("feature is already normalized".into()));
    }
    let inv = 1.0 / stats.std;
    Ok(FilterbankFeature {
        values: feature.values.iter().map(|v| (v - stats.mean) * inv).collect(),
        normalized: true,
    })
}
