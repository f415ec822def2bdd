//! Synthetic underwater sessions with manatee-like calls.
//!
//! A call is a stack of harmonics over a fundamental that sweeps linearly
//! within `f0_range_hz`, shaped by a raised-cosine onset and offset. Sessions
//! mix calls into white plus 1/f background noise and add broadband
//! transient bursts (distractors) that carry no harmonic structure. A
//! fraction of calls can be left unannotated to mimic under-labelling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{self, Annotation, AudioClip, RecordingSession, WavEncoding, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub f0_range_hz: [f64; 2],
    pub n_harmonics: usize,
    pub harmonic_decay: f64,
    /// Maximum relative fundamental drift over one call.
    pub f0_sweep: f64,
    pub duration_range_s: [f64; 2],
    /// Call power relative to the background variance (white plus 1/f).
    pub call_snr_db_range: [f64; 2],
    pub session_length_s: f64,
    /// Inclusive.
    pub calls_per_session_range: [usize; 2],
    pub distractor_rate_per_min: f64,
    pub distractor_snr_db_range: [f64; 2],
    pub withhold_fraction: f64,
    /// Standard deviation of the white background.
    pub noise_std: f64,
    /// Standard deviation of the 1/f background component.
    pub pink_noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            f0_range_hz: [2000.0, 4000.0],
            n_harmonics: 6,
            harmonic_decay: 0.7,
            f0_sweep: 0.1,
            duration_range_s: [0.10, 0.60],
            call_snr_db_range: [-10.0, 0.0],
            session_length_s: 60.0,
            calls_per_session_range: [2, 4],
            distractor_rate_per_min: 6.0,
            distractor_snr_db_range: [-5.0, 10.0],
            withhold_fraction: 0.0,
            noise_std: 0.02,
            pink_noise_std: 0.02,
        }
    }
}

impl SynthConfig {
    /// Variance of the white plus 1/f background; the reference for call
    /// and distractor levels.
    pub fn background_power(&self) -> f64 {
        self.noise_std * self.noise_std + self.pink_noise_std * self.pink_noise_std
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE_HZ as f64 / 2.0;
        let [f_lo, f_hi] = self.f0_range_hz;
        if self.n_harmonics == 0 {
            return Err(Error::arg("n_harmonics must be >= 1"));
        }
        if !(2000.0 <= f_lo && f_lo <= f_hi && f_hi * self.n_harmonics as f64 <= nyquist) {
            return Err(Error::arg(format!(
                "f0_range_hz [{f_lo}, {f_hi}] must lie within [2000, {}] for {} harmonics",
                nyquist / self.n_harmonics as f64,
                self.n_harmonics
            )));
        }
        let [d_lo, d_hi] = self.duration_range_s;
        if !(0.05 <= d_lo && d_lo <= d_hi && d_hi <= 1.0) {
            return Err(Error::arg(format!("duration_range_s [{d_lo}, {d_hi}] must lie within [0.05, 1.0]")));
        }
        let [c_lo, c_hi] = self.calls_per_session_range;
        if c_lo > c_hi {
            return Err(Error::arg("calls_per_session_range is reversed"));
        }
        for (name, [a, b]) in [
            ("call_snr_db_range", self.call_snr_db_range),
            ("distractor_snr_db_range", self.distractor_snr_db_range),
        ] {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(Error::arg(format!("{name} [{a}, {b}] is invalid")));
            }
        }
        if !(0.0..=1.0).contains(&self.withhold_fraction) {
            return Err(Error::arg("withhold_fraction must lie in [0, 1]"));
        }
        if !(self.session_length_s > 0.0)
            || !(self.harmonic_decay > 0.0)
            || !(0.0..1.0).contains(&self.f0_sweep)
            || !(self.distractor_rate_per_min >= 0.0)
            || !(self.noise_std > 0.0)
            || !(self.pink_noise_std >= 0.0)
        {
            return Err(Error::arg("session length, decay, sweep, rates and noise levels must be positive"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A synthetic call in isolation.
#[derive(Debug, Clone)]
pub struct SynthCall {
    pub clip: AudioClip,
    pub duration_s: f64,
    pub f0_start_hz: f64,
    pub f0_end_hz: f64,
}

/// Raised-cosine envelope with 10% onset and offset ramps.
fn envelope(i: usize, n: usize) -> f64 {
    let ramp = ((n as f64) * 0.1).max(1.0);
    let x = i as f64;
    let tail = (n - 1 - i) as f64;
    if x < ramp {
        0.5 - 0.5 * (PI * x / ramp).cos()
    } else if tail < ramp {
        0.5 - 0.5 * (PI * tail / ramp).cos()
    } else {
        1.0
    }
}

pub fn synth_call<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> SynthCall {
    let duration_s = uniform(rng, cfg.duration_range_s);
    let [f_lo, f_hi] = cfg.f0_range_hz;
    let f0_start = uniform(rng, cfg.f0_range_hz);
    let sweep = if cfg.f0_sweep > 0.0 {
        rng.random_range(-cfg.f0_sweep..=cfg.f0_sweep)
    } else {
        0.0
    };
    let f0_end = (f0_start * (1.0 + sweep)).clamp(f_lo, f_hi);
    let phases: Vec<f64> = (0..cfg.n_harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let n = ((duration_s * SAMPLE_RATE_HZ as f64).round() as usize).max(2);
    let sr = SAMPLE_RATE_HZ as f64;
    let rate = (f0_end - f0_start) / duration_s;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            // phase of the fundamental: integral of the instantaneous frequency
            let base = 2.0 * PI * (f0_start * t + 0.5 * rate * t * t);
            let mut amp = 1.0;
            let mut v = 0.0;
            for (h, phi) in phases.iter().enumerate() {
                v += amp * ((h + 1) as f64 * base + phi).sin();
                amp *= cfg.harmonic_decay;
            }
            (v * envelope(i, n)) as f32
        })
        .collect();
    SynthCall {
        clip: AudioClip::new(samples),
        duration_s: n as f64 / sr,
        f0_start_hz: f0_start,
        f0_end_hz: f0_end,
    }
}

/// A generated session plus ground truth that is not in its annotations.
#[derive(Debug, Clone)]
pub struct SynthSession {
    pub session: RecordingSession,
    /// Real calls whose annotations were withheld.
    pub hidden: Vec<Annotation>,
    /// Broadband bursts as (start_s, end_s); never annotated.
    pub distractors: Vec<(f64, f64)>,
}

impl SynthSession {
    /// Every real call, visible and hidden, sorted by start.
    pub fn ground_truth(&self) -> Vec<Annotation> {
        let mut all: Vec<Annotation> = self.session.annotations.iter().chain(&self.hidden).copied().collect();
        all.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        all
    }
}

/// Pink-ish noise via Paul Kellet's economy filter.
fn pink_noise<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        let k = std / rms;
        out.iter_mut().for_each(|v| *v *= k);
    }
    out
}

fn place_intervals<R: Rng>(rng: &mut R, durations: &[f64], length: f64) -> Result<Vec<f64>> {
    const ATTEMPTS: usize = 10_000;
    let total: f64 = durations.iter().sum();
    if total > length {
        return Err(Error::Capacity(format!(
            "{} calls totalling {total:.2} s do not fit in a {length} s session",
            durations.len()
        )));
    }
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(durations.len());
    for &d in durations {
        let mut ok = None;
        for _ in 0..ATTEMPTS {
            let start = rng.random_range(0.0..=(length - d));
            if placed.iter().all(|&(s, e)| start + d <= s || start >= e) {
                ok = Some(start);
                break;
            }
        }
        let start = ok.ok_or_else(|| {
            Error::Capacity(format!("could not place a {d:.3} s call without overlap in a {length} s session"))
        })?;
        placed.push((start, start + d));
    }
    Ok(placed.into_iter().map(|(s, _)| s).collect())
}

pub fn synth_session<R: Rng>(cfg: &SynthConfig, id: &str, rng: &mut R) -> Result<SynthSession> {
    cfg.validate()?;
    let sr = SAMPLE_RATE_HZ as f64;
    let n = (cfg.session_length_s * sr).round() as usize;
    let length = n as f64 / sr;

    let white = Normal::new(0.0, cfg.noise_std).expect("std validated");
    let pink = pink_noise(rng, n, cfg.pink_noise_std);
    let mut mix: Vec<f64> = pink.into_iter().map(|p| p + white.sample(rng)).collect();

    let [c_lo, c_hi] = cfg.calls_per_session_range;
    let n_calls = rng.random_range(c_lo..=c_hi);
    let calls: Vec<SynthCall> = (0..n_calls).map(|_| synth_call(cfg, rng)).collect();
    let durations: Vec<f64> = calls.iter().map(|c| c.duration_s).collect();
    let starts = place_intervals(rng, &durations, length)?;

    let noise_power = cfg.background_power();
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for (call, &start_s) in calls.iter().zip(&starts) {
        let snr = uniform(rng, cfg.call_snr_db_range);
        let gain = (noise_power * 10f64.powf(snr / 10.0) / call.clip.power()).sqrt();
        let offset = (start_s * sr).round() as usize;
        for (i, &v) in call.clip.samples.iter().enumerate() {
            if let Some(slot) = mix.get_mut(offset + i) {
                *slot += gain * v as f64;
            }
        }
        let end_s = ((offset + call.clip.len()) as f64 / sr).min(length);
        let ann = Annotation {
            start_s: offset as f64 / sr,
            end_s,
        };
        if rng.random_bool(cfg.withhold_fraction) {
            hidden.push(ann);
        } else {
            visible.push(ann);
        }
    }

    let expected = cfg.distractor_rate_per_min * length / 60.0;
    let n_bursts = if expected > 0.0 {
        Poisson::new(expected).expect("rate validated").sample(rng) as usize
    } else {
        0
    };
    let mut distractors = Vec::with_capacity(n_bursts);
    for _ in 0..n_bursts {
        let d = rng.random_range(0.020..=0.100);
        let start_s = rng.random_range(0.0..=(length - d).max(0.0));
        let snr = uniform(rng, cfg.distractor_snr_db_range);
        let amp = (noise_power * 10f64.powf(snr / 10.0)).sqrt();
        let offset = (start_s * sr).round() as usize;
        let len = (d * sr).round() as usize;
        let tau = len as f64 / 4.0;
        for i in 0..len {
            if let Some(slot) = mix.get_mut(offset + i) {
                let w: f64 = StandardNormal.sample(rng);
                // sharp attack, exponential decay
                *slot += amp * w * (-(i as f64) / tau).exp();
            }
        }
        distractors.push((start_s, start_s + d));
    }

    let clip = AudioClip::new(mix.into_iter().map(|v| v as f32).collect());
    let session = RecordingSession::new(id, clip, visible)?;
    hidden.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(SynthSession {
        session,
        hidden,
        distractors,
    })
}

/// Generates `n` sessions named `s000`, `s001`, … with per-session seeds.
pub fn synth_corpus(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<SynthSession>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng_for(seed, &[seed::stream::SYNTH, i as u64]);
            synth_session(cfg, &format!("s{i:03}"), &mut rng)
        })
        .collect()
}

pub const HIDDEN_SUFFIX: &str = ".hidden.csv";

/// Writes `<id>.wav`, `<id>.csv` and the hidden-call sidecar `<id>.hidden.csv`.
pub fn write_registry(dir: &Path, sessions: &[SynthSession]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in sessions {
        let id = &s.session.id;
        audio_io::write_wav(dir.join(format!("{id}.wav")), &s.session.clip, WavEncoding::Float32)?;
        audio_io::write_annotations(dir.join(format!("{id}.csv")), &s.session.annotations)?;
        audio_io::write_annotations(dir.join(format!("{id}{HIDDEN_SUFFIX}")), &s.hidden)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_harmonics_above_nyquist() {
        let cfg = SynthConfig {
            f0_range_hz: [2000.0, 5000.0],
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn durations_within_range() {
        let cfg = SynthConfig::default();
        let mut rng = rng_for(1, &[]);
        for _ in 0..200 {
            let c = synth_call(&cfg, &mut rng);
            let tol = 1.0 / SAMPLE_RATE_HZ as f64;
            assert!(c.duration_s >= cfg.duration_range_s[0] - tol && c.duration_s <= cfg.duration_range_s[1] + tol);
            assert!(c.f0_end_hz >= cfg.f0_range_hz[0] && c.f0_end_hz <= cfg.f0_range_hz[1]);
        }
    }

    #[test]
    fn no_withholding_means_no_hidden() {
        let cfg = SynthConfig {
            session_length_s: 20.0,
            ..SynthConfig::default()
        };
        let s = synth_session(&cfg, "a", &mut rng_for(3, &[])).unwrap();
        assert!(s.hidden.is_empty());
    }

    #[test]
    fn call_counts_honored() {
        for (lo, hi) in [(3usize, 3usize), (52, 52), (3, 52)] {
            let cfg = SynthConfig {
                session_length_s: 600.0,
                calls_per_session_range: [lo, hi],
                distractor_rate_per_min: 0.0,
                ..SynthConfig::default()
            };
            for seed in 0..3 {
                let s = synth_session(&cfg, "x", &mut rng_for(seed, &[])).unwrap();
                let n = s.ground_truth().len();
                assert!((lo..=hi).contains(&n), "{n} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn capacity_error() {
        let cfg = SynthConfig {
            session_length_s: 1.0,
            calls_per_session_range: [20, 20],
            ..SynthConfig::default()
        };
        assert!(matches!(synth_session(&cfg, "x", &mut rng_for(0, &[])), Err(Error::Capacity(_))));
    }
}
