//! Audio and annotation ingest.
//!
//! Every clip in the pipeline is 48 kHz mono. Files at any other rate are
//! rejected rather than resampled, and multi-channel files keep channel 0.

use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE_HZ: u32 = 48_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        AudioClip {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / self.samples.len() as f64
    }
}

/// A positive-only call marker, in seconds from session start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub start_s: f64,
    pub end_s: f64,
}

impl Annotation {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || start_s >= end_s {
            return Err(Error::arg(format!(
                "annotation must satisfy 0 <= start < end, got ({start_s}, {end_s})"
            )));
        }
        Ok(Annotation { start_s, end_s })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Length in seconds of the intersection with `[start, end]`.
    pub fn overlap_s(&self, start: f64, end: f64) -> f64 {
        (self.end_s.min(end) - self.start_s.max(start)).max(0.0)
    }
}

/// A recording with its (incomplete) call annotations.
///
/// Unannotated regions may still contain calls.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingSession {
    pub id: String,
    pub clip: AudioClip,
    pub annotations: Vec<Annotation>,
}

impl RecordingSession {
    pub fn new(id: impl Into<String>, clip: AudioClip, mut annotations: Vec<Annotation>) -> Result<Self> {
        annotations.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let duration = clip.duration_s();
        if let Some(bad) = annotations.iter().find(|a| a.end_s > duration + 1e-9) {
            return Err(Error::arg(format!(
                "annotation ({}, {}) extends past session end {duration}",
                bad.start_s, bad.end_s
            )));
        }
        Ok(RecordingSession {
            id: id.into(),
            clip,
            annotations,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.clip.duration_s()
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(BufReader::new(file))
}

/// Decodes a WAV stream, keeping channel 0 and scaling to [-1, 1].
pub fn read_wav<R: Read>(reader: R) -> Result<AudioClip> {
    let mut wav = open_reader(reader)?;
    let samples = decode(&mut wav, usize::MAX)?;
    Ok(AudioClip::new(samples))
}

/// Reads `len` samples starting at `start` without decoding the rest of the
/// file; the part past the end of the recording is zero-filled, matching
/// [`cut_samples`] on the fully loaded clip.
pub fn load_wav_window(path: impl AsRef<Path>, start: usize, len: usize) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut wav = open_reader(BufReader::new(file))?;
    let mut samples = Vec::with_capacity(len);
    if (start as u64) < wav.duration() as u64 {
        wav.seek(start as u32).map_err(|e| Error::io(path, e))?;
        samples = decode(&mut wav, len)?;
    }
    samples.resize(len, 0.0);
    Ok(AudioClip::new(samples))
}

fn open_reader<R: Read>(reader: R) -> Result<WavReader<R>> {
    let wav = WavReader::new(reader).map_err(|e| Error::Format(e.to_string()))?;
    let rate = wav.spec().sample_rate;
    if rate != SAMPLE_RATE_HZ {
        return Err(Error::SampleRate {
            observed: rate,
            expected: SAMPLE_RATE_HZ,
        });
    }
    Ok(wav)
}

/// Channel 0 of up to `limit` frames from the reader's current position.
fn decode<R: Read>(wav: &mut WavReader<R>, limit: usize) -> Result<Vec<f32>> {
    let spec = wav.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f64;
            wav.samples::<i32>()
                .step_by(channels)
                .take(limit)
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(e.to_string()))?
        }
        (SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .step_by(channels)
            .take(limit)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(e.to_string()))?,
        (fmt, bits) => {
            return Err(Error::Format(format!("unsupported WAV encoding: {bits}-bit {fmt:?}")));
        }
    };
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(Error::Format(format!("non-finite sample at index {i}")));
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Float32,
}

impl WavEncoding {
    /// Size of one quantization step in [-1, 1] units.
    pub fn step(self) -> f64 {
        match self {
            WavEncoding::Pcm16 => 1.0 / 32768.0,
            WavEncoding::Pcm24 => 1.0 / 8_388_608.0,
            WavEncoding::Float32 => 0.0,
        }
    }
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_wav(std::io::BufWriter::new(file), clip, encoding)
}

/// Encodes a mono WAV into memory.
pub fn wav_bytes(clip: &AudioClip, encoding: WavEncoding) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    encode_wav(&mut buf, clip, encoding)?;
    Ok(buf.into_inner())
}

fn encode_wav<W: Write + Seek>(writer: W, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Pcm24 => (24, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: bits,
        sample_format: format,
    };
    let fmt_err = |e: hound::Error| Error::Format(e.to_string());
    let mut w = WavWriter::new(writer, spec).map_err(fmt_err)?;
    match encoding {
        WavEncoding::Float32 => {
            for &s in &clip.samples {
                w.write_sample(s).map_err(fmt_err)?;
            }
        }
        _ => {
            let full = (1i64 << (bits - 1)) as f64;
            for &s in &clip.samples {
                let q = (s as f64 * full).round().clamp(-full, full - 1.0) as i32;
                w.write_sample(q).map_err(fmt_err)?;
            }
        }
    }
    w.finalize().map_err(fmt_err)
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationRow {
    start_s: String,
    end_s: String,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(BufReader::new(file))
}

/// Parses `start_s,end_s` CSV. Row numbers in errors count data rows from 1.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<Annotation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("annotation header: {e}")))?
        .clone();
    if headers.len() != 2 || &headers[0] != "start_s" || &headers[1] != "end_s" {
        return Err(Error::Format(format!(
            "annotation header must be `start_s,end_s`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    message: format!("`{s}` is not a decimal number"),
                })
        };
        let (start_s, end_s) = (num(&rec.start_s)?, num(&rec.end_s)?);
        if start_s < 0.0 || start_s >= end_s {
            return Err(Error::Validation {
                row,
                message: format!("need 0 <= start_s < end_s, got ({start_s}, {end_s})"),
            });
        }
        out.push(Annotation { start_s, end_s });
    }
    out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["start_s", "end_s"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for a in annotations {
        w.write_record([a.start_s.to_string(), a.end_s.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Nearest sample index at the pipeline rate.
pub fn seconds_to_samples(s: f64) -> usize {
    (s * SAMPLE_RATE_HZ as f64).round() as usize
}

/// Copies `len` samples starting at `start`, zero-filling past the end.
pub fn cut_samples(clip: &AudioClip, start: usize, len: usize) -> AudioClip {
    let mut out = vec![0.0f32; len];
    if start < clip.samples.len() {
        let avail = (clip.samples.len() - start).min(len);
        out[..avail].copy_from_slice(&clip.samples[start..start + avail]);
    }
    AudioClip {
        samples: out,
        sample_rate_hz: clip.sample_rate_hz,
    }
}

/// Cuts `round(dur_s * 48000)` samples from `start_s`; the region past the
/// session end is zero.
pub fn cut_clip(session: &RecordingSession, start_s: f64, dur_s: f64) -> Result<AudioClip> {
    if !(start_s >= 0.0 && dur_s >= 0.0) {
        return Err(Error::arg(format!(
            "cut needs non-negative start and duration, got start {start_s}, duration {dur_s}"
        )));
    }
    Ok(cut_samples(
        &session.clip,
        seconds_to_samples(start_s),
        seconds_to_samples(dur_s),
    ))
}
