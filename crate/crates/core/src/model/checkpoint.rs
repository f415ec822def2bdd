//! Binary checkpoint format.
//!
//! ```text
//! magic "MNTECKPT" | u32 version | u32 header length | JSON header
//! | f64 LE parameters | f64 LE first moments | f64 LE second moments
//! | SHA-256 of everything before it
//! ```
//!
//! The header embeds the [`ModelConfig`], so loading needs no outside
//! knowledge of the architecture.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, Layout, ModelConfig, Parameters};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MNTECKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: u32,
    pub norm_stats: Option<NormStats>,
}

impl Checkpoint {
    pub fn new(params: Parameters) -> Self {
        let n = params.len();
        Checkpoint {
            params,
            optimizer: AdamState::new(n),
            epoch: 0,
            norm_stats: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Fails with a message naming both values of the first differing field.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        let got = self.config();
        let fields = [
            ("embed_dim", got.embed_dim, expected.embed_dim),
            ("n_layers", got.n_layers, expected.n_layers),
            ("n_heads", got.n_heads, expected.n_heads),
            ("mlp_ratio", got.mlp_ratio, expected.mlp_ratio),
        ];
        for (name, a, b) in fields {
            if a != b {
                return Err(Error::Mismatch(format!("checkpoint has {name} {a}, expected {name} {b}")));
            }
        }
        if got != expected {
            return Err(Error::Mismatch(format!("checkpoint geometry {got:?} differs from {expected:?}")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: u32,
    step: u64,
    norm_stats: Option<NormStats>,
    n_params: usize,
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ckpt.params.config,
        epoch: ckpt.epoch,
        step: ckpt.optimizer.step,
        norm_stats: ckpt.norm_stats,
        n_params: ckpt.params.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let n = ckpt.params.len();
    let mut out = Vec::with_capacity(16 + json.len() + 24 * n + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for buf in [&ckpt.params.data, &ckpt.optimizer.m, &ckpt.optimizer.v] {
        for v in buf.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let short = || Error::Format("checkpoint is truncated".into());
    if bytes.len() < 16 + 32 {
        return Err(short());
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body_start = 16 + hlen;
    if bytes.len() < body_start + 32 {
        return Err(short());
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    if layout.total != header.n_params {
        return Err(Error::Format(format!(
            "header declares {} parameters but the config implies {}",
            header.n_params, layout.total
        )));
    }
    let n = header.n_params;
    let payload_end = body_start + 24 * n;
    if bytes.len() != payload_end + 32 {
        return Err(short());
    }
    if Sha256::digest(&bytes[..payload_end]).as_slice() != &bytes[payload_end..] {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let read = |k: usize| -> Vec<f64> {
        bytes[body_start + 8 * n * k..body_start + 8 * n * (k + 1)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Ok(Checkpoint {
        params: Parameters {
            config: header.config,
            layout,
            data: read(0),
        },
        optimizer: AdamState {
            m: read(1),
            v: read(2),
            step: header.step,
        },
        epoch: header.epoch,
        norm_stats: header.norm_stats,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &checkpoint_to_bytes(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = Parameters::init(ModelConfig::tiny(), 9).unwrap();
        let mut c = Checkpoint::new(params);
        c.optimizer.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-3);
        c.optimizer.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sqrt());
        c.optimizer.step = 17;
        c.epoch = 3;
        c.norm_stats = Some(NormStats { mean: -4.5, std: 2.25 });
        c
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_is_format_error() {
        let bytes = checkpoint_to_bytes(&sample()).unwrap();
        for cut in [0, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn corrupted_payload_detected() {
        let mut bytes = checkpoint_to_bytes(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_names_both_dims() {
        let c = sample();
        let mut other = ModelConfig::tiny();
        other.embed_dim = 32;
        let msg = c.ensure_config(&other).unwrap_err().to_string();
        assert!(msg.contains("embed_dim 16") && msg.contains("embed_dim 32"), "{msg}");
        c.ensure_config(&ModelConfig::tiny()).unwrap();
    }
}
