//! Checkpoint container.
//!
//! ```text
//! "AOPC" | version u32 | header length u32 | header (JSON) | parameters f32 LE | SHA-256 of everything before
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, Variant};
use super::params::{ParamEntry, ParamStore};
use super::sampler::TrainedModel;
use super::schedule::DiffusionSchedule;
use crate::dataset::NormStats;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AOPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub mood: String,
    pub profile: String,
    pub init: String,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    variant: Variant,
    schedule: DiffusionSchedule,
    norm: NormStats,
    meta: CheckpointMeta,
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub variant: Variant,
    pub schedule: DiffusionSchedule,
    pub norm: NormStats,
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

pub const INIT_DESCRIPTION: &str =
    "embeddings, queries, heads: truncated normal std 0.02; attention and feed-forward: normal std 1/sqrt(fan_in); layer norm gain 1, biases 0";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            variant: self.variant,
            schedule: self.schedule.clone(),
            norm: self.norm.clone(),
            meta: self.meta.clone(),
            entries: self.params.entries.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + self.params.data.len() * 4 + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.params.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 + 32 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format("checkpoint hash mismatch (file corrupt)"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        if 12 + hlen > body.len() {
            return Err(Error::format("checkpoint header truncated"));
        }
        let header: Header = serde_json::from_slice(&body[12..12 + hlen])?;
        let data_bytes = &body[12 + hlen..];
        if data_bytes.len() % 4 != 0 {
            return Err(Error::format("checkpoint parameter block misaligned"));
        }
        let data: Vec<f32> = data_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let params = ParamStore { entries: header.entries, data };
        params.check_layout(&header.config)?;
        Ok(Checkpoint {
            config: header.config,
            variant: header.variant,
            schedule: header.schedule,
            norm: header.norm,
            meta: header.meta,
            params,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint body.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)
            .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    pub fn into_model(self) -> Result<TrainedModel> {
        TrainedModel::new(self.config, self.variant, self.schedule, self.norm, self.params)
    }

    pub fn from_model(model: &TrainedModel, meta: CheckpointMeta) -> Self {
        Checkpoint {
            config: model.config.clone(),
            variant: model.variant,
            schedule: model.schedule.clone(),
            norm: model.norm.clone(),
            meta,
            params: model.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::schedule::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = ModelConfig::reduced();
        Checkpoint {
            params: ParamStore::init(&config, &mut ChaCha8Rng::seed_from_u64(5)),
            config,
            variant: Variant::Ours,
            schedule: make_schedule(8).unwrap(),
            norm: NormStats { mean: [0.1, 1.0 / 3.0, -0.7], ..NormStats::default() },
            meta: CheckpointMeta { seed: 9, epochs: 3, steps: 17, final_loss: 0.123456789, ..Default::default() },
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.content_hash().unwrap(), c.content_hash().unwrap());
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn config_mismatch_rejected() {
        let mut c = sample();
        c.config.latent_dim = 16;
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
