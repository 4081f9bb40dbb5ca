//! Self-describing binary checkpoints.
//!
//! Layout (little-endian): magic `TRJDCKPT`, `u32` format version, `u64`
//! metadata length, JSON metadata, `u64` tensor count, then per tensor a
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims and `f32` values.
//! Live weights come first in network declaration order, followed by the
//! same tensors under an `ema/` prefix.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, TaskTarget};
use crate::denoiser::{DenoiserParams, DenoiserSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;

pub const MAGIC: &[u8; 8] = b"TRJDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: DenoiserSpec,
    pub schedule: ScheduleParams,
    pub normalizer: Normalizer,
    pub target: TaskTarget,
    pub env: String,
    pub config_hash: String,
    pub train: TrainConfig,
    pub steps_done: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
}

impl Checkpoint {
    /// Errors when the stored model does not fit the given task shape.
    pub fn check_dims(&self, state_dim: usize, action_dim: usize, horizon: usize) -> Result<()> {
        let s = &self.meta.spec;
        if s.state_dim != state_dim {
            return Err(Error::mismatch("state_dim", state_dim, s.state_dim));
        }
        if s.action_dim != action_dim {
            return Err(Error::mismatch("action_dim", action_dim, s.action_dim));
        }
        if s.horizon != horizon {
            return Err(Error::mismatch("horizon", horizon, s.horizon));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(meta: &CheckpointMeta, params: &DenoiserParams, ema: &DenoiserParams) -> Result<Vec<u8>> {
    if params.spec != meta.spec || ema.spec != meta.spec {
        return Err(Error::Usage("checkpoint weights do not match the metadata spec".into()));
    }
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let entries = params.network().entries();
    let mut buf = Vec::with_capacity(json.len() + 8 * params.weights.len() + 64 * entries.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(2 * entries.len() as u64).to_le_bytes());
    for (prefix, w) in [("", &params.weights), ("ema/", &ema.weights)] {
        for e in entries {
            let name = format!("{prefix}{}", e.name);
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &w[e.offset..e.offset + e.len()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::mismatch("checkpoint version", VERSION, version));
    }
    let mlen = r.u64()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let template = crate::nn::Network::new(meta.spec.net_config())?;
    let entries = template.entries();
    let count = r.u64()? as usize;
    if count != 2 * entries.len() {
        return Err(Error::mismatch("tensor count", 2 * entries.len(), count));
    }
    let mut live = vec![0f32; template.num_params()];
    let mut ema = vec![0f32; template.num_params()];
    for (prefix, dst) in [("", &mut live), ("ema/", &mut ema)] {
        for e in entries {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let want = format!("{prefix}{}", e.name);
            if name != want {
                return Err(Error::mismatch("tensor name", want, name));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            if shape != e.shape {
                return Err(Error::mismatch(format!("shape of {want}"), format!("{:?}", e.shape), format!("{shape:?}")));
            }
            let bytes = r.take(4 * e.len())?;
            for (d, c) in dst[e.offset..e.offset + e.len()].iter_mut().zip(bytes.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        params: DenoiserParams::from_weights(meta.spec.clone(), live)?,
        ema: DenoiserParams::from_weights(meta.spec.clone(), ema)?,
        meta,
    })
}

pub fn save_checkpoint(meta: &CheckpointMeta, params: &DenoiserParams, ema: &DenoiserParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(meta, params, ema)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ArchConfig, InitialStateMode, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (CheckpointMeta, DenoiserParams, DenoiserParams) {
        let spec = DenoiserSpec {
            role: Role::Dynamics,
            state_dim: 2,
            action_dim: 1,
            y_dim: 2,
            horizon: 8,
            x0_mode: InitialStateMode::Film,
            conditional: true,
            arch: ArchConfig {
                width: 8,
                blocks: 1,
                kernel: 3,
                groups: 2,
                level_dim: 4,
                embed_dim: 8,
                positions: 2,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DenoiserParams::init(spec.clone(), &mut rng).unwrap();
        let mut e = p.clone();
        for w in &mut e.weights {
            *w += 0.5;
        }
        let meta = CheckpointMeta {
            spec,
            schedule: ScheduleParams::default_for_steps(10),
            normalizer: Normalizer {
                state_mean: vec![0.1, 0.2],
                state_std: vec![1.0, 2.0],
                action_mean: vec![0.0],
                action_std: vec![0.3],
                return_min: -1.0,
                return_max: 0.0,
                cost_min: vec![],
                cost_max: vec![],
            },
            target: TaskTarget::Goal,
            env: "double_integrator".into(),
            config_hash: "00ff".into(),
            train: TrainConfig::default(),
            steps_done: 12,
        };
        (meta, p, e)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (meta, p, e) = sample();
        let a = encode_checkpoint(&meta, &p, &e).unwrap();
        let ck = decode_checkpoint(&a).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.params.weights, p.weights);
        assert_eq!(ck.ema.weights, e.weights);
        let b = encode_checkpoint(&ck.meta, &ck.params, &ck.ema).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_names_both_values() {
        let (meta, p, e) = sample();
        let ck = decode_checkpoint(&encode_checkpoint(&meta, &p, &e).unwrap()).unwrap();
        let err = ck.check_dims(5, 1, 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("state_dim") && msg.contains('5') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn version_and_truncation_errors() {
        let (meta, p, e) = sample();
        let mut a = encode_checkpoint(&meta, &p, &e).unwrap();
        assert!(matches!(decode_checkpoint(&a[..a.len() - 1]), Err(Error::Format(_))));
        a[8] = 9;
        assert!(matches!(decode_checkpoint(&a), Err(Error::Mismatch { .. })));
    }
}
