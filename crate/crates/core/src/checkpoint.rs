//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DROCKPT\0"
//! version      u32
//! architecture u32 length + JSON
//! dtype        u8       (1 = f32, 2 = f64)
//! metadata     u32 length + JSON
//! groups       u32 count, then per group:
//!                u16 name length + UTF-8 name, u32 tensor count, then per tensor:
//!                u8 rank, rank × u64 dims, raw values
//! checksum     u32      CRC-32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Architecture, DenoiserParams, EmaState};
use crate::error::{DroError, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::scalar::{DType, Scalar};
use crate::trainer::{HistoryRow, OptimizerState, TrainState};

pub const MAGIC: &[u8; 8] = b"DROCKPT\0";
pub const VERSION: u32 = 1;

/// Named tensor groups plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub arch: Architecture,
    pub meta: serde_json::Value,
    pub groups: Vec<(String, Vec<Tensor<T>>)>,
}

impl<T: Scalar> Container<T> {
    pub fn group(&self, name: &str) -> Result<&[Tensor<T>]> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
            .ok_or_else(|| DroError::Format(format!("checkpoint has no group {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.arch).map_err(|e| DroError::Format(e.to_string()))?;
        put_block(&mut out, &arch)?;
        out.push(T::DTYPE as u8);
        let meta = serde_json::to_vec(&self.meta).map_err(|e| DroError::Format(e.to_string()))?;
        put_block(&mut out, &meta)?;
        out.extend_from_slice(&u32_len(self.groups.len())?.to_le_bytes());
        for (name, tensors) in &self.groups {
            let len = u16::try_from(name.len()).map_err(|_| DroError::Format("group name too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
            for t in tensors {
                let rank = u8::try_from(t.shape().len()).map_err(|_| DroError::Format("rank too large".into()))?;
                out.push(rank);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(DroError::Format("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if &body[..8] != MAGIC {
            return Err(DroError::Format("not a checkpoint (bad magic)".into()));
        }
        if crc32fast::hash(body) != stored {
            return Err(DroError::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(DroError::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch: Architecture =
            serde_json::from_slice(r.block()?).map_err(|e| DroError::Format(format!("architecture block: {e}")))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| DroError::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(DroError::Format(format!("checkpoint holds {dtype:?} values, expected {:?}", T::DTYPE)));
        }
        let meta = serde_json::from_slice(r.block()?).map_err(|e| DroError::Format(format!("metadata block: {e}")))?;
        let n_groups = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups.min(64));
        let width = dtype.width();
        for _ in 0..n_groups {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| DroError::Format("group name is not UTF-8".into()))?;
            let n_tensors = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(n_tensors.min(1024));
            for _ in 0..n_tensors {
                let rank = r.take(1)?[0] as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    shape.push(usize::try_from(d).map_err(|_| DroError::Format("dimension too large".into()))?);
                }
                let len = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| DroError::Format("tensor size overflows".into()))?;
                let raw = r.take(len.checked_mul(width).ok_or_else(|| DroError::Format("tensor too large".into()))?)?;
                let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
                tensors.push(Tensor::new(shape, data)?);
            }
            groups.push((name, tensors));
        }
        if r.pos != body.len() {
            return Err(DroError::Format("trailing bytes after last group".into()));
        }
        Ok(Self { arch, meta, groups })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DroError::NotFound(format!("checkpoint {}", path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        Self::decode(&bytes)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| DroError::Format("length exceeds u32".into()))
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    out.extend_from_slice(&u32_len(bytes.len())?.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
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
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DroError::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_denoiser<T: Scalar>(path: &Path, params: &DenoiserParams<T>) -> Result<()> {
    denoiser_container(params).write(path)
}

pub fn denoiser_container<T: Scalar>(params: &DenoiserParams<T>) -> Container<T> {
    Container {
        arch: params.arch().clone(),
        meta: serde_json::json!({ "kind": "denoiser" }),
        groups: vec![("params".into(), params.tensors().to_vec())],
    }
}

pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<DenoiserParams<T>> {
    let c = Container::<T>::read(path)?;
    DenoiserParams::from_tensors(c.arch.clone(), c.group("params")?.to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    step: usize,
    opt_step: u64,
    ema_decay: f64,
    history: Vec<HistoryRow>,
}

pub fn train_state_container<T: Scalar>(state: &TrainState<T>) -> Result<Container<T>> {
    let meta = TrainMeta {
        kind: "train_state".into(),
        step: state.step,
        opt_step: state.opt.step,
        ema_decay: state.ema.decay.f64(),
        history: state.history.clone(),
    };
    Ok(Container {
        arch: state.phi.arch().clone(),
        meta: serde_json::to_value(meta).map_err(|e| DroError::Format(e.to_string()))?,
        groups: vec![
            ("phi".into(), state.phi.tensors().to_vec()),
            ("policy".into(), state.policy.tensors().to_vec()),
            ("ema".into(), state.ema.shadow.tensors().to_vec()),
            ("adam_m".into(), state.opt.m.clone()),
            ("adam_v".into(), state.opt.v.clone()),
        ],
    })
}

pub fn save_train_state<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    train_state_container(state)?.write(path)
}

pub fn load_train_state<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let c = Container::<T>::read(path)?;
    let meta: TrainMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| DroError::Format(format!("train state metadata: {e}")))?;
    if meta.kind != "train_state" {
        return Err(DroError::Format(format!("expected a train state, found {:?}", meta.kind)));
    }
    let params = |name: &str| DenoiserParams::from_tensors(c.arch.clone(), c.group(name)?.to_vec());
    let phi = params("phi")?;
    let m = c.group("adam_m")?.to_vec();
    let v = c.group("adam_v")?.to_vec();
    let congruent =
        |g: &[Tensor<T>]| g.len() == phi.tensors().len() && g.iter().zip(phi.tensors()).all(|(a, b)| a.same_shape(b));
    if !congruent(&m) || !congruent(&v) {
        return Err(DroError::Format("optimizer moments do not match parameters".into()));
    }
    Ok(TrainState {
        policy: params("policy")?,
        ema: EmaState { shadow: params("ema")?, decay: T::of(meta.ema_decay) },
        opt: OptimizerState { m, v, step: meta.opt_step },
        phi,
        step: meta.step,
        history: meta.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Seed;

    fn arch() -> Architecture {
        Architecture { data_dim: 2, hidden: vec![5], n_conditions: 2, cond_dim: 3, time_freqs: 2, horizon: 8 }
    }

    #[test]
    fn denoiser_round_trip_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let p = DenoiserParams::<f64>::init(&arch(), 3).unwrap();
        let path = dir.path().join("a.ckpt");
        save_denoiser(&path, &p).unwrap();
        assert_eq!(load_denoiser::<f64>(&path).unwrap(), p);
        assert!(matches!(load_denoiser::<f32>(&path), Err(DroError::Format(_))));
        let q: DenoiserParams<f32> = p.cast();
        save_denoiser(&path, &q).unwrap();
        assert_eq!(load_denoiser::<f32>(&path).unwrap(), q);
    }

    #[test]
    fn encoding_is_deterministic_and_checked() {
        let p = DenoiserParams::<f64>::init(&arch(), Seed(4)).unwrap();
        let a = denoiser_container(&p).encode().unwrap();
        assert_eq!(a, denoiser_container(&p).encode().unwrap());
        assert_eq!(&a[..8], MAGIC);
        for pos in [0, 9, a.len() / 2, a.len() - 1] {
            let mut bad = a.clone();
            bad[pos] ^= 0x40;
            assert!(Container::<f64>::decode(&bad).is_err(), "flip at {pos}");
        }
        assert!(Container::<f64>::decode(&a[..a.len() - 5]).is_err());
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(load_denoiser::<f64>(Path::new("/no/such/file.ckpt")), Err(DroError::NotFound(_))));
    }
}
