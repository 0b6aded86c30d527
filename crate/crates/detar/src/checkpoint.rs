//! `DTRN` checkpoints.
//!
//! Layout, little-endian: magic `DTRN`, `u32` version, a length-prefixed JSON
//! header (config, seed, counters, optimizer hyper-parameters), a `u64` record
//! count, then one record per tensor: length-prefixed name, dtype tag byte,
//! `u32` rank, `u64` dims and the raw payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use detar_core::nn::{BnRunning, DetarConfig, ModelParams};
use detar_core::optim::AdamState;
use detar_core::real::DType;
use detar_core::tensor::Tensor;
use detar_core::train::{Checkpoint, CHECKPOINT_VERSION};
use detar_core::Real;

use crate::bytes::{put_string, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DTRN";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DetarConfig,
    dtype: DType,
    seed: u64,
    step: u64,
    epoch: u64,
    epoch_step: u64,
    adam: Option<AdamHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

const PARAM: &str = "param:";
const BN_MEAN: &str = "bn_mean:";
const BN_VAR: &str = "bn_var:";
const ADAM_M: &str = "adam_m:";
const ADAM_V: &str = "adam_v:";

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_string(out, name);
    out.push(T::DTYPE.tag());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &v in data {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
}

pub fn encode<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: ck.params.config.clone(),
        dtype: T::DTYPE,
        seed: ck.seed,
        step: ck.step,
        epoch: ck.epoch,
        epoch_step: ck.epoch_step,
        adam: ck.adam.as_ref().map(|a| AdamHeader { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step }),
    };
    let mut body = Vec::new();
    let mut count = 0u64;
    let mut rec = |name: String, shape: &[usize], data: &[T]| {
        put_record(&mut body, &name, shape, data);
        count += 1;
    };
    for (k, t) in &ck.params.tensors {
        rec(format!("{PARAM}{k}"), t.shape(), t.data());
    }
    for (k, r) in &ck.params.bn {
        rec(format!("{BN_MEAN}{k}"), &[r.mean.len()], &r.mean);
        rec(format!("{BN_VAR}{k}"), &[r.var.len()], &r.var);
    }
    if let Some(a) = &ck.adam {
        for (k, t) in &a.m {
            rec(format!("{ADAM_M}{k}"), t.shape(), t.data());
        }
        for (k, t) in &a.v {
            rec(format!("{ADAM_V}{k}"), t.shape(), t.data());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 256);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, ck.version);
    put_string(&mut out, &serde_json::to_string(&header)?);
    put_u64(&mut out, count);
    out.extend_from_slice(&body);
    Ok(out)
}

fn read_tensor<T: Real>(r: &mut Reader) -> Result<(String, Tensor<T>)> {
    let name = r.string()?;
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown dtype tag {tag} in `{name}`")))?;
    if dtype != T::DTYPE {
        return Err(Error::Invalid(format!("`{name}` is stored as {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Corrupt(format!("`{name}` claims rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Corrupt(format!("`{name}` dimension overflows")))?);
    }
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let bytes = numel.and_then(|n| n.checked_mul(width)).ok_or_else(|| Error::Corrupt(format!("`{name}` is too large")))?;
    let raw = r.take(bytes)?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect(),
    };
    Ok((name, Tensor::new(&shape, data)?))
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(buf, "checkpoint");
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Corrupt("missing DTRN magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { kind: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let header: Header = serde_json::from_str(&r.string()?).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Invalid(format!("checkpoint holds {:?} values, expected {:?}", header.dtype, T::DTYPE)));
    }
    let count = r.u64()?;
    let mut tensors = BTreeMap::new();
    let mut bn_mean = BTreeMap::new();
    let mut bn_var = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor::<T>(&mut r)?;
        let slot = [(PARAM, &mut tensors), (ADAM_M, &mut m), (ADAM_V, &mut v)]
            .into_iter()
            .find_map(|(p, map)| name.strip_prefix(p).map(|k| (k.to_string(), map)));
        if let Some((k, map)) = slot {
            map.insert(k, t);
        } else if let Some(k) = name.strip_prefix(BN_MEAN) {
            bn_mean.insert(k.to_string(), t.into_data());
        } else if let Some(k) = name.strip_prefix(BN_VAR) {
            bn_var.insert(k.to_string(), t.into_data());
        } else {
            return Err(Error::Corrupt(format!("unknown record `{name}`")));
        }
    }
    r.finish()?;
    let mut bn = BTreeMap::new();
    for (k, mean) in bn_mean {
        let var = bn_var.remove(&k).ok_or_else(|| Error::Invalid(format!("running variance of `{k}` missing")))?;
        bn.insert(k, BnRunning { mean, var });
    }
    if let Some(k) = bn_var.keys().next() {
        return Err(Error::Invalid(format!("running mean of `{k}` missing")));
    }
    let params = ModelParams { config: header.config, tensors, bn };
    params.check().map_err(|e| Error::Invalid(format!("checkpoint does not match its config: {e}")))?;
    let adam = header.adam.map(|a| AdamState { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v });
    if let Some(a) = &adam {
        a.validate().map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(Checkpoint {
        version,
        params,
        adam,
        seed: header.seed,
        step: header.step,
        epoch: header.epoch,
        epoch_step: header.epoch_step,
    })
}

/// Writes through a temporary sibling file so a crash never leaves a partial checkpoint.
pub fn save<T: Real>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("dtrn.tmp");
    fs::write(&tmp, encode(ck)?).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(Error::io(path))?)
}
