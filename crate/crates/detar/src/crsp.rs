//! `CRSP`: one correspondence set per file.
//!
//! Layout, little-endian: magic `CRSP`, `u32` version, `u64` N, source then
//! target points as `3N` f32 each, a flag byte followed by N label bytes when
//! labels are present, a flag byte followed by the ground truth as 12 f32
//! (rotation row-major, then translation) when present, and the metadata as a
//! length-prefixed JSON string.

use std::fs;
use std::path::Path;

use detar_core::data::{CorrespondenceSet, SetMeta};
use detar_core::geom::RigidTransform;

use crate::bytes::{put_f32s, put_string, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CRSP";
pub const VERSION: u32 = 1;

pub fn encode(set: &CorrespondenceSet) -> Result<Vec<u8>> {
    set.validate()?;
    let n = set.len();
    let mut out = Vec::with_capacity(64 + n * 25);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, n as u64);
    put_f32s(&mut out, set.x.iter().flatten().copied());
    put_f32s(&mut out, set.y.iter().flatten().copied());
    match &set.labels {
        Some(l) => {
            out.push(1);
            out.extend(l.iter().map(|&b| u8::from(b)));
        }
        None => out.push(0),
    }
    match &set.gt {
        Some(gt) => {
            out.push(1);
            // The generator keeps poses f32-representable; other poses are rounded here.
            put_f32s(&mut out, gt.r.iter().flatten().chain(&gt.t).map(|&v| v as f32));
        }
        None => out.push(0),
    }
    put_string(&mut out, &serde_json::to_string(&set.meta)?);
    Ok(out)
}

fn points(v: Vec<f32>) -> Vec<[f32; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn flag(r: &mut Reader, what: &str) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(Error::Corrupt(format!("{what} flag byte is {b}"))),
    }
}

pub fn decode(buf: &[u8]) -> Result<CorrespondenceSet> {
    let mut r = Reader::new(buf, "CRSP file");
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Corrupt("missing CRSP magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { kind: "CRSP", found: version, expected: VERSION });
    }
    let n = r.count(24)?;
    let x = points(r.f32s(3 * n)?);
    let y = points(r.f32s(3 * n)?);
    let labels = if flag(&mut r, "label")? {
        let raw = r.take(n)?;
        Some(
            raw.iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::Corrupt(format!("label byte {b}"))),
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let gt = if flag(&mut r, "ground-truth")? {
        let v: Vec<f64> = r.f32s(12)?.into_iter().map(f64::from).collect();
        Some(RigidTransform { r: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]], t: [v[9], v[10], v[11]] })
    } else {
        None
    };
    let meta: SetMeta = serde_json::from_str(&r.string()?)?;
    r.finish()?;
    let set = CorrespondenceSet { x, y, labels, gt, meta };
    set.validate().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(set)
}

pub fn write_set(path: impl AsRef<Path>, set: &CorrespondenceSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(set)?).map_err(Error::io(path))
}

pub fn read_set(path: impl AsRef<Path>) -> Result<CorrespondenceSet> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(Error::io(path))?)
}

pub fn to_json(set: &CorrespondenceSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(set)?)
}

pub fn from_json(s: &str) -> Result<CorrespondenceSet> {
    let set: CorrespondenceSet = serde_json::from_str(s)?;
    set.validate().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(set)
}
