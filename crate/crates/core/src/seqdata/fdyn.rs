//! FDYN: `"FDYN"`, version byte `0x01`, `u32` LE frame count, `u32` LE
//! column count, then frame-major `f32` LE values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DynSequence, DEFAULT_FPS, FEATURE_DIM};
use crate::error::{Error, Result};

pub const FDYN_MAGIC: &[u8; 4] = b"FDYN";
pub const FDYN_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

pub fn encode_sequence(seq: &DynSequence) -> Vec<u8> {
    let frames = seq.frames();
    let mut out = Vec::with_capacity(HEADER_LEN + frames.len() * 4);
    out.extend_from_slice(FDYN_MAGIC);
    out.push(FDYN_VERSION);
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sequence(bytes: &[u8]) -> Result<DynSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the FDYN header",
            bytes.len()
        )));
    }
    if &bytes[..4] != FDYN_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != FDYN_VERSION {
        return Err(Error::Format(format!(
            "unsupported FDYN version {}",
            bytes[4]
        )));
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if d != FEATURE_DIM {
        return Err(Error::Dimension {
            expected: FEATURE_DIM,
            found: d,
        });
    }
    let body = &bytes[HEADER_LEN..];
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("frame count overflows".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header promises {expected}",
            body.len()
        )));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((t, d), values).expect("length checked above");
    DynSequence::new(frames, DEFAULT_FPS)
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<DynSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &DynSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}
