//! The `UNIP` container used for model checkpoints and perturbation files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"UNIP"  u32 version  u32 tensor count
//! per tensor: u32 rank, rank x u32 dims, prod(dims) x f32
//! ```
//!
//! Model checkpoints hold one tensor per parametric layer in layer order,
//! packed `[out, in + 1]` (dense) or `[oc, ic * k * k + 1]` (conv) with the
//! bias in the last column. Perturbation files hold a single `(C, H, W)`
//! tensor followed by the ball: `u8` norm code (0 = l-inf, 2 = l2) and the
//! radius as `f64`.

use std::fs;
use std::path::Path;

use crate::attacks::{Norm, NormBall};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UNIP";
pub const VERSION: u32 = 1;

/// Serializes tensors into the container.
pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| 4 + 4 * t.shape().len() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "container truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container, returning the tensors and any trailing bytes.
pub fn decode_tensors(bytes: &[u8]) -> Result<(Vec<Tensor>, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for a UNIP header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"UNIP\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok((tensors, &bytes[r.pos..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write(path.as_ref(), &encode_tensors(model.params()))
}

/// Loads parameters for a known architecture; shapes are validated against it.
pub fn load_model(path: impl AsRef<Path>, input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (params, rest) = decode_tensors(&bytes).map_err(|e| with_path(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} unexpected trailing bytes",
            path.display(),
            rest.len()
        )));
    }
    Model::from_params(input_shape, layers, params)
}

pub fn encode_perturbation(delta: &Tensor, ball: &NormBall) -> Vec<u8> {
    let mut out = encode_tensors(std::slice::from_ref(delta));
    out.push(ball.p.code());
    out.extend_from_slice(&ball.eps.to_le_bytes());
    out
}

pub fn decode_perturbation(bytes: &[u8]) -> Result<(Tensor, NormBall)> {
    let (mut tensors, rest) = decode_tensors(bytes)?;
    if tensors.len() != 1 {
        return Err(Error::Format(format!(
            "perturbation file holds {} tensors, expected 1",
            tensors.len()
        )));
    }
    if rest.len() != 9 {
        return Err(Error::Format(format!(
            "perturbation trailer is {} bytes, expected 9",
            rest.len()
        )));
    }
    let p = Norm::from_code(rest[0])?;
    let eps = f64::from_le_bytes(rest[1..].try_into().expect("8 bytes"));
    Ok((tensors.remove(0), NormBall::new(p, eps)?))
}

pub fn save_perturbation(path: impl AsRef<Path>, delta: &Tensor, ball: &NormBall) -> Result<()> {
    write(path.as_ref(), &encode_perturbation(delta, ball))
}

pub fn load_perturbation(path: impl AsRef<Path>) -> Result<(Tensor, NormBall)> {
    let path = path.as_ref();
    decode_perturbation(&read(path)?).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}
