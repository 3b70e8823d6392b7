//! HDCK checkpoint files: parameters plus optimizer velocity.
//!
//! Layout (little-endian): magic `HDCK`, `u16` version, `u64` optimizer step,
//! then two tensor tables (parameters, velocity). A table is a `u32` count
//! followed by entries of `u32` name length, UTF-8 name, `u8` dtype tag,
//! `u8` rank, `u64` per dimension, and the raw payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::Params;
use crate::error::{HdcError, Result};
use crate::tensor::{DType, Element, Tensor};
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 4] = b"HDCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Element> {
    pub params: Params<F>,
    pub state: OptimizerState<F>,
}

fn write_table<F: Element>(out: &mut Vec<u8>, table: &BTreeMap<String, Tensor<F>>) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.push(t.rank() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            v.write_le(out);
        }
    }
}

pub fn encode_checkpoint<F: Element>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.state.step.to_le_bytes());
    let params: BTreeMap<String, Tensor<F>> = ckpt
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    write_table(&mut out, &params);
    write_table(&mut out, &ckpt.state.velocity);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> HdcError {
        HdcError::CorruptFile {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn table<F: Element>(&mut self) -> Result<BTreeMap<String, Tensor<F>>> {
        let count = self.u32()?;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| self.corrupt("tensor name is not UTF-8"))?
                .to_string();
            let tag = self.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| self.corrupt(format!("unknown dtype tag {tag}")))?;
            if dtype != F::DTYPE {
                return Err(self.corrupt(format!(
                    "tensor {name} stored as {dtype:?}, expected {:?}",
                    F::DTYPE
                )));
            }
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| self.corrupt(format!("tensor {name} shape overflows")))?;
            let size = dtype.size();
            let payload = self.take(numel.saturating_mul(size))?;
            let data = payload.chunks_exact(size).map(F::read_le).collect();
            if table
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(self.corrupt(format!("duplicate tensor {name}")));
            }
        }
        Ok(table)
    }
}

pub fn decode_checkpoint<F: Element>(bytes: &[u8], path: &Path) -> Result<Checkpoint<F>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(HdcError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let step = r.u64()?;
    let params = Params::from_map(r.table()?);
    let velocity = r.table()?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        params,
        state: OptimizerState { velocity, step },
    })
}

pub fn save_checkpoint<F: Element>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HdcError::io(dir, e))?;
    }
    // Written to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| HdcError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HdcError::io(path, e))
}

pub fn load_checkpoint<F: Element>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| HdcError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, init_params};

    fn sample() -> Checkpoint<f32> {
        let params: Params<f32> = init_params(&EncoderConfig::default(), 3).unwrap();
        let velocity = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::from_fn(t.shape(), |i| i as f32 * 0.5)))
            .collect();
        Checkpoint {
            params,
            state: OptimizerState { velocity, step: 17 },
        }
    }

    #[test]
    fn round_trip() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt);
        let back: Checkpoint<f32> = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&sample());
        let p = Path::new("mem");
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3], p),
            Err(HdcError::CorruptFile { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&bad, p),
            Err(HdcError::CorruptFile { .. })
        ));
        let mut old = bytes.clone();
        old[4] = 9;
        assert!(matches!(
            decode_checkpoint::<f32>(&old, p),
            Err(HdcError::VersionMismatch { found: 9, .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra, p).is_err());
        assert!(decode_checkpoint::<f64>(&bytes, p).is_err());
    }
}
