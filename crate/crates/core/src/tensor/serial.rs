//! `OFAT` flat binary tensor format.
//!
//! Layout: magic bytes `OFAT`, u8 dtype code (0 = f32, 1 = f64), u8 rank,
//! rank x u32 little-endian extents, then raw little-endian element data in
//! row-major order.

use std::fs;
use std::path::Path;

use super::{numel, Dtype, Elem, Tensor};
use crate::{Error, Result};

pub const OFAT_MAGIC: &[u8; 4] = b"OFAT";

impl<T: Elem> Tensor<T> {
    pub fn to_ofat_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let data = self.data();
        let mut out = Vec::with_capacity(6 + 4 * shape.len() + data.len() * 8);
        out.extend_from_slice(OFAT_MAGIC);
        out.push(T::DTYPE.code());
        out.push(shape.len() as u8);
        for &e in &shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in data.iter() {
            v.write_le(&mut out);
        }
        out
    }

    pub fn save_ofat(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ofat_bytes())?;
        Ok(())
    }

    /// Parses an `OFAT` blob. Data stored at the other precision is
    /// converted element-wise.
    pub fn from_ofat_bytes(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
        let fmt = |details: String| Error::Format {
            path: path.to_path_buf(),
            details,
        };
        if bytes.len() < 6 {
            return Err(fmt("truncated header".into()));
        }
        if &bytes[..4] != OFAT_MAGIC {
            return Err(fmt(format!(
                "bad magic {:?}, expected OFAT",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let dtype = Dtype::from_code(bytes[4])
            .ok_or_else(|| fmt(format!("unknown dtype code {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(fmt("truncated extents".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for r in 0..rank {
            let off = 6 + 4 * r;
            shape.push(u32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]) as usize);
        }
        let n = numel(&shape);
        let esz = dtype.byte_size();
        if bytes.len() != header + n * esz {
            return Err(fmt(format!(
                "truncated payload: expected {} bytes, got {}",
                header + n * esz,
                bytes.len()
            )));
        }
        let payload = &bytes[header..];
        let data: Vec<T> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| T::of_f64(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| T::of_f64(f64::read_le(c)))
                .collect(),
        };
        Tensor::from_vec(shape, data)
    }

    pub fn load_ofat(path: &Path) -> Result<Tensor<T>> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        Self::from_ofat_bytes(path, &bytes)
    }
}
