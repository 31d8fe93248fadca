//! Binary checkpoint format.
//!
//! Layout: the magic `APECKPT1`, one byte of scalar width, a manifest of
//! (name, shape, offset) entries, then one contiguous block of raw
//! little-endian values. Entries are written in name order so identical
//! parameters always serialize to identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

const MAGIC: &[u8; 8] = b"APECKPT1";

/// Serialize named tensors to `path`.
pub fn write_checkpoint<F: Scalar>(path: &Path, entries: &[(String, &Tensor<F>)]) -> Result<()> {
    let mut sorted: Vec<&(String, &Tensor<F>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    manifest.extend_from_slice(MAGIC);
    manifest.push(F::WIDTH);
    manifest.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, tensor) in &sorted {
        let bytes = name.as_bytes();
        manifest.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        manifest.extend_from_slice(bytes);
        manifest.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            manifest.extend_from_slice(&(d as u64).to_le_bytes());
        }
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
    }
    manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    manifest.extend_from_slice(&payload);
    fs::write(path, manifest).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read back all named tensors from `path`; the stored scalar width must
/// match `F`.
pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<F>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let width = r.take(1)?[0];
    if width != F::WIDTH {
        return Err(Error::Checkpoint(format!(
            "{}: stored scalar width {width} does not match requested width {}",
            path.display(),
            F::WIDTH
        )));
    }
    let count = r.u32()? as usize;
    let mut meta = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        meta.push((name, shape, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;

    let w = F::WIDTH as usize;
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in meta {
        let n: usize = shape.iter().product();
        let end = offset + n * w;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: value block [{offset}, {end}) outside payload of {} bytes",
                payload.len()
            )));
        }
        let data: Vec<F> = (0..n)
            .map(|i| F::read_le(&payload[offset + i * w..]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.5, -0.875]).unwrap();
        let b = Tensor::from_vec(vec![0.1f64, 0.2]);
        write_checkpoint(&path, &[("b".to_string(), &b), ("a".to_string(), &a)]).unwrap();
        let entries = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "a");
        assert_eq!(entries[0].1, a);
        assert_eq!(entries[1].0, "b");
        assert_eq!(entries[1].1, b);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Tensor::from_vec(vec![1.0f32]);
        write_checkpoint(&path, &[("a".to_string(), &a)]).unwrap();
        assert!(matches!(
            read_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not-a-ckpt");
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(matches!(
            read_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
