//! Binary tensor files.
//!
//! Layout: magic `TNSR`, version `u8` (currently 1), dtype code `u8`
//! (0 = f64, 1 = f32), rank `u8`, then `rank` little-endian `u64` extents,
//! then the row-major payload in the declared dtype.
//!
//! All computation is f64; the f32 dtype exists purely as a storage option
//! for readers of externally produced files. This writer always emits f64 so
//! that write→read round-trips are bitwise exact.

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cobert_core::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Write `t` to `path` as an f64 TNSR file.
pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 8 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F64);
    let rank = u8::try_from(t.shape().len()).context("tensor rank exceeds 255")?;
    buf.push(rank);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing tensor file {}", path.display()))?;
    Ok(())
}

/// Read a TNSR file; f32 payloads are widened to f64.
pub fn read(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)
        .with_context(|| format!("opening tensor file {}", path.display()))?;
    let mut head = [0u8; 7];
    f.read_exact(&mut head)
        .with_context(|| format!("reading tensor header of {}", path.display()))?;
    if &head[0..4] != MAGIC {
        bail!("{}: not a TNSR file (bad magic)", path.display());
    }
    if head[4] != VERSION {
        bail!("{}: unsupported TNSR version {}", path.display(), head[4]);
    }
    let dtype = head[5];
    if dtype != DTYPE_F64 && dtype != DTYPE_F32 {
        bail!("{}: unknown dtype code {dtype}", path.display());
    }
    let rank = head[6] as usize;
    let mut ext = vec![0u8; 8 * rank];
    f.read_exact(&mut ext)
        .with_context(|| format!("reading tensor extents of {}", path.display()))?;
    let shape: Vec<usize> = ext
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let elem = if dtype == DTYPE_F64 { 8 } else { 4 };
    let mut payload = vec![0u8; numel * elem];
    f.read_exact(&mut payload)
        .with_context(|| format!("reading tensor payload of {}", path.display()))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        bail!("{}: trailing bytes after payload", path.display());
    }
    let data: Vec<f64> = if dtype == DTYPE_F64 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect()
    };
    Tensor::new(shape, data).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tnsr");
        let t = Tensor::new(
            vec![3, 2, 2],
            vec![0.1, -2.5, 1e-300, f64::MAX, -0.0, 3.141592653589793, 7.0, 1e300, 0.3, 1.0 / 3.0, -1e-9, 42.0],
        )
        .unwrap();
        write(&p, &t).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn f32_payload_is_widened() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t32.tnsr");
        let vals: Vec<f32> = vec![1.5, -0.25, 3.75, 100.0];
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TNSR");
        buf.push(1);
        buf.push(1); // f32
        buf.push(2);
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        for v in &vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, buf).unwrap();
        let t = read(&p).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.5, -0.25, 3.75, 100.0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tnsr");
        fs::write(&p, b"NOPE").unwrap();
        assert!(read(&p).is_err());

        let q = dir.path().join("short.tnsr");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write(&q, &t).unwrap();
        let full = fs::read(&q).unwrap();
        fs::write(&q, &full[..full.len() - 3]).unwrap();
        assert!(read(&q).is_err());

        let r = dir.path().join("long.tnsr");
        let mut padded = full.clone();
        padded.push(0);
        fs::write(&r, padded).unwrap();
        assert!(read(&r).is_err());
    }

    #[test]
    fn scalar_and_vector_shapes_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tnsr");
        let t = Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write(&p, &t).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back.shape(), &[5]);
        assert!(back.bit_eq(&t));
    }
}
