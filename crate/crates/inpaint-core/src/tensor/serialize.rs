//! Binary tensor and checkpoint formats.
//!
//! ZTEN record: magic "ZTEN", version byte 0x01, dtype byte (0x01 = f32,
//! 0x02 = f64), rank byte, rank little-endian u32 extents, then the
//! row-major little-endian payload.
//!
//! Checkpoint container: u32 entry count, then repeated
//! (u16 name length, UTF-8 name, embedded ZTEN record).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const ZTEN_MAGIC: &[u8; 4] = b"ZTEN";
pub const ZTEN_VERSION: u8 = 0x01;

/// A tensor of either supported dtype, as read back from disk.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }

    /// Exact-dtype extraction; a dtype mismatch is a checkpoint error.
    pub fn into_exact<T: Scalar>(self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::checkpoint(format!(
                "tensor '{name}' stored as {:?}, expected {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            DynTensor::F32(t) => t.cast::<T>(),
            DynTensor::F64(t) => t.cast::<T>(),
        })
    }
}

pub fn write_zten<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * T::DTYPE.width());
    buf.extend_from_slice(ZTEN_MAGIC);
    buf.push(ZTEN_VERSION);
    buf.push(T::DTYPE.byte());
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_zten<R: Read>(r: &mut R) -> Result<DynTensor> {
    let head = read_exact_bytes(r, 7)?;
    if &head[0..4] != ZTEN_MAGIC {
        return Err(Error::checkpoint("bad ZTEN magic"));
    }
    if head[4] != ZTEN_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported ZTEN version {}",
            head[4]
        )));
    }
    let dtype = Dtype::from_byte(head[5])?;
    let rank = head[6] as usize;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(Error::checkpoint(format!("bad ZTEN rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = read_exact_bytes(r, 4)?;
        shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = read_exact_bytes(r, numel * dtype.width())?;
    Ok(match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload.chunks_exact(4).map(f32::read_le).collect();
            DynTensor::F32(Tensor::from_vec(data, &shape).map_err(|e| {
                Error::checkpoint(format!("invalid ZTEN shape {shape:?}: {e}"))
            })?)
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload.chunks_exact(8).map(f64::read_le).collect();
            DynTensor::F64(Tensor::from_vec(data, &shape).map_err(|e| {
                Error::checkpoint(format!("invalid ZTEN shape {shape:?}: {e}"))
            })?)
        }
    })
}

pub fn save_zten<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_zten(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_zten(path: impl AsRef<Path>) -> Result<DynTensor> {
    let mut f = BufReader::new(File::open(path)?);
    read_zten(&mut f)
}

/// Ordered named-tensor container used for model parameters.
pub fn write_checkpoint<T: Scalar, W: Write>(
    w: &mut W,
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::checkpoint(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_zten(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, DynTensor)>> {
    let b = read_exact_bytes(r, 4)?;
    let count = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let b = read_exact_bytes(r, 2)?;
        let nlen = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = String::from_utf8(read_exact_bytes(r, nlen)?)
            .map_err(|_| Error::checkpoint("non-UTF8 tensor name"))?;
        let t = read_zten(r)?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut f, entries)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, DynTensor)>> {
    let mut f = BufReader::new(File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zten_layout_is_bit_exact() {
        let t = Tensor::from_vec(vec![1.0f32, -2.5], &[1, 2]).unwrap();
        let mut buf = Vec::new();
        write_zten(&mut buf, &t).unwrap();
        let mut expect = vec![b'Z', b'T', b'E', b'N', 0x01, 0x01, 0x02];
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn zten_round_trip_both_dtypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Tensor<f32> = Tensor::randn(&mut rng, &[2, 3, 4], 1.0);
        let mut buf = Vec::new();
        write_zten(&mut buf, &a).unwrap();
        match read_zten(&mut buf.as_slice()).unwrap() {
            DynTensor::F32(b) => assert!(a.bitwise_eq(&b)),
            _ => panic!("wrong dtype"),
        }

        let a: Tensor<f64> = Tensor::randn(&mut rng, &[5], 1.0);
        let mut buf = Vec::new();
        write_zten(&mut buf, &a).unwrap();
        match read_zten(&mut buf.as_slice()).unwrap() {
            DynTensor::F64(b) => assert!(a.bitwise_eq(&b)),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_order_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries = vec![
            ("layer0.w".to_string(), Tensor::<f32>::randn(&mut rng, &[4, 3], 1.0)),
            ("layer0.b".to_string(), Tensor::<f32>::randn(&mut rng, &[4], 1.0)),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            match t1 {
                DynTensor::F32(t) => assert!(t0.bitwise_eq(t)),
                _ => panic!("wrong dtype"),
            }
        }
    }

    #[test]
    fn truncated_record_is_a_checkpoint_error() {
        let t = Tensor::from_vec(vec![1.0f32; 6], &[2, 3]).unwrap();
        let mut buf = Vec::new();
        write_zten(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_zten(&mut buf.as_slice()).is_err());
    }
}
