//! Binary weight checkpoints.
//!
//! Layout (little endian): magic `MBWT`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` dims
//! and `f32` data.

use crate::error::{AutodiffError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MBWT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write, T: Real>(mut w: W, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| AutodiffError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| AutodiffError::Checkpoint(format!("rank too large for {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| AutodiffError::Checkpoint(format!("dimension too large for {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => AutodiffError::Checkpoint("truncated".into()),
        _ => AutodiffError::Io(e),
    })?;
    Ok(buf)
}

/// Reads every named tensor, converting to `T`.
pub fn read_checkpoint<R: Read, T: Real>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    if read_array::<4, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| AutodiffError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_array::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| AutodiffError::Checkpoint(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}
