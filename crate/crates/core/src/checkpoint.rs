//! Binary tensor records.
//!
//! Layout (all integers little-endian): magic `ECSH`, `u32` version (1),
//! `u32` tensor count, then for each tensor a `u16` name length, the UTF-8
//! name, a `u8` rank, one `u32` per dimension, and the values as
//! little-endian 32-bit floats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ECSH";
pub const VERSION: u32 = 1;

pub fn write_records<S: Scalar, W: Write>(out: &mut W, records: &[(&str, &Tensor<S>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(records.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in records {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        let rank = u8::try_from(t.dims().len()).map_err(|_| Error::Format(format!("rank too high: {name}")))?;
        out.write_all(&[rank])?;
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            let f = v.to_f32().ok_or_else(|| Error::Format(format!("value of {name} not representable")))?;
            buf.extend_from_slice(&f.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated tensor file: {e}")))?;
    Ok(b)
}

pub fn read_records<S: Scalar, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    if &read_exact::<_, 4>(input)? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let version = u32::from_le_bytes(read_exact(input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(input)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(input)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_exact::<_, 1>(input)?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_exact(input)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated data for {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_records<S: Scalar>(path: &Path, records: &[(&str, &Tensor<S>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_records<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = std::fs::read(path)?;
    read_records(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &[("ab", &t)]).unwrap();
        let mut expect = b"ECSH".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.push(2);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn round_trip_and_corruption() {
        let a = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32 * 0.25 - 1.0);
        let b = Tensor::<f32>::from_fn(&[5], |i| i as f32);
        let mut buf = Vec::new();
        write_records(&mut buf, &[("a", &a), ("blocks.0.x", &b)]).unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("blocks.0.x".to_string(), b)]);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_records::<f32, _>(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_records::<f32, _>(&mut &short[..]), Err(Error::Format(_))));
    }
}
