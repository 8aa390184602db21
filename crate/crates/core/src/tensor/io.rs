//! The `TSR1` binary tensor record.
//!
//! Layout: magic `TSR1`, one dtype byte (0 = f32, 1 = f64), one rank byte,
//! `rank` little-endian u32 extents, then the row-major payload in
//! little-endian order.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TSR_MAGIC: &[u8; 4] = b"TSR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> std::io::Result<()> {
    w.write_all(TSR_MAGIC)?;
    w.write_all(&[dtype.code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)
}

/// Reads one record; `origin` names the source in error messages.
pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<(Tensor, DType)> {
    let bad = |msg: String| Error::format(origin, msg);
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|e| bad(format!("truncated header: {e}")))?;
    if &head[..4] != TSR_MAGIC {
        return Err(bad(format!("bad magic {:?}", &head[..4])));
    }
    let dtype = DType::from_code(head[4]).ok_or_else(|| bad(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| bad(format!("truncated extents: {e}")))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(bad(format!("zero extent in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload).map_err(|e| bad(format!("truncated payload: {e}")))?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?;
    Ok((t, dtype))
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, dtype)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let out = read_tensor(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", cursor.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        let mut expect = b"TSR1".to_vec();
        expect.extend_from_slice(&[0, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let t = Tensor::new(&[3], vec![0.1, -1e-300, 7.25]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        let (back, dt) = read_tensor(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(dt, DType::F64);
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::ones(&[4]), DType::F64).unwrap();
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(read_tensor(&mut corrupt.as_slice(), Path::new("x")), Err(Error::Format { .. })));
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor(&mut buf.as_slice(), Path::new("x")), Err(Error::Format { .. })));
    }
}
