//! CKP1 archives: a count followed by named TSR1 records.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor, DType};
use crate::tensor::Tensor;

pub const CKP_MAGIC: &[u8; 4] = b"CKP1";

pub fn write_archive<W: Write>(w: &mut W, entries: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(CKP_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t, DType::F64)?;
    }
    Ok(())
}

pub fn save_archive(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_archive(&mut f, entries)?;
    f.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: String| Error::format(path, msg);
    let mut r = bytes.as_slice();
    if r.len() < 8 || &r[..4] != CKP_MAGIC {
        return Err(bad("missing CKP1 magic".into()));
    }
    let count = u32::from_le_bytes(r[4..8].try_into().unwrap()) as usize;
    r = &r[8..];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if r.len() < 2 {
            return Err(bad("truncated name length".into()));
        }
        let len = u16::from_le_bytes([r[0], r[1]]) as usize;
        r = &r[2..];
        if r.len() < len {
            return Err(bad("truncated name".into()));
        }
        let name = std::str::from_utf8(&r[..len]).map_err(|e| bad(format!("name is not UTF-8: {e}")))?.to_owned();
        r = &r[len..];
        let (t, _) = read_tensor(&mut r, path)?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckp1");
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 / 7.0);
        let b = Tensor::scalar(-0.1);
        save_archive(&p, &[("a", &a), ("b.c", &b)]).unwrap();
        let back = load_archive(&p).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.c".to_string(), b)]);
    }

    #[test]
    fn corrupt_archives_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckp1");
        std::fs::write(&p, b"CKP2\0\0\0\0").unwrap();
        let err = load_archive(&p).unwrap_err();
        assert!(err.to_string().contains("bad.ckp1"));
        std::fs::write(&p, b"CKP1\x01\0\0\0").unwrap();
        assert!(matches!(load_archive(&p), Err(Error::Format { .. })));
    }
}
