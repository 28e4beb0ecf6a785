//! Flat binary container for named tensors.
//!
//! Layout: 4 magic bytes, version `u16` LE, then one record per tensor:
//! name length `u16` LE, UTF-8 name, rank `u8`, dims `u32` LE each,
//! payload as `f64` LE. Records run to the end of the file.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Magic for model parameter sets.
pub const MAGIC_PARAMS: [u8; 4] = *b"FCPS";
/// Magic for convolution / transposed-convolution parameter sets.
pub const MAGIC_CONV_PARAMS: [u8; 4] = *b"FCCV";

const VERSION: u16 = 1;

pub fn write_named_tensors(
    path: &Path,
    magic: [u8; 4],
    entries: &[(String, &Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Usage(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named_tensors(path: &Path, magic: [u8; 4]) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 4];
    read_exact(&mut r, &mut m, "magic")?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut v = [0u8; 2];
    read_exact(&mut r, &mut v, "version")?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read(&mut len_buf)? {
            0 => break,
            1 => {
                let n = r.read(&mut len_buf[1..])?;
                if n == 0 {
                    return Err(Error::Format("truncated record header".into()));
                }
            }
            _ => {}
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        read_exact(&mut r, &mut rank_buf, "rank")?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            read_exact(&mut r, &mut d, "dims")?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut f = [0u8; 8];
            read_exact(&mut r, &mut f, "payload")?;
            data.push(f64::from_le_bytes(f));
        }
        out.push((
            name,
            Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?,
        ));
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))
}

impl super::ParameterSet {
    /// Write to the `FCPS` container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.named_tensors();
        let owned: Vec<(String, &Tensor)> = entries;
        write_named_tensors(path, MAGIC_PARAMS, &owned)
    }

    /// Read from the `FCPS` container and validate against `spec`.
    pub fn load(path: &Path, spec: &super::ModelSpec) -> Result<Self> {
        let entries = read_named_tensors(path, MAGIC_PARAMS)?;
        Self::from_named_tensors(spec, &entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerDesc, ModelSpec, ParameterSet};

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = ModelSpec::build(
            &[1, 6, 6],
            &[LayerDesc::conv("c", 2, (3, 3)), LayerDesc::dense("f", 4)],
            4,
        )
        .unwrap();
        let p = ParameterSet::init(&spec, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fcps");
        p.save(&path).unwrap();
        let q = ParameterSet::load(&path, &spec).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(matches!(
            read_named_tensors(&path, MAGIC_PARAMS),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncation_is_format_error() {
        let spec = ModelSpec::build(&[2], &[LayerDesc::dense("f", 2)], 2).unwrap();
        let p = ParameterSet::init(&spec, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fcps");
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_named_tensors(&path, MAGIC_PARAMS),
            Err(Error::Format(_))
        ));
    }
}
