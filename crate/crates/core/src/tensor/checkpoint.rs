//! `TNSR1` container: the magic `b"TNSR1\0"` followed by records of
//! `name_len: u16 LE | name | rank: u8 | extents: u32 LE * rank | f32 LE data`.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"TNSR1\0";

pub fn write<W: Write>(mut out: W, records: &[(&str, &Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in records {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::Parameter(format!("record name too long: {} bytes", nb.len())))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Parameter(format!("rank {} too large", t.rank())))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Parameter(format!("extent {d} too large")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format {
                offset: *pos as u64,
                message: format!("truncated {what}: need {n} bytes, have {}", bytes.len() - *pos),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 6, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing TNSR1 magic".into(),
        });
    }
    let mut records = Vec::new();
    while pos < bytes.len() {
        let start = pos;
        let len = u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, len, "name")?)
            .map_err(|e| Error::Format {
                offset: start as u64 + 2,
                message: format!("record name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = take(&mut pos, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4, "extent")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: start as u64,
            message: format!("record {name:?}: {e}"),
        })?;
        records.push((name, t));
    }
    Ok(records)
}

pub fn read<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    read_bytes(&bytes)
}

pub fn save(path: impl AsRef<Path>, records: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_bytes(&std::fs::read(path)?)
}

pub fn find<'a>(records: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Config(format!("missing TNSR1 record {name:?}")))
}
