//! Little-endian binary helpers for checkpoint files.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 8], version: u32) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, version)
}

pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8], version: u32) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::format(format!(
            "unsupported version {v}, expected {version}"
        )));
    }
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::format(e.to_string()))
}
