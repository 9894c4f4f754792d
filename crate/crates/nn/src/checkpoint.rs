//! `PLNS` tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PLNS" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes | rank: u32 | dims: rank × u64 | payload: Π dims × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLNS";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(NnError::Format("truncated record header".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| NnError::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| NnError::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!("bad magic {magic:?}")));
    }
    let version = u32_of(&mut r)?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)
            .map_err(|_| NnError::Format("truncated name".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| NnError::Format("name is not UTF-8".into()))?;
        let rank = u32_of(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| NnError::Format("truncated dims".into()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| NnError::Format(format!("truncated payload for {name}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Removes and returns the tensor called `name`.
pub fn take(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| NnError::Format(format!("missing tensor {name}")))?;
    Ok(tensors.swap_remove(idx).1)
}
