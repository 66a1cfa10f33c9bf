//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FCLIPTNS"
//! version  u32
//! count    u64
//! count × { name_len u32 | name utf-8 | rank u32 | dims u64 × rank | payload f64 × numel }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Parameters, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FCLIPTNS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(
    mut out: W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint stream; `origin` only labels error messages.
pub fn read_tensors<R: Read>(mut input: R, origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |detail: String| Error::Format { what: "checkpoint", path: origin.to_path_buf(), detail };
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut input).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut input).map_err(io)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input).map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = read_u32(&mut input).map_err(io)? as usize;
        if rank > 8 {
            return Err(bad(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input).map_err(io)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        input.read_exact(&mut bytes).map_err(io)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(tensors)
}

pub fn save_parameters(path: &Path, params: &Parameters) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let items: Vec<_> = params.iter().collect();
    write_tensors(BufWriter::new(file), items.into_iter()).map_err(|e| Error::io(path, e))
}

pub fn load_parameters(path: &Path) -> Result<Parameters> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut params = Parameters::new();
    for (name, t) in read_tensors(BufReader::new(file), path)? {
        params.insert(name, t);
    }
    Ok(params)
}
