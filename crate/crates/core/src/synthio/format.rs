//! Binary tensor format.
//!
//! A tensor block is the magic `EGT1`, a dtype code byte, the rank as a
//! little-endian `u64`, each dimension as a little-endian `u64`, then the
//! row-major little-endian payload. An archive file is a sequence of named
//! entries, each a `u64` name length, the UTF-8 name, and a tensor block.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EGT1";
const MAX_RANK: u64 = 8;
const MAX_NAME: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// A tensor tagged with its on-disk element type. Values are held as `f64`;
/// writing as `F32` or `U8` is exact only for representable values.
#[derive(Clone, Debug, PartialEq)]
pub struct Stored {
    pub dtype: DType,
    pub tensor: Tensor,
}

impl Stored {
    pub fn new(dtype: DType, tensor: Tensor) -> Self {
        Self { dtype, tensor }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, dtype: DType, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * dtype.size());
    for &v in t.data() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            DType::U8 => buf.push(v as u8),
        }
    }
    w.write_all(&buf)
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parsed tensor header: dtype, shape and payload size in bytes.
fn read_header<R: Read>(r: &mut R) -> std::result::Result<(DType, Vec<usize>, u64), String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code).map_err(|e| e.to_string())?;
    let dtype = DType::from_code(code[0]).ok_or_else(|| format!("unknown dtype code {}", code[0]))?;
    let rank = read_u64(r).map_err(|e| e.to_string())?;
    if rank > MAX_RANK {
        return Err(format!("rank {rank} exceeds {MAX_RANK}"));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r).map_err(|e| e.to_string())?;
        n = n.checked_mul(d).ok_or("shape overflows")?;
        shape.push(d as usize);
    }
    let bytes = n.checked_mul(dtype.size() as u64).ok_or("payload size overflows")?;
    Ok((dtype, shape, bytes))
}

fn read_payload<R: Read>(r: &mut R, dtype: DType, shape: Vec<usize>, bytes: u64) -> std::result::Result<Stored, String> {
    let mut buf = vec![0u8; bytes as usize];
    r.read_exact(&mut buf).map_err(|e| format!("truncated payload: {e}"))?;
    let data: Vec<f64> = match dtype {
        DType::F32 => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::U8 => buf.iter().map(|&b| b as f64).collect(),
    };
    let tensor = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
    Ok(Stored { dtype, tensor })
}

pub fn read_tensor<R: Read>(r: &mut R) -> std::result::Result<Stored, String> {
    let (dtype, shape, bytes) = read_header(r)?;
    read_payload(r, dtype, shape, bytes)
}

/// Writes named entries in the given order.
pub fn write_archive(path: &Path, entries: &[(String, Stored)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for (name, s) in entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(&mut w, s.dtype, &s.tensor)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads the entries of an archive for which `want(name)` holds, skipping
/// the payload of all others. Returned in file order.
pub fn read_archive(path: &Path, want: impl Fn(&str) -> bool) -> Result<BTreeMap<String, Stored>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let mut out = BTreeMap::new();
    let corrupt = |reason: String| Error::corrupt(path, reason);
    loop {
        let pos = r.stream_position().map_err(|e| Error::io(path, e))?;
        if pos == len {
            break;
        }
        let name_len = read_u64(&mut r).map_err(|e| corrupt(format!("entry header at byte {pos}: {e}")))?;
        if name_len > MAX_NAME {
            return Err(corrupt(format!("entry name length {name_len} at byte {pos}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(|e| corrupt(format!("entry name at byte {pos}: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| corrupt(format!("non-UTF-8 entry name at byte {pos}")))?;
        let (dtype, shape, bytes) = read_header(&mut r).map_err(|e| corrupt(format!("entry `{name}`: {e}")))?;
        let here = r.stream_position().map_err(|e| Error::io(path, e))?;
        if here.saturating_add(bytes) > len {
            return Err(corrupt(format!("entry `{name}` runs past end of file")));
        }
        if want(&name) {
            let s = read_payload(&mut r, dtype, shape, bytes).map_err(|e| corrupt(format!("entry `{name}`: {e}")))?;
            out.insert(name, s);
        } else {
            r.seek(SeekFrom::Current(bytes as i64)).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(out)
}
