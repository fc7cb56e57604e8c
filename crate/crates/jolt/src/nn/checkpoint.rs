//! Binary parameter snapshots.
//!
//! Format: `JLTC` magic, u32 version, u64 entry count, then per entry a
//! length-prefixed utf8 name, u32 depth, u64 rank + u64 dims, and raw f64
//! little-endian data. Same entries in, same bytes out: all integers are
//! fixed-width LE and entry order is the caller's, so snapshots of identical
//! parameters are byte-identical files.
//!
//! Writes go through a sibling temp file and an atomic rename; a crash mid
//! write never leaves a half-formed checkpoint at the target path.

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"JLTC";
const VERSION: u32 = 1;

// Sanity caps so a corrupt header cannot demand an absurd allocation.
const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_NUMEL: u64 = 1 << 30;

/// One named tensor in a checkpoint, with its layer depth.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub depth: usize,
    pub tensor: Tensor,
}

pub fn save_entries(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArg(format!("checkpoint path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        write_all(&mut w, &tmp, MAGIC)?;
        write_all(&mut w, &tmp, &VERSION.to_le_bytes())?;
        write_all(&mut w, &tmp, &(entries.len() as u64).to_le_bytes())?;
        for e in entries {
            let name = e.name.as_bytes();
            write_all(&mut w, &tmp, &(name.len() as u64).to_le_bytes())?;
            write_all(&mut w, &tmp, name)?;
            write_all(&mut w, &tmp, &(e.depth as u32).to_le_bytes())?;
            write_all(&mut w, &tmp, &(e.tensor.shape().len() as u64).to_le_bytes())?;
            for &d in e.tensor.shape() {
                write_all(&mut w, &tmp, &(d as u64).to_le_bytes())?;
            }
            for &v in e.tensor.data() {
                write_all(&mut w, &tmp, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    read_exact(&mut r, path, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::corrupt(
            path,
            format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        ));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(Error::corrupt(
            path,
            format!("unsupported version {version}, this build reads {VERSION}"),
        ));
    }
    let count = read_u64(&mut r, path, "entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let ctx = format!("entry {i}");
        let name_len = read_u64(&mut r, path, &ctx)?;
        if name_len > MAX_NAME {
            return Err(Error::corrupt(path, format!("{ctx}: name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact(&mut r, path, &mut name_bytes, &ctx)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::corrupt(path, format!("{ctx}: name is not utf8")))?;
        let depth = read_u32(&mut r, path, &name)? as usize;
        let rank = read_u64(&mut r, path, &name)?;
        if rank > MAX_RANK {
            return Err(Error::corrupt(path, format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r, path, &name)?;
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(Error::corrupt(path, format!("{name}: {numel} elements")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, path, &mut buf, &name)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push(CheckpointEntry {
            name,
            depth,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }
    // Trailing bytes mean the file is not what the header claims.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(entries),
        Ok(_) => Err(Error::corrupt(path, "trailing bytes after last entry")),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_all(w: &mut impl Write, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::corrupt(path, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, path, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, path, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
