//! Binary checkpoint container.
//!
//! ```text
//! "LSEG"                       magic
//! u32                          format version
//! u32 + bytes                  config echo (UTF-8 `key=value` lines)
//! u32                          record count
//! per record:
//!   u32 + bytes                tensor name
//!   4 x u64                    shape
//!   numel x f64                values
//! ```
//! All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BackboneConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_checkpoint(params: &NetworkParams, w: &mut impl Write) -> Result<()> {
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);
    put(CHECKPOINT_MAGIC)?;
    put(&CHECKPOINT_VERSION.to_le_bytes())?;
    let echo = params.config().to_text();
    put(&(echo.len() as u32).to_le_bytes())?;
    put(echo.as_bytes())?;
    let store = params.store();
    put(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        for d in tensor.shape().dims() {
            put(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 8);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, limit: usize) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(Error::Checkpoint(format!("string length {len} exceeds {limit}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(io_err)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<NetworkParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = BackboneConfig::from_text(&read_string(r, 1 << 16)?)?;
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(r, 1 << 12)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(r)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = shape.numel();
        if numel > 1 << 28 {
            return Err(Error::Checkpoint(format!("tensor `{name}` too large: {shape}")));
        }
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    NetworkParams::from_store(config, store)
}

pub fn save_checkpoint(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
