//! Versioned binary checkpoints: a JSON config header followed by named
//! parameter tensors with shapes, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"PETCKPT\x01";

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    let header = serde_json::to_vec(cfg).map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;

    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io)?;
    for (_, entry) in store.iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in entry.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Vec<(String, Tensor)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = read_u64(&mut r, path)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io)?;
    let cfg: RunConfig = serde_json::from_slice(&header)
        .map_err(|e| Error::Data(format!("checkpoint config header: {e}")))?;

    let n_params = read_u64(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Data(format!("checkpoint parameter name: {e}")))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok((cfg, out))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
