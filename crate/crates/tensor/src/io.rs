//! Binary checkpoint files: a UTF-8 metadata blob followed by named tensors.
//!
//! Layout (little endian): magic `S2IC`, `u32` version, `u32` metadata
//! length + bytes, `u32` tensor count, then per tensor `u32` name length +
//! name, `u32` rank, `u64` dims, `f64` values. Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"S2IC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: String, reason: String },
}

pub fn save_checkpoint(
    path: &Path,
    meta: &str,
    tensors: &ParamStore,
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_all(&mut w, meta, tensors).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn write_all(w: &mut impl Write, meta: &str, tensors: &ParamStore) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore), CheckpointError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    read_all(&mut BufReader::new(file)).map_err(|e| match e {
        ReadError::Io(source) => CheckpointError::Io { path: p, source },
        ReadError::Format(reason) => CheckpointError::Format { path: p, reason },
    })
}

enum ReadError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, ReadError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ReadError::Format("non UTF-8 string".into()))
}

fn read_all(r: &mut impl Read) -> Result<(String, ParamStore), ReadError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ReadError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(ReadError::Format(format!("unsupported version {version}")));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let meta = read_string(r, meta_len)?;
    let count = r.read_u32::<LittleEndian>()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let name = read_string(r, name_len)?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if rank > 8 {
            return Err(ReadError::Format(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        if store.contains(&name) {
            return Err(ReadError::Format(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/x.ckpt");
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(&[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]));
        s.insert("step", Tensor::scalar(3.0));
        save_checkpoint(&path, "{\"epoch\":3}", &s).unwrap();
        let (meta, back) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, "{\"epoch\":3}");
        for (k, t) in s.iter() {
            let b = back.get(k).unwrap();
            assert_eq!(t.shape(), b.shape());
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint(Path::new("/nonexistent/q.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/q.ckpt"));
    }
}
