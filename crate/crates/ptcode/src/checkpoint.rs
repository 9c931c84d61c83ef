//! Checkpoint archive: one file holding a JSON manifest plus every named
//! tensor as a shape header and row-major little-endian f64 data.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes  b"PTCODEC1"
//! u32     manifest JSON length, then the JSON bytes
//! u32     tensor count
//! repeat: u16 name length, name bytes,
//!         u32 rows, u32 cols, u8 trainable,
//!         rows*cols little-endian f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Matrix, ParameterStore};

const MAGIC: &[u8; 8] = b"PTCODEC1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub scale: String,
    pub d_w: usize,
    pub d_u: usize,
    pub d_c: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub step: u64,
}

pub fn save(path: &Path, manifest: &Manifest, store: &ParameterStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let manifest_json = serde_json::to_vec(manifest)?;
    w.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, t) in store.iter() {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.value.cols() as u32).to_le_bytes())?;
        w.write_all(&[t.trainable as u8])?;
        for v in t.value.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, ParameterStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint archive",
            path.display()
        )));
    }
    let manifest_len = read_u32(&mut r)? as usize;
    let mut manifest_buf = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_buf)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_buf)?;

    let count = read_u32(&mut r)? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Data("checkpoint tensor name is not utf-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.add(name, Matrix::from_vec(rows, cols, data), flag[0] != 0);
    }
    Ok((manifest, store))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
