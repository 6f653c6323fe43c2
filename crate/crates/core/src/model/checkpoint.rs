//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "ACMP"            4 bytes
//! version           u32
//! config length     u32, then that many bytes of UTF-8 JSON (ModelConfig)
//! per parameter, in Model::named_parameters order:
//!   name length     u32, then the name bytes
//!   rank            u32
//!   dims            rank × u64
//!   data            product(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_model, parameter_layout, Model, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACMP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), ModelError> {
    let json = serde_json::to_vec(model.config()).map_err(|e| err(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in model.named_parameters() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let file = File::create(path)?;
    write_checkpoint(model, BufWriter::new(file))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Expected byte length of everything after the config JSON.
fn body_len(config: &ModelConfig) -> u64 {
    parameter_layout(config)
        .iter()
        .map(|(name, shape)| {
            let n: u64 = shape.iter().map(|&d| d as u64).product();
            4 + name.len() as u64 + 4 + 8 * shape.len() as u64 + 8 * n
        })
        .sum()
}

/// Reads a checkpoint of known total length `total_len`. The length is
/// checked against the layout implied by the embedded config before any
/// tensor data is read.
pub fn read_checkpoint<R: Read>(mut r: R, total_len: u64) -> Result<Model, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let json_len = read_u32(&mut r)? as u64;
    if 12 + json_len > total_len {
        return Err(err(format!("config length {json_len} overruns a {total_len}-byte file")));
    }
    let mut json = vec![0u8; json_len as usize];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| err(format!("config: {e}")))?;
    config.validate()?;
    let expected = 12 + json_len + body_len(&config);
    if expected != total_len {
        return Err(err(format!("file is {total_len} bytes but its config implies {expected}")));
    }

    let layout = parameter_layout(&config);
    let mut model = build_model(&config)?;
    for ((name, shape), t) in layout.iter().zip(model.parameters_mut()) {
        let name_len = read_u32(&mut r)? as usize;
        let mut got = vec![0u8; name_len];
        r.read_exact(&mut got)?;
        if got != name.as_bytes() {
            return Err(err(format!("expected tensor '{name}', found '{}'", String::from_utf8_lossy(&got))));
        }
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(err(format!("tensor '{name}' has shape {dims:?}, expected {shape:?}")));
        }
        let mut buf = vec![0u8; 8 * t.len()];
        r.read_exact(&mut buf)?;
        for (v, chunk) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    read_checkpoint(BufReader::new(file), len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_preset;

    #[test]
    fn round_trip_in_memory() {
        let mut cfg = make_preset("cli_tiny").unwrap();
        cfg.seed = 9;
        let m = build_model(&cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"ACMP");
        let back = read_checkpoint(buf.as_slice(), buf.len() as u64).unwrap();
        assert_eq!(back.named_parameters(), m.named_parameters());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn truncated_file_rejected_before_reading_tensors() {
        let m = build_model(&make_preset("teacher_tiny").unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        let e = read_checkpoint(buf.as_slice(), buf.len() as u64).unwrap_err();
        assert!(e.to_string().contains("implies"), "{e}");
    }

    #[test]
    fn bad_magic_rejected() {
        let e = read_checkpoint(&b"NOPE\x01\0\0\0"[..], 8).unwrap_err();
        assert!(e.to_string().contains("magic"));
    }
}
