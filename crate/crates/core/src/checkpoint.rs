//! Checkpoint file format (binary, little-endian):
//!
//! ```text
//! magic            8 bytes, ASCII "HSDACS01"
//! format version   u32
//! config block     u32 byte length, then UTF-8 `key = value` lines
//! tensor count     u32
//! per tensor:      u32 name length, UTF-8 name,
//!                  u32 rank, rank x u32 dims,
//!                  raw f32 values (product of dims)
//! moment count     u32, then moment tensors in the same tensor encoding
//!                  (adam.m.<name>, adam.v.<name>, interleaved per parameter)
//! rng state        4 x u64
//! step counter     u64
//! ```
//!
//! Values are stored as 32-bit floats; the in-memory 64-bit state is
//! canonicalised through this precision on save so that save -> load -> step
//! reproduces an uninterrupted run bit-exactly.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"HSDACS01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<NamedTensor>,
    pub moments: Vec<NamedTensor>,
    pub rng_state: [u64; 4],
    pub step: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &NamedTensor) -> Result<()> {
    let name = t.name.as_bytes();
    write_u32(w, name.len() as u32)?;
    w.write_all(name)?;
    write_u32(w, t.shape.len() as u32)?;
    for &d in &t.shape {
        write_u32(w, d as u32)?;
    }
    debug_assert_eq!(t.values.len(), t.shape.iter().product::<usize>());
    for &v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<NamedTensor> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Checkpoint(format!(
            "implausible tensor name length {name_len}"
        )));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 4 {
        return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 28 {
        return Err(Error::Checkpoint(format!(
            "implausible tensor size {numel}"
        )));
    }
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NamedTensor {
        name,
        shape,
        values,
    })
}

pub fn save_file(path: &Path, data: &CheckpointData) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, data.version)?;
    let cfg = data.config_text.as_bytes();
    write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(cfg)?;
    write_u32(&mut w, data.tensors.len() as u32)?;
    for t in &data.tensors {
        write_tensor(&mut w, t)?;
    }
    write_u32(&mut w, data.moments.len() as u32)?;
    for t in &data.moments {
        write_tensor(&mut w, t)?;
    }
    for &s in &data.rng_state {
        write_u64(&mut w, s)?;
    }
    write_u64(&mut w, data.step)?;
    w.flush()?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<CheckpointData> {
    let file = std::fs::File::open(path)?;
    load_from(&mut std::io::BufReader::new(file))
}

/// Parse a checkpoint already held in memory (embedded assets, wasm).
pub fn load_bytes(bytes: &[u8]) -> Result<CheckpointData> {
    load_from(&mut std::io::Cursor::new(bytes))
}

fn load_from(mut r: &mut impl Read) -> Result<CheckpointData> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_text = String::from_utf8(cfg)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let tensor_count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        tensors.push(read_tensor(&mut r)?);
    }
    let moment_count = read_u32(&mut r)? as usize;
    let mut moments = Vec::with_capacity(moment_count);
    for _ in 0..moment_count {
        moments.push(read_tensor(&mut r)?);
    }
    let mut rng_state = [0u64; 4];
    for s in rng_state.iter_mut() {
        *s = read_u64(&mut r)?;
    }
    let step = read_u64(&mut r)?;
    Ok(CheckpointData {
        version,
        config_text,
        tensors,
        moments,
        rng_state,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_data() -> CheckpointData {
        CheckpointData {
            version: FORMAT_VERSION,
            config_text: "d_model = 8\nheads = 2\n".into(),
            tensors: vec![NamedTensor {
                name: "embed".into(),
                shape: vec![3, 2],
                values: vec![1.0, -2.5, 0.0, 3.25, -0.125, 7.0],
            }],
            moments: vec![
                NamedTensor {
                    name: "adam.m.embed".into(),
                    shape: vec![3, 2],
                    values: vec![0.0; 6],
                },
                NamedTensor {
                    name: "adam.v.embed".into(),
                    shape: vec![3, 2],
                    values: vec![0.5; 6],
                },
            ],
            rng_state: [1, 2, 3, u64::MAX],
            step: 42,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("hsdacs-fmt-{}.ckpt", std::process::id()));
        let data = sample_data();
        save_file(&path, &data).unwrap();
        let back = load_file(&path).unwrap();
        assert_eq!(back.config_text, data.config_text);
        assert_eq!(back.tensors, data.tensors);
        assert_eq!(back.moments, data.moments);
        assert_eq!(back.rng_state, data.rng_state);
        assert_eq!(back.step, data.step);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn file_layout_is_exactly_as_documented() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("hsdacs-layout-{}.ckpt", std::process::id()));
        let data = sample_data();
        save_file(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], b"HSDACS01");
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            FORMAT_VERSION
        );
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + cfg_len], data.config_text.as_bytes());
        let mut at = 16 + cfg_len;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 1); // tensor count
        at += 4;
        // name
        let name_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        assert_eq!(&bytes[at..at + name_len], b"embed");
        at += name_len;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 2); // rank
        at += 4;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 3);
        at += 4;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 2);
        at += 4;
        let first = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        assert_eq!(first, 1.0);
        // Trailer: 4 u64 rng words + u64 step.
        let n = bytes.len();
        assert_eq!(u64::from_le_bytes(bytes[n - 8..].try_into().unwrap()), 42);
        assert_eq!(
            u64::from_le_bytes(bytes[n - 16..n - 8].try_into().unwrap()),
            u64::MAX
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_file_is_checkpoint_error() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("hsdacs-trunc-{}.ckpt", std::process::id()));
        let data = sample_data();
        save_file(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_file(&path).is_err());
        std::fs::write(&path, b"NOTMAGIC rest").unwrap();
        let err = load_file(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
        std::fs::remove_file(&path).ok();
    }
}
