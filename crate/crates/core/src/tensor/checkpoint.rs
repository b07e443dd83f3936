//! `DRMT` flat binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `"DRMT"`, version `u32`, entry count `u32`, then per entry:
//! name length `u16`, UTF-8 name, rank `u8`, `rank` extents as `u64`,
//! and the raw `f64` values.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"DRMT";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    /// Stores text as one f64 per byte under `name`.
    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        let data: Vec<f64> = text.bytes().map(f64::from).collect();
        let t = Tensor::new(vec![data.len()], data).expect("rank-1 shape matches");
        self.push(name, t);
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self
            .get(name)
            .ok_or_else(|| TensorError::Format(format!("missing entry {name}")))?;
        let bytes = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(TensorError::Format(format!("entry {name} is not text")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| TensorError::Format(e.to_string()))
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let count = u32::try_from(ckpt.entries.len()).map_err(|_| TensorError::Format("too many entries".into()))?;
    w.write_u32::<LittleEndian>(count)?;
    for (name, t) in &ckpt.entries {
        let len = u16::try_from(name.len()).map_err(|_| TensorError::Format(format!("name too long: {name}")))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| TensorError::Format("rank exceeds 255".into()))?;
        w.write_u8(rank)?;
        for &e in t.shape() {
            w.write_u64::<LittleEndian>(e as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        ckpt.push(name, Tensor::new(shape, data)?);
    }
    Ok(ckpt)
}
