//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ADMACKPT" | u32 version
//! u32 len | config text (UTF-8, `key = value` lines)
//! u32 count | count × (u32 name_len | name | u32 ndim | ndim × u32 dim)
//! payload: every tensor's f64 values in listed order
//! u8 has_state
//!   step u64 | adam_t u64 | rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! ```
//!
//! Identical tensors and state give identical bytes on every platform.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"ADMACKPT";
pub const VERSION: u32 = 1;

/// Optimizer step counters and the data-stream position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainState {
    pub step: u64,
    pub adam_t: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
    pub state: Option<TrainState>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(get(r)?) as usize)
}

fn get_string<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(w, self.config_text.len())?;
        w.write_all(self.config_text.as_bytes())?;
        put_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.shape().len())?;
            for &d in t.shape() {
                put_u32(w, d)?;
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.state {
            None => w.write_all(&[0])?,
            Some(s) => {
                w.write_all(&[1])?;
                w.write_all(&s.step.to_le_bytes())?;
                w.write_all(&s.adam_t.to_le_bytes())?;
                w.write_all(&s.rng_seed)?;
                w.write_all(&s.rng_stream.to_le_bytes())?;
                w.write_all(&s.rng_word_pos.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        if &get::<8, _>(r)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(get(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_text = get_string(r)?;
        let count = get_u32(r)?;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            let name = get_string(r)?;
            let ndim = get_u32(r)?;
            let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            header.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in header {
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| Ok(f64::from_le_bytes(get(r)?)))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let state = match get::<1, _>(r)?[0] {
            0 => None,
            1 => Some(TrainState {
                step: u64::from_le_bytes(get(r)?),
                adam_t: u64::from_le_bytes(get(r)?),
                rng_seed: get(r)?,
                rng_stream: u64::from_le_bytes(get(r)?),
                rng_word_pos: u128::from_le_bytes(get(r)?),
            }),
            b => return Err(Error::Format(format!("bad state flag {b}"))),
        };
        Ok(Self {
            config_text,
            tensors,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(fs::File::open(path)?))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
