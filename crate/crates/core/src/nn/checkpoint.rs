//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `LSEGCKPT`, u32 version, u64 seed, u64 epochs,
//! u32 metadata count then (u32 len, bytes) key/value pairs, u32 layer count
//! then per layer a u8 kind tag and four u32 fields, then for every
//! parametrised layer its weight and bias as (u32 ndim, u64 dims..., f64 data).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::network::{LayerParams, ModelParams};
use super::{LayerSpec, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LSEGCKPT";
pub const VERSION: u32 = 1;

fn spec_fields(s: &LayerSpec) -> (u8, [u32; 4]) {
    let u = |v: usize| v as u32;
    match *s {
        LayerSpec::Dense { input, output } => (0, [u(input), u(output), 0, 0]),
        LayerSpec::Relu => (1, [0; 4]),
        LayerSpec::Conv2d { in_ch, out_ch, k, pad } => (2, [u(in_ch), u(out_ch), u(k), u(pad)]),
        LayerSpec::MaxPool2 => (3, [0; 4]),
        LayerSpec::UpConv2 { in_ch, out_ch } => (4, [u(in_ch), u(out_ch), 0, 0]),
        LayerSpec::Concat { skip } => (5, [u(skip), 0, 0, 0]),
        LayerSpec::Softmax => (6, [0; 4]),
    }
}

fn spec_from(tag: u8, f: [u32; 4]) -> Result<LayerSpec> {
    let f = f.map(|v| v as usize);
    Ok(match tag {
        0 => LayerSpec::Dense {
            input: f[0],
            output: f[1],
        },
        1 => LayerSpec::Relu,
        2 => LayerSpec::Conv2d {
            in_ch: f[0],
            out_ch: f[1],
            k: f[2],
            pad: f[3],
        },
        3 => LayerSpec::MaxPool2,
        4 => LayerSpec::UpConv2 {
            in_ch: f[0],
            out_ch: f[1],
        },
        5 => LayerSpec::Concat { skip: f[0] },
        6 => LayerSpec::Softmax,
        t => return Err(Error::CorruptCheckpoint(format!("unknown layer tag {t}"))),
    })
}

pub fn encode(m: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&m.seed.to_le_bytes());
    out.extend_from_slice(&m.epochs.to_le_bytes());
    out.extend_from_slice(&(m.meta.len() as u32).to_le_bytes());
    for (k, v) in &m.meta {
        for s in [k, v] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    out.extend_from_slice(&(m.specs.len() as u32).to_le_bytes());
    for s in &m.specs {
        let (tag, f) = spec_fields(s);
        out.push(tag);
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for t in m.tensors() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(Error::CorruptCheckpoint(format!("tensor rank {nd}")));
        }
        let shape = (0..nd)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?;
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            found: version,
        });
    }
    let seed = r.u64()?;
    let epochs = r.u64()?;
    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let n_layers = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers.min(4096));
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let f = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        specs.push(spec_from(tag, f)?);
    }
    let mut params = Vec::with_capacity(specs.len());
    for s in &specs {
        params.push(match s.param_shapes() {
            Some(_) => Some(LayerParams {
                weight: r.tensor()?,
                bias: r.tensor()?,
            }),
            None => None,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let m = ModelParams {
        specs,
        params,
        seed,
        epochs,
        meta,
    };
    m.check_shapes()?;
    Ok(m)
}

/// Parses a metadata entry, reporting a missing or malformed value as corruption.
pub fn meta_value<T: std::str::FromStr>(m: &ModelParams, key: &str) -> Result<T> {
    m.meta
        .get(key)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing metadata `{key}`")))?
        .parse()
        .map_err(|_| Error::CorruptCheckpoint(format!("malformed metadata `{key}`")))
}

pub fn save_checkpoint(m: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(m)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and insists it was built from `specs`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, specs: &[LayerSpec]) -> Result<ModelParams> {
    let m = load_checkpoint(path)?;
    if m.specs != specs {
        return Err(Error::Shape(format!(
            "checkpoint has {} layers that do not match the expected {}-layer architecture",
            m.specs.len(),
            specs.len()
        )));
    }
    Ok(m)
}
