//! Single-file little-endian checkpoint.
//!
//! ```text
//! "HEAR"  u32 version
//! u32 hidden_dim, num_layers, num_heads, window_len, max_time_patches,
//!     codebook_size, bias_hidden, mlp_ratio; u8 variant
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank], f32 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::scalar::Real;
use crate::tensor::Matrix;

use super::{Model, ModelConfig, Variant};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HEAR";
pub const CHECKPOINT_VERSION: u32 = 1;

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Tiny => 0,
        Variant::Base => 1,
        Variant::Custom => 2,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<T: Real>(model: &Model<T>, mut w: impl Write) -> Result<()> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.hidden_dim,
        c.num_layers,
        c.num_heads,
        c.window_len,
        c.max_time_patches,
        c.codebook_size,
        c.bias_hidden,
        c.mlp_ratio,
    ] {
        put_u32(&mut out, v)?;
    }
    out.push(variant_code(c.variant));
    put_u32(&mut out, model.params.len())?;
    for (_, name, m) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2)?;
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for &v in m.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&out)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<Model<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = cur.u32()?;
    }
    let variant = match cur.take(1)?[0] {
        0 => Variant::Tiny,
        1 => Variant::Base,
        2 => Variant::Custom,
        other => return Err(Error::Checkpoint(format!("unknown variant {other}"))),
    };
    let config = ModelConfig {
        hidden_dim: f[0],
        num_layers: f[1],
        num_heads: f[2],
        window_len: f[3],
        max_time_patches: f[4],
        codebook_size: f[5],
        variant,
        bias_hidden: f[6],
        mlp_ratio: f[7],
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    let count = cur.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} unsupported")));
        }
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        let raw = cur.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, Matrix::from_vec(rows, cols, data));
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let reference = Model::<T>::init(config.clone(), 0);
    for (_, name, m) in reference.params.iter() {
        match params.by_name(name) {
            Some(p) if p.shape() == m.shape() => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    p.shape(),
                    m.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    }
    Ok(Model { config, params })
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
