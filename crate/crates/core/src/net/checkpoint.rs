//! Binary checkpoint format.
//!
//! ```text
//! "FBCICKPT"                      8 bytes
//! version                         u32
//! n_eeg_channels .. pool_stride   8 x u64
//! dropout_p                       f64
//! tensor count                    u32
//! per tensor: name length u32, name bytes, rank u32, rank x u64 extents,
//!             f64 data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{FactorModel, Group, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FBCICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &FactorModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(64 + model.param_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.n_eeg_channels,
        cfg.n_timesamples,
        cfg.n_classes,
        cfg.n_feature_maps,
        cfg.temporal_kernel,
        cfg.spatial_kernel,
        cfg.pool_kernel,
        cfg.pool_stride,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    let named = model.named_params();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &FactorModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> std::result::Result<&'b [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {} (needed {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<FactorModel, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let config = NetConfig {
        n_eeg_channels: dims[0],
        n_timesamples: dims[1],
        n_classes: dims[2],
        n_feature_maps: dims[3],
        temporal_kernel: dims[4],
        spatial_kernel: dims[5],
        pool_kernel: dims[6],
        pool_stride: dims[7],
        dropout_p: r.f64()?,
    };
    let mut model = FactorModel::build(config, 0).map_err(|e| e.to_string())?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(format!("expected {} tensors, found {count}", expected.len()));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "tensor name is not utf-8".to_string())?;
        if name != want_name {
            return Err(format!("expected tensor {want_name}, found {name}"));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if &shape != want_shape {
            return Err(format!("{name}: shape {shape:?}, expected {want_shape:?}"));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut it = loaded.into_iter();
    for group in Group::ALL {
        for slot in model.params_mut(group) {
            *slot = it.next().expect("count checked");
        }
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<FactorModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
