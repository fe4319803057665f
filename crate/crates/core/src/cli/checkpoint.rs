//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HSNGPCKP"
//! version  u32
//! header   u64 length + UTF-8 JSON (run config, dims, label mapping)
//! count    u32
//! tensor*  u32 name length, name, u32 rank, u64 dims[rank], f64 data[prod(dims)]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{build_variant, HetSngpModel, MeanHead, ModelDims};

pub const MAGIC: &[u8; 8] = b"HSNGPCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration the model was trained with.
    pub config: RunConfig,
    pub model: HetSngpModel,
    pub standardizer: Standardizer,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    input_dim: usize,
    num_classes: usize,
    label_names: Vec<String>,
    feature_names: Vec<String>,
    finalized: bool,
    batches_accumulated: usize,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Calls `f` on every stored tensor of the model in a fixed order.
fn visit_model(
    model: &mut HetSngpModel,
    f: &mut dyn FnMut(String, Vec<usize>, &mut [f64]) -> Result<()>,
) -> Result<()> {
    let fe = &mut model.features;
    f("features.input.w".into(), vec![fe.input.w.rows(), fe.input.w.cols()], fe.input.w.data_mut())?;
    f("features.input.b".into(), vec![fe.input.b.len()], &mut fe.input.b)?;
    for (i, blk) in fe.blocks.iter_mut().enumerate() {
        f(format!("features.block{i}.w"), vec![blk.w.rows(), blk.w.cols()], blk.w.data_mut())?;
        f(format!("features.block{i}.b"), vec![blk.b.len()], &mut blk.b)?;
    }
    f("features.output.w".into(), vec![fe.output.w.rows(), fe.output.w.cols()], fe.output.w.data_mut())?;
    f("features.output.b".into(), vec![fe.output.b.len()], &mut fe.output.b)?;
    for (i, u) in fe.u_states.iter_mut().enumerate() {
        f(format!("features.u{i}"), vec![u.len()], u)?;
    }
    match &mut model.mean {
        MeanHead::Affine(d) => {
            f("mean.w".into(), vec![d.w.rows(), d.w.cols()], d.w.data_mut())?;
            f("mean.b".into(), vec![d.b.len()], &mut d.b)?;
        }
        MeanHead::Gp(g) => {
            let p = &mut g.projection;
            f("rff.w".into(), vec![p.w.rows(), p.w.cols()], p.w.data_mut())?;
            f("rff.b".into(), vec![p.b.len()], &mut p.b)?;
            f("rff.lengthscale".into(), vec![1], std::slice::from_mut(&mut p.lengthscale))?;
            let post = &mut g.posterior;
            let bh = &mut post.beta_hat;
            f("gp.beta_hat".into(), vec![bh.rows(), bh.cols()], bh.data_mut())?;
            for (c, prec) in post.precisions.iter_mut().enumerate() {
                f(format!("gp.precision{c}"), vec![prec.rows(), prec.cols()], prec.data_mut())?;
            }
            if let Some(factors) = &mut post.cov_factors {
                for (c, l) in factors.iter_mut().enumerate() {
                    f(format!("gp.cov_factor{c}"), vec![l.rows(), l.cols()], l.data_mut())?;
                }
            }
        }
    }
    if let Some(h) = &mut model.het {
        let v = &mut h.v_map;
        f("het.v_map.w".into(), vec![v.w.rows(), v.w.cols()], v.w.data_mut())?;
        f("het.v_map.b".into(), vec![v.b.len()], &mut v.b)?;
        let d = &mut h.d_map;
        f("het.d_map.w".into(), vec![d.w.rows(), d.w.cols()], d.w.data_mut())?;
        f("het.d_map.b".into(), vec![d.b.len()], &mut d.b)?;
        if let Some(fv) = &mut h.free_v {
            f("het.free_v".into(), vec![fv.rows(), fv.cols()], fv.data_mut())?;
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let finalized = self.model.is_finalized();
        let header = Header {
            config: self.config.clone(),
            input_dim: self.model.input_dim(),
            num_classes: self.model.num_classes,
            label_names: self.label_names.clone(),
            feature_names: self.feature_names.clone(),
            finalized,
            batches_accumulated: self.model.gp().map_or(0, |g| g.posterior.batches_accumulated),
        };
        let header = serde_json::to_vec(&header)?;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut model = self.model.clone();
        visit_model(&mut model, &mut |name, shape, data| {
            tensors.push((name, shape, data.to_vec()));
            Ok(())
        })?;
        tensors.push(("standardizer.mean".into(), vec![self.standardizer.mean.len()], self.standardizer.mean.clone()));
        tensors.push(("standardizer.std".into(), vec![self.standardizer.std.len()], self.standardizer.std.clone()));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ckpt_err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| ckpt_err(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut stored = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ckpt_err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(ckpt_err(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ckpt_err("tensor size overflows"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| ckpt_err("tensor size overflows"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            stored.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err("trailing bytes after last tensor"));
        }

        let dims = ModelDims {
            input_dim: header.input_dim,
            num_classes: header.num_classes,
        };
        let mut model = build_variant(header.config.variant, dims, &header.config.model_config())
            .map_err(|e| ckpt_err(format!("cannot rebuild model: {e}")))?;
        if let Some(g) = model.gp_mut() {
            g.posterior.batches_accumulated = header.batches_accumulated;
            if header.finalized {
                let m = g.posterior.num_features();
                g.posterior.cov_factors = Some(vec![Matrix::zeros(m, m); header.num_classes]);
            }
        }
        let mut it = stored.into_iter();
        let mut next = |want: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (name, got_shape, data) = it
                .next()
                .ok_or_else(|| ckpt_err(format!("missing tensor `{want}`")))?;
            if name != want || got_shape != shape {
                return Err(ckpt_err(format!(
                    "expected tensor `{want}` {shape:?}, found `{name}` {got_shape:?}"
                )));
            }
            Ok(data)
        };
        visit_model(&mut model, &mut |name, shape, slot| {
            slot.copy_from_slice(&next(&name, &shape)?);
            Ok(())
        })?;
        let d = header.input_dim;
        let standardizer = Standardizer {
            mean: next("standardizer.mean", &[d])?,
            std: next("standardizer.std", &[d])?,
        };
        if it.next().is_some() {
            return Err(ckpt_err("unexpected extra tensors"));
        }
        Ok(Self {
            config: header.config,
            model,
            standardizer,
            label_names: header.label_names,
            feature_names: header.feature_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<Vec<u8>> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), &bytes)?;
        Ok(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| ckpt_err(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ckpt_err("checkpoint is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
