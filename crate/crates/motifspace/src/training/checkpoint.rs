//! Binary checkpoint format.
//!
//! Layout: magic `MSCK`, format version (u32 LE), a length-prefixed JSON
//! header ([`CheckpointMeta`]), then a tensor section: count, followed by
//! `name_len (u16) | name | ndim (u8) | dims (u64 each) | f64 LE data` per
//! tensor. Parameters appear in visitor order, then optimizer moments as
//! `opt.m.<param>` / `opt.v.<param>` in name order. Everything is written
//! from in-memory state deterministically, so save -> load -> save is
//! byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Method, Stage};
use crate::encoder::{EncoderConfig, ExpanderConfig, Model};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamMut};
use crate::rng::StreamState;

const MAGIC: &[u8; 4] = b"MSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub expander: ExpanderConfig,
    pub stage: Stage,
    pub method: Method,
    pub global_step: u64,
    pub sampler_rng: StreamState,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer_t: u64,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub optimizer: AdamW,
    pub meta: CheckpointMeta,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

enum Tensor {
    Mat(Vec<f64>, (usize, usize)),
    Vec1(Vec<f64>),
}

fn collect_params(model: &mut Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| {
        let t = match p {
            ParamMut::Mat(w) => Tensor::Mat(w.iter().copied().collect(), w.dim()),
            ParamMut::Vec1(b) => Tensor::Vec1(b.to_vec()),
        };
        out.push((name.to_string(), t));
    });
    out
}

fn write_tensor(w: &mut impl Write, name: &str, dims: &[u64], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    optimizer: &AdamW,
    meta: &CheckpointMeta,
) -> Result<()> {
    let params = collect_params(model);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(meta)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let n_tensors = params.len() + optimizer.m.len() + optimizer.v.len();
    w.write_all(&(n_tensors as u32).to_le_bytes())?;
    for (name, t) in &params {
        match t {
            Tensor::Mat(data, (r, c)) => write_tensor(&mut w, name, &[*r as u64, *c as u64], data)?,
            Tensor::Vec1(data) => write_tensor(&mut w, name, &[data.len() as u64], data)?,
        }
    }
    for (prefix, map) in [("opt.m.", &optimizer.m), ("opt.v.", &optimizer.v)] {
        for (name, data) in map {
            write_tensor(&mut w, &format!("{prefix}{name}"), &[data.len() as u64], data)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| bad("unexpected end of file"))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<u64>, Vec<f64>)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| bad("tensor name is not valid utf-8"))?;
        let ndim = self.bytes(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()?);
        }
        let len: u64 = dims.iter().product();
        let raw = self.bytes(len as usize * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, dims, data))
    }
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut r = Reader { inner: std::io::BufReader::new(file) };
    if r.bytes(4)? != MAGIC {
        return Err(bad(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint format_version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = r.u32()? as usize;
    let header = r.bytes(header_len)?;
    Ok(serde_json::from_slice(&header)?)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut r = Reader { inner: std::io::BufReader::new(file) };
    if r.bytes(4)? != MAGIC {
        return Err(bad(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint format_version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(header_len)?)?;

    let mut tensors: std::collections::BTreeMap<String, (Vec<u64>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    let count = r.u32()?;
    for _ in 0..count {
        let (name, dims, data) = r.tensor()?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }

    // The seed is irrelevant here; every parameter is overwritten.
    let mut model = Model::init(meta.encoder.clone(), meta.expander.clone(), 0)?;
    let mut missing = Vec::new();
    model.visit_params(&mut |name, p| {
        let Some((dims, data)) = tensors.remove(name) else {
            missing.push(name.to_string());
            return;
        };
        match p {
            ParamMut::Mat(w) => {
                let want = [w.nrows() as u64, w.ncols() as u64];
                if dims != want {
                    missing.push(format!("{name} (shape {dims:?}, expected {want:?})"));
                    return;
                }
                for (slot, x) in w.iter_mut().zip(data) {
                    *slot = x;
                }
            }
            ParamMut::Vec1(b) => {
                if dims != [b.len() as u64] {
                    missing.push(format!("{name} (shape {dims:?})"));
                    return;
                }
                for (slot, x) in b.iter_mut().zip(data) {
                    *slot = x;
                }
            }
        }
    });
    if !missing.is_empty() {
        return Err(bad(format!("checkpoint is missing or misshapes tensors: {missing:?}")));
    }

    let mut optimizer = AdamW::new(meta.learning_rate, meta.weight_decay);
    optimizer.t = meta.optimizer_t;
    for (name, (_, data)) in tensors {
        if let Some(param) = name.strip_prefix("opt.m.") {
            optimizer.m.insert(param.to_string(), data);
        } else if let Some(param) = name.strip_prefix("opt.v.") {
            optimizer.v.insert(param.to_string(), data);
        } else {
            return Err(bad(format!("unexpected tensor {name}")));
        }
    }
    Ok(LoadedCheckpoint { model, optimizer, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, Pooling};
    use crate::rng::Stream;

    fn small_model(seed: u64) -> Model {
        let enc = EncoderConfig {
            n_layers: 1,
            model_dim: 8,
            n_heads: 2,
            ffn_dim: 12,
            embed_dim: 4,
            pooling: Pooling::Mean,
            steps_per_bar: 8,
        };
        let exp = ExpanderConfig { hidden_dims: vec![6], out_dim: 6 };
        Model::init(enc, exp, seed).unwrap()
    }

    fn meta(model: &Model) -> CheckpointMeta {
        CheckpointMeta {
            encoder: model.encoder_cfg.clone(),
            expander: model.expander_cfg.clone(),
            stage: Stage::Pretrain,
            method: Method::Vicreg,
            global_step: 17,
            sampler_rng: Stream::new(9, "train/sampler").state(),
            learning_rate: 1e-4,
            weight_decay: 0.01,
            optimizer_t: 17,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = small_model(1);
        let mut opt = AdamW::new(1e-4, 0.01);
        opt.t = 17;
        opt.m.insert("enc.out_proj.w".into(), vec![0.5; 8 * 4]);
        opt.v.insert("enc.out_proj.w".into(), vec![0.25; 8 * 4]);
        let meta = meta(&model);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &mut model, &opt, &meta).unwrap();
        let mut loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &mut loaded.model, &loaded.optimizer, &loaded.meta).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.optimizer.t, 17);
    }

    #[test]
    fn loaded_model_reproduces_embeddings_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = small_model(2);
        let opt = AdamW::new(1e-4, 0.01);
        let meta = meta(&model);
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &mut model, &opt, &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let chunk = crate::synth::synth_chunk("ck", 0, 8, &mut Stream::new(3, "ck"));
        assert_eq!(encode(&chunk, &model).unwrap(), encode(&chunk, &loaded.model).unwrap());
    }

    #[test]
    fn version_and_truncation_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = small_model(3);
        let opt = AdamW::new(1e-4, 0.01);
        let path = dir.path().join("v.ckpt");
        let meta = meta(&model);
        save_checkpoint(&path, &mut model, &opt, &meta).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump the version field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
        bytes[4] = 1;
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
