use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, StepMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SQCL";
const VERSION: u32 = 1;

/// Everything needed to continue training or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub train_config: TrainConfig,
    pub step: usize,
    pub metrics: Option<StepMetrics>,
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        self.params.config()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: usize,
    metrics: Option<StepMetrics>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend(v.to_le_bytes());
    }
}

/// Encodes `ckpt` in the on-disk layout.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        model_config: ckpt.params.config().clone(),
        train_config: ckpt.train_config.clone(),
        step: ckpt.step,
        metrics: ckpt.metrics.clone(),
    };
    // Through `Value` so object keys come out sorted.
    let value = serde_json::to_value(&header).expect("header serializes");
    let json = serde_json::to_string(&value).expect("header serializes");

    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json.as_bytes());
    out.extend((ckpt.params.iter().count() as u32).to_le_bytes());
    for (path, t) in ckpt.params.iter() {
        put_str(&mut out, path);
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.values());
    }
    out.extend(ckpt.optimizer.step.to_le_bytes());
    for (path, m) in &ckpt.optimizer.m {
        put_str(&mut out, path);
        out.extend((m.len() as u64).to_le_bytes());
        put_f64s(&mut out, m);
        put_f64s(&mut out, &ckpt.optimizer.v[path]);
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Validation("checkpoint ends early".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Validation("length overflows".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Validation("path is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Validation("length overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decodes and validates a checkpoint image.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::Checksum("checkpoint is truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checksum(format!(
            "CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Validation(format!("checkpoint header: {e}")))?;

    let n_params = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_params {
        let path = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let values = r.f64s(shape.iter().product())?;
        tensors.insert(path, Tensor::new(shape, values)?);
    }
    let params = ModelParams::from_tensors(header.model_config, tensors)?;

    let opt_step = r.u64()?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..n_params {
        let path = r.string()?;
        let n = r.len()?;
        if params.iter().find(|(p, _)| **p == path).map(|(_, t)| t.numel()) != Some(n) {
            return Err(Error::Validation(format!(
                "optimizer block {path} does not match the parameters"
            )));
        }
        m.insert(path.clone(), r.f64s(n)?);
        v.insert(path, r.f64s(n)?);
    }
    if r.pos != body.len() {
        return Err(Error::Validation("trailing bytes after optimizer blocks".into()));
    }
    header.train_config.validate()?;
    Ok(Checkpoint {
        params,
        optimizer: OptimizerState { m, v, step: opt_step },
        train_config: header.train_config,
        step: header.step,
        metrics: header.metrics,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(ckpt))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
