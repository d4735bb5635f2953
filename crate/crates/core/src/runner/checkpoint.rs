//! Binary checkpoints: `PNCK`, a version word, a length-prefixed JSON header
//! and raw little-endian `f64` payloads (parameters, normalization running
//! statistics, then optimizer moments when present).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::Adam;
use crate::autograd::BatchStats;
use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PNCK";
const VERSION: u32 = 1;

/// Progress counters needed to continue a run exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    /// Batches already taken from the current epoch.
    pub epoch_step: usize,
    pub best_val: Option<f64>,
    pub since_best: usize,
}

pub struct Checkpoint {
    pub model: Model,
    pub train: Option<(Adam, TrainState)>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    running_stats: usize,
    optimizer: Option<OptimizerHeader>,
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let model = &ck.model;
    let header = Header {
        model: model.config().clone(),
        params: model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
        running_stats: model.running_stats().len(),
        optimizer: ck.train.as_ref().map(|(a, s)| OptimizerHeader {
            t: a.t,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            state: s.clone(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter() {
        push_f64s(&mut out, p.value.data());
    }
    for s in model.running_stats() {
        push_f64s(&mut out, &s.mean);
        push_f64s(&mut out, &s.var);
    }
    if let Some((adam, _)) = &ck.train {
        for m in &adam.m {
            push_f64s(&mut out, m);
        }
        for v in &adam.v {
            push_f64s(&mut out, v);
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let mut model = Model::new(header.model.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    if expected != header.params || header.running_stats != model.running_stats().len() {
        return Err(Error::format(path, "parameter layout does not match the model config"));
    }
    let mut values = Vec::with_capacity(expected.len());
    for (_, shape) in &expected {
        let n = shape.iter().product();
        values.push(Tensor::from_vec(shape, r.f64s(n)?)?);
    }
    model.params_mut().replace_all(values);
    let c = header.model.base_channels;
    let mut stats = Vec::new();
    for _ in 0..header.running_stats {
        stats.push(BatchStats { mean: r.f64s(c)?, var: r.f64s(c)? });
    }
    model.set_running_stats(stats)?;
    let train = match header.optimizer {
        None => None,
        Some(o) => {
            let sizes: Vec<usize> = expected.iter().map(|(_, s)| s.iter().product()).collect();
            let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
            Some((Adam { beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: o.t, m, v }, o.state))
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    Ok(Checkpoint { model, train })
}

/// Loads only the model of a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.model)
}
