//! Resumable training state, little-endian:
//!
//! ```text
//! "VLMSTATE" | u32 version | u64 header bytes | header JSON
//! per tensor: f64 values | f64 first moments | f64 second moments
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, RunLog, StagePlan, Trainer};
use crate::error::{Error, Result};
use crate::model::Model;

pub const STATE_MAGIC: &[u8; 8] = b"VLMSTATE";
pub const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    plan_hash: String,
    seed: u64,
    model_seed: u64,
    stage: usize,
    step_in_stage: usize,
    global_step: usize,
    tokens: u64,
    images: u64,
    adam_steps: Vec<u64>,
    log: String,
}

fn plan_hash(plan: &StagePlan) -> String {
    crate::sha256_hex(serde_json::to_string(plan).expect("plan serializes").as_bytes())
}

pub(super) fn save(t: &Trainer, path: &Path) -> Result<()> {
    let header = Header {
        plan_hash: plan_hash(&t.plan),
        seed: t.seed,
        model_seed: t.model.config().seed,
        stage: t.stage,
        step_in_stage: t.step_in_stage,
        global_step: t.global_step,
        tokens: t.tokens,
        images: t.images,
        adam_steps: t.optimizer.t.clone(),
        log: t.log.to_csv(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (k, tensor) in t.model.params().tensors().iter().enumerate() {
        for src in [&tensor.data, &t.optimizer.m[k], &t.optimizer.v[k]] {
            for v in src {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(super) fn load(plan: StagePlan, seed: u64, path: &Path) -> Result<Trainer> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::Corrupt {
                offset: buf.len() as u64,
                message: "training state truncated".into(),
            });
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };
    if take(8)? != STATE_MAGIC {
        return Err(Error::Incompatible("not a training state file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != STATE_VERSION {
        return Err(Error::Incompatible(format!("training state version {version}")));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(n)?)
        .map_err(|e| Error::Corrupt { offset: 20, message: format!("bad header: {e}") })?;
    if header.plan_hash != plan_hash(&plan) || header.seed != seed {
        return Err(Error::Incompatible("state was written for a different plan or seed".into()));
    }
    let mut model = Model::new(plan.model.clone().with_seed(header.model_seed))?;
    let mut optimizer = AdamW::new(Default::default(), model.params());
    if header.adam_steps.len() != optimizer.t.len() {
        return Err(Error::Incompatible("tensor count mismatch".into()));
    }
    optimizer.t = header.adam_steps;
    for (k, tensor) in model.params_mut().tensors_mut().iter_mut().enumerate() {
        let len = tensor.data.len();
        for dst in [&mut tensor.data, &mut optimizer.m[k], &mut optimizer.v[k]] {
            let bytes = take(len * 8)?;
            for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
                *d = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
    }
    if pos != buf.len() {
        return Err(Error::Corrupt { offset: pos as u64, message: "trailing bytes".into() });
    }
    let mut t = Trainer::with_model(plan, model, seed)?;
    t.optimizer = optimizer;
    t.stage = header.stage;
    t.step_in_stage = header.step_in_stage;
    t.global_step = header.global_step;
    t.tokens = header.tokens;
    t.images = header.images;
    t.log = RunLog::from_csv(&header.log)?;
    Ok(t)
}
