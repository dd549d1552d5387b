//! Training checkpoints: a model file plus a small binary sidecar holding the
//! training position and, during joint fine-tuning, the ADAM state.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AdamState;
use crate::error::{Result, SfarlError};
use crate::model::{deserialize_model, serialize_model, SfarlModel};

const STATE_MAGIC: &[u8; 4] = b"SFCK";
const STATE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Greedy,
    Joint,
}

/// Training position: after `completed` greedy stages, or after `completed`
/// joint epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SfarlModel,
    pub phase: Phase,
    pub completed: usize,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// Conventional file stem, e.g. `greedy-03` or `joint-0020`.
    pub fn stem(&self) -> String {
        match self.phase {
            Phase::Greedy => format!("greedy-{:02}", self.completed),
            Phase::Joint => format!("joint-{:04}", self.completed),
        }
    }
}

fn state_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("state")
}

/// Writes `model_path` and its `.state` sidecar.
pub fn save_checkpoint(model_path: &Path, ck: &Checkpoint) -> Result<()> {
    let model = serialize_model(&ck.model)?;
    fs::write(model_path, model).map_err(|e| SfarlError::io(model_path, e))?;
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.push(match ck.phase {
        Phase::Greedy => 0,
        Phase::Joint => 1,
    });
    out.extend_from_slice(&(ck.completed as u64).to_le_bytes());
    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a.m.iter().chain(&a.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let path = state_path(model_path);
    fs::write(&path, out).map_err(|e| SfarlError::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(model_path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(model_path).map_err(|e| SfarlError::io(model_path, e))?;
    let model = deserialize_model(&bytes)?;
    let path = state_path(model_path);
    let state = fs::read(&path).map_err(|e| SfarlError::io(&path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = state
            .get(pos..pos + n)
            .ok_or_else(|| SfarlError::Truncated(format!("checkpoint state {}", path.display())))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != STATE_MAGIC {
        return Err(SfarlError::Format("bad checkpoint state magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version == 0 || version > STATE_VERSION {
        return Err(SfarlError::Version {
            found: version,
            supported: STATE_VERSION,
        });
    }
    let phase = match take(1)?[0] {
        0 => Phase::Greedy,
        1 => Phase::Joint,
        c => return Err(SfarlError::Format(format!("unknown checkpoint phase {c}"))),
    };
    let completed = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let adam = match take(1)?[0] {
        0 => None,
        1 => {
            let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let mut read = |count: usize| -> Result<Vec<f64>> {
                (0..count)
                    .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())))
                    .collect()
            };
            let m = read(n)?;
            let v = read(n)?;
            Some(AdamState { m, v, step })
        }
        c => return Err(SfarlError::Format(format!("bad optimizer flag {c}"))),
    };
    if pos != state.len() {
        return Err(SfarlError::Format(
            "trailing bytes in checkpoint state".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        phase,
        completed,
        adam,
    })
}
