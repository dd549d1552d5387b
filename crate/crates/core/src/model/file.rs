//! Binary model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SFRL"            magic
//! u16               format version
//! u8 task, u8 rule  task and feasible-set codes
//! u32 k, T, N_f, N_r, M
//! f64 r_fid, r_reg, gamma_fid, gamma_reg
//! T x stage         alpha, fid_coeffs, fid_weights, reg_coeffs, reg_weights
//! ```

use super::{FeasibleRule, ModelGeometry, SfarlModel, StageParams, Task};
use crate::error::{Result, SfarlError};
use crate::influence::RbfGeometry;

pub const MAGIC: &[u8; 4] = b"SFRL";
pub const FORMAT_VERSION: u16 = 1;

pub fn serialize_model(model: &SfarlModel) -> Result<Vec<u8>> {
    model.validate()?;
    let g = &model.geometry;
    let mut out = Vec::with_capacity(64 + 8 * g.stage_len() * model.stages.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.task.code());
    out.push(match model.feasible_rule {
        FeasibleRule::Reals => 0,
        FeasibleRule::BoxZeroToY => 1,
    });
    for v in [
        g.filter_size,
        model.stages.len(),
        g.n_fid,
        g.n_reg,
        g.fid_rbf.count(),
    ] {
        let v = u32::try_from(v)
            .map_err(|_| SfarlError::Format(format!("header value {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        g.fid_rbf.radius(),
        g.reg_rbf.radius(),
        g.fid_rbf.gamma(),
        g.reg_rbf.gamma(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for stage in &model.stages {
        for v in stage.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SfarlError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn deserialize_model(bytes: &[u8]) -> Result<SfarlModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SfarlError::Format("bad magic, not an SFRL model".into()));
    }
    let version = r.u16("version")?;
    if version == 0 || version > FORMAT_VERSION {
        return Err(SfarlError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let task_code = r.u8("task")?;
    let task = Task::from_code(task_code)
        .ok_or_else(|| SfarlError::Format(format!("unknown task code {task_code}")))?;
    let feasible_rule = match r.u8("feasible rule")? {
        0 => FeasibleRule::Reals,
        1 => FeasibleRule::BoxZeroToY,
        c => {
            return Err(SfarlError::Format(format!(
                "unknown feasible rule code {c}"
            )))
        }
    };
    let filter_size = r.u32("k")?;
    let stages = r.u32("T")?;
    let n_fid = r.u32("N_f")?;
    let n_reg = r.u32("N_r")?;
    let m = r.u32("M")?;
    let r_fid = r.f64("r_fid")?;
    let r_reg = r.f64("r_reg")?;
    let gamma_fid = r.f64("gamma_fid")?;
    let gamma_reg = r.f64("gamma_reg")?;
    let geometry = ModelGeometry {
        filter_size,
        n_fid,
        n_reg,
        fid_rbf: RbfGeometry::new(m, r_fid, gamma_fid)?,
        reg_rbf: RbfGeometry::new(m, r_reg, gamma_reg)?,
    };
    geometry.validate()?;
    let stage_len = geometry.stage_len();
    let expected = stages
        .checked_mul(stage_len)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| SfarlError::Format("parameter block size overflows".into()))?;
    let remaining = bytes.len() - r.pos;
    if remaining < expected {
        return Err(SfarlError::Truncated(format!(
            "{stages} stages need {expected} parameter bytes, {remaining} present"
        )));
    }
    if remaining > expected {
        return Err(SfarlError::Format(format!(
            "{} trailing bytes after the last stage",
            remaining - expected
        )));
    }
    let mut params = Vec::with_capacity(stages);
    let mut flat = vec![0.0; stage_len];
    for _ in 0..stages {
        for v in flat.iter_mut() {
            *v = r.f64("stage parameters")?;
        }
        params.push(StageParams::from_flat(&geometry, &flat)?);
    }
    let model = SfarlModel {
        task,
        feasible_rule,
        geometry,
        stages: params,
    };
    model.validate()?;
    Ok(model)
}
