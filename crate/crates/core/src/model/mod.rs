//! Stage parameters, the unrolled inference step, and the model container.

mod file;
mod step;

pub use file::{deserialize_model, serialize_model, FORMAT_VERSION, MAGIC};
pub(crate) use step::{forward_realized, run_realized};
pub use step::{
    inference_step, project_feasible, restore, run_inference, ClipMask, Inference, StageTape,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfarlError};
use crate::grid::{dct_basis, realize_filter, rot180, DctBasis, Filter};
use crate::influence::{RbfGeometry, RbfMixture};

/// Restoration task a model was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Deconv,
    Rain,
    Denoise,
}

impl Task {
    pub fn feasible_rule(self) -> FeasibleRule {
        match self {
            Task::Rain => FeasibleRule::BoxZeroToY,
            Task::Deconv | Task::Denoise => FeasibleRule::Reals,
        }
    }

    pub fn default_stages(self) -> usize {
        match self {
            Task::Deconv => 10,
            Task::Rain | Task::Denoise => 5,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Task::Deconv => 0,
            Task::Rain => 1,
            Task::Denoise => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Task::Deconv),
            1 => Some(Task::Rain),
            2 => Some(Task::Denoise),
            _ => None,
        }
    }
}

/// Feasible set the estimate is projected onto after every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibleRule {
    Reals,
    /// `0 <= x_i <= y_i` per pixel.
    BoxZeroToY,
}

/// Filter and RBF layout shared by every stage of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub filter_size: usize,
    pub n_fid: usize,
    pub n_reg: usize,
    pub fid_rbf: RbfGeometry,
    pub reg_rbf: RbfGeometry,
}

impl ModelGeometry {
    /// 7x7 filters, the complete DCT basis for the fidelity term, the DC-free
    /// basis for the regularizer, 63 RBFs on `[-1, 1]` for both.
    pub fn standard() -> Self {
        Self::full_bank(7, 63, 1.0).expect("standard geometry is valid")
    }

    /// One filter per available atom.
    pub fn full_bank(filter_size: usize, rbf_count: usize, radius: f64) -> Result<Self> {
        let rbf = RbfGeometry::with_default_precision(rbf_count, radius)?;
        let g = Self {
            filter_size,
            n_fid: filter_size * filter_size,
            n_reg: filter_size * filter_size - 1,
            fid_rbf: rbf,
            reg_rbf: rbf,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.filter_size;
        if k == 0 || k.is_multiple_of(2) {
            return Err(SfarlError::InvalidArgument(format!(
                "filter size must be odd, got {k}"
            )));
        }
        if k == 1 && self.n_reg > 0 {
            return Err(SfarlError::InvalidArgument(
                "1x1 filters leave no DC-free regularization atoms".into(),
            ));
        }
        if self.fid_rbf.count() != self.reg_rbf.count() {
            return Err(SfarlError::InvalidArgument(
                "fidelity and regularization terms must use the same RBF count".into(),
            ));
        }
        if self.n_fid > k * k || self.n_reg > k * k - 1 {
            return Err(SfarlError::InvalidArgument(format!(
                "{} fidelity / {} regularization filters exceed the {k}x{k} basis",
                self.n_fid, self.n_reg
            )));
        }
        Ok(())
    }

    pub fn fid_coeff_len(&self) -> usize {
        self.filter_size * self.filter_size
    }

    pub fn reg_coeff_len(&self) -> usize {
        self.filter_size * self.filter_size - 1
    }

    /// Number of scalars in one stage.
    pub fn stage_len(&self) -> usize {
        1 + self.n_fid * (self.fid_coeff_len() + self.fid_rbf.count())
            + self.n_reg * (self.reg_coeff_len() + self.reg_rbf.count())
    }

    pub fn bases(&self) -> Result<Bases> {
        Ok(Bases {
            fid: dct_basis(self.filter_size, true)?,
            reg: dct_basis(self.filter_size, false)?,
        })
    }
}

/// The complete and DC-free DCT bases of one filter size.
#[derive(Clone, Debug)]
pub struct Bases {
    pub fid: DctBasis,
    pub reg: DctBasis,
}

/// Learnable parameters of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// `lambda = exp(alpha)`
    pub alpha: f64,
    pub fid_coeffs: Vec<Vec<f64>>,
    pub fid_weights: Vec<Vec<f64>>,
    pub reg_coeffs: Vec<Vec<f64>>,
    pub reg_weights: Vec<Vec<f64>>,
}

impl StageParams {
    pub fn lambda(&self) -> f64 {
        self.alpha.exp()
    }

    /// Zero-filled parameters with the given layout (coefficients are not yet valid).
    pub fn zeros(geometry: &ModelGeometry) -> Self {
        Self {
            alpha: 0.0,
            fid_coeffs: vec![vec![0.0; geometry.fid_coeff_len()]; geometry.n_fid],
            fid_weights: vec![vec![0.0; geometry.fid_rbf.count()]; geometry.n_fid],
            reg_coeffs: vec![vec![0.0; geometry.reg_coeff_len()]; geometry.n_reg],
            reg_weights: vec![vec![0.0; geometry.reg_rbf.count()]; geometry.n_reg],
        }
    }

    pub fn validate(&self, geometry: &ModelGeometry) -> Result<()> {
        let check = |what: &str, blocks: &[Vec<f64>], count: usize, len: usize, nonzero: bool| {
            if blocks.len() != count {
                return Err(SfarlError::shape(format!("{count} {what}"), blocks.len()));
            }
            for b in blocks {
                if b.len() != len {
                    return Err(SfarlError::shape(
                        format!("{what} of length {len}"),
                        b.len(),
                    ));
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(SfarlError::InvalidArgument(format!("non-finite {what}")));
                }
                if nonzero && b.iter().all(|v| *v == 0.0) {
                    return Err(SfarlError::InvalidArgument(format!("all-zero {what}")));
                }
            }
            Ok(())
        };
        if !self.alpha.is_finite() {
            return Err(SfarlError::InvalidArgument("non-finite alpha".into()));
        }
        let g = geometry;
        check(
            "fidelity coefficients",
            &self.fid_coeffs,
            g.n_fid,
            g.fid_coeff_len(),
            true,
        )?;
        check(
            "fidelity weights",
            &self.fid_weights,
            g.n_fid,
            g.fid_rbf.count(),
            false,
        )?;
        check(
            "regularization coefficients",
            &self.reg_coeffs,
            g.n_reg,
            g.reg_coeff_len(),
            true,
        )?;
        check(
            "regularization weights",
            &self.reg_weights,
            g.n_reg,
            g.reg_rbf.count(),
            false,
        )?;
        Ok(())
    }

    /// Flattens in file order: alpha, fid coeffs, fid weights, reg coeffs, reg weights.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.alpha];
        for blocks in [
            &self.fid_coeffs,
            &self.fid_weights,
            &self.reg_coeffs,
            &self.reg_weights,
        ] {
            for b in blocks.iter() {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn from_flat(geometry: &ModelGeometry, flat: &[f64]) -> Result<Self> {
        if flat.len() != geometry.stage_len() {
            return Err(SfarlError::shape(geometry.stage_len(), flat.len()));
        }
        let mut rest = &flat[1..];
        let mut take = |count: usize, len: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|_| {
                    let (head, tail) = rest.split_at(len);
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        };
        let fid_coeffs = take(geometry.n_fid, geometry.fid_coeff_len());
        let fid_weights = take(geometry.n_fid, geometry.fid_rbf.count());
        let reg_coeffs = take(geometry.n_reg, geometry.reg_coeff_len());
        let reg_weights = take(geometry.n_reg, geometry.reg_rbf.count());
        Ok(Self {
            alpha: flat[0],
            fid_coeffs,
            fid_weights,
            reg_coeffs,
            reg_weights,
        })
    }

    /// Materializes filters and influence functions for inference.
    pub fn realize(&self, geometry: &ModelGeometry, bases: &Bases) -> Result<RealizedStage> {
        self.validate(geometry)?;
        let bank = |coeffs: &[Vec<f64>], weights: &[Vec<f64>], basis: &DctBasis, rbf| {
            coeffs
                .iter()
                .zip(weights)
                .map(|(c, w)| {
                    let filter = realize_filter(basis, c)?;
                    Ok(FilterUnit {
                        flipped: rot180(&filter),
                        filter,
                        influence: RbfMixture::new(rbf, w.clone())?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(RealizedStage {
            lambda: self.lambda(),
            fid: bank(
                &self.fid_coeffs,
                &self.fid_weights,
                &bases.fid,
                geometry.fid_rbf,
            )?,
            reg: bank(
                &self.reg_coeffs,
                &self.reg_weights,
                &bases.reg,
                geometry.reg_rbf,
            )?,
        })
    }
}

/// One filter with its rotation and influence function.
#[derive(Clone, Debug)]
pub struct FilterUnit {
    pub filter: Filter,
    pub flipped: Filter,
    pub influence: RbfMixture,
}

/// A stage with its filters realized from coefficients.
#[derive(Clone, Debug)]
pub struct RealizedStage {
    pub lambda: f64,
    pub fid: Vec<FilterUnit>,
    pub reg: Vec<FilterUnit>,
}

/// A trained (or initialized) multi-stage restorer.
#[derive(Clone, Debug, PartialEq)]
pub struct SfarlModel {
    pub task: Task,
    pub feasible_rule: FeasibleRule,
    pub geometry: ModelGeometry,
    pub stages: Vec<StageParams>,
}

impl SfarlModel {
    pub fn new(task: Task, geometry: ModelGeometry, stages: Vec<StageParams>) -> Result<Self> {
        let model = Self {
            task,
            feasible_rule: task.feasible_rule(),
            geometry,
            stages,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.stages.is_empty() {
            return Err(SfarlError::InvalidArgument(
                "a model needs at least one stage".into(),
            ));
        }
        if self.feasible_rule != self.task.feasible_rule() {
            return Err(SfarlError::InvalidArgument(format!(
                "task {:?} requires feasible rule {:?}",
                self.task,
                self.task.feasible_rule()
            )));
        }
        for s in &self.stages {
            s.validate(&self.geometry)?;
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn realize(&self) -> Result<Vec<RealizedStage>> {
        let bases = self.geometry.bases()?;
        self.stages
            .iter()
            .map(|s| s.realize(&self.geometry, &bases))
            .collect()
    }
}
