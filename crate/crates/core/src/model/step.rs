use super::{FeasibleRule, RealizedStage, SfarlModel};
use crate::degradation::{apply, apply_adjoint, DegradationOp};
use crate::error::Result;
use crate::grid::{pad, Boundary, Image};

/// Pixels clamped by the projection; empty under [`FeasibleRule::Reals`].
pub type ClipMask = Vec<bool>;

/// Intermediates of one stage needed by the backward pass.
#[derive(Clone, Debug)]
pub struct StageTape {
    /// Stage input `x^t`.
    pub input: Image,
    /// `A x^t - y`.
    pub residual: Image,
    /// Fidelity pre-activations `p_i * (A x^t - y)`.
    pub fid_pre: Vec<Image>,
    /// Regularization pre-activations `f_i * x^t`.
    pub reg_pre: Vec<Image>,
    pub mask: ClipMask,
}

/// Clamps onto the feasible set and reports which pixels were clamped.
pub fn project_feasible(x: &Image, y: &Image, rule: FeasibleRule) -> Result<(Image, ClipMask)> {
    x.check_dims(y)?;
    Ok(match rule {
        FeasibleRule::Reals => (x.clone(), Vec::new()),
        FeasibleRule::BoxZeroToY => {
            let mut out = x.clone();
            let mut mask = vec![false; x.len()];
            for ((v, &hi), m) in out
                .as_mut_slice()
                .iter_mut()
                .zip(y.as_slice())
                .zip(&mut mask)
            {
                let hi = hi.max(0.0);
                let c = v.clamp(0.0, hi);
                if c != *v {
                    *v = c;
                    *m = true;
                }
            }
            (out, mask)
        }
    })
}

fn step_impl(
    x: &Image,
    y: &Image,
    op: &DegradationOp,
    stage: &RealizedStage,
    rule: FeasibleRule,
    record: bool,
) -> Result<(Image, Option<StageTape>)> {
    x.check_dims(y)?;
    let (h, w) = x.dims();
    let mut update = Image::zeros(h, w);
    let mut scratch = vec![0.0; h * w];

    // regularization: sum_i rot180(f_i) * phi_i(f_i * x)
    let mut reg_pre = Vec::new();
    if let Some(first) = stage.reg.first() {
        let padded = pad(x, first.filter.half(), Boundary::Symmetric);
        for unit in &stage.reg {
            let u = padded.conv(&unit.filter);
            unit.influence.eval_into(u.as_slice(), &mut scratch);
            let act = Image::from_vec_unchecked(h, w, scratch.clone());
            pad(&act, unit.flipped.half(), Boundary::Symmetric)
                .conv_accumulate(&unit.flipped, &mut update);
            if record {
                reg_pre.push(u);
            }
        }
    }

    // fidelity: lambda * A^T sum_i rot180(p_i) * phi_i(p_i * (A x - y))
    let residual = apply(op, x).sub(y);
    let mut fid_pre = Vec::new();
    if let Some(first) = stage.fid.first() {
        let padded = pad(&residual, first.filter.half(), Boundary::Symmetric);
        let mut back = Image::zeros(h, w);
        for unit in &stage.fid {
            let b = padded.conv(&unit.filter);
            unit.influence.eval_into(b.as_slice(), &mut scratch);
            let act = Image::from_vec_unchecked(h, w, scratch.clone());
            pad(&act, unit.flipped.half(), Boundary::Symmetric)
                .conv_accumulate(&unit.flipped, &mut back);
            if record {
                fid_pre.push(b);
            }
        }
        update.axpy(stage.lambda, &apply_adjoint(op, &back));
    }

    let raw = x.sub(&update);
    let (next, mask) = project_feasible(&raw, y, rule)?;
    let tape = record.then(|| StageTape {
        input: x.clone(),
        residual,
        fid_pre,
        reg_pre,
        mask,
    });
    Ok((next, tape))
}

/// One gradient-descent stage followed by projection.
pub fn inference_step(
    x: &Image,
    y: &Image,
    op: &DegradationOp,
    stage: &RealizedStage,
    rule: FeasibleRule,
) -> Result<(Image, StageTape)> {
    let (next, tape) = step_impl(x, y, op, stage, rule, true)?;
    Ok((next, tape.expect("tape recorded")))
}

/// Every stage output `x^1 .. x^T` and the tapes that produced them.
#[derive(Clone, Debug)]
pub struct Inference {
    pub states: Vec<Image>,
    pub tapes: Vec<StageTape>,
}

impl Inference {
    pub fn output(&self) -> &Image {
        self.states.last().expect("at least one stage")
    }
}

/// Runs every stage from `x0` (the degraded image when `None`), recording tapes.
pub fn run_inference(
    model: &SfarlModel,
    y: &Image,
    op: &DegradationOp,
    x0: Option<&Image>,
) -> Result<Inference> {
    let stages = model.realize()?;
    run_realized(&stages, model.feasible_rule, y, op, x0)
}

pub(crate) fn run_realized(
    stages: &[RealizedStage],
    rule: FeasibleRule,
    y: &Image,
    op: &DegradationOp,
    x0: Option<&Image>,
) -> Result<Inference> {
    let mut x = x0.unwrap_or(y).clone();
    x.check_dims(y)?;
    let mut states = Vec::with_capacity(stages.len());
    let mut tapes = Vec::with_capacity(stages.len());
    for stage in stages {
        let (next, tape) = inference_step(&x, y, op, stage, rule)?;
        tapes.push(tape);
        states.push(next.clone());
        x = next;
    }
    Ok(Inference { states, tapes })
}

/// Forward pass over a prefix of realized stages without recording tapes.
pub(crate) fn forward_realized(
    stages: &[RealizedStage],
    rule: FeasibleRule,
    y: &Image,
    op: &DegradationOp,
    x0: &Image,
) -> Result<Image> {
    let mut x = x0.clone();
    for stage in stages {
        x = step_impl(&x, y, op, stage, rule, false)?.0;
    }
    Ok(x)
}

/// The final restoration `x^T`, starting from `y`.
pub fn restore(model: &SfarlModel, y: &Image, op: &DegradationOp) -> Result<Image> {
    let stages = model.realize()?;
    forward_realized(&stages, model.feasible_rule, y, op, y)
}
