//! Analytic gradients of the unrolled inference chain.
//!
//! Every matrix of the derivation is realized as a convolution, an exact
//! convolution transpose, a windowed correlation (filter gradients) or an
//! elementwise product; nothing is materialized densely.

mod check;

pub use check::{
    check_instance, run_gradcheck, toy_geometry, toy_instance, GradBlock, GradcheckConfig,
    GradcheckReport, GradcheckRow, ToyInstance,
};

use crate::degradation::{apply_adjoint_transpose, apply_transpose, DegradationOp};
use crate::error::{Result, SfarlError};
use crate::grid::{conv2_same_transpose, normalize_vjp, pad, rot180, Boundary, Filter, Image};
use crate::model::{Bases, ModelGeometry, RealizedStage, SfarlModel, StageParams, StageTape};

/// Gradients of a scalar loss with respect to one stage's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGrads {
    pub d_alpha: f64,
    pub d_fid_coeffs: Vec<Vec<f64>>,
    pub d_fid_weights: Vec<Vec<f64>>,
    pub d_reg_coeffs: Vec<Vec<f64>>,
    pub d_reg_weights: Vec<Vec<f64>>,
}

impl StageGrads {
    pub fn zeros(geometry: &ModelGeometry) -> Self {
        let p = StageParams::zeros(geometry);
        Self {
            d_alpha: 0.0,
            d_fid_coeffs: p.fid_coeffs,
            d_fid_weights: p.fid_weights,
            d_reg_coeffs: p.reg_coeffs,
            d_reg_weights: p.reg_weights,
        }
    }

    /// Same order as [`StageParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.d_alpha];
        for block in [
            &self.d_fid_coeffs,
            &self.d_fid_weights,
            &self.d_reg_coeffs,
            &self.d_reg_weights,
        ] {
            for v in block {
                out.extend_from_slice(v);
            }
        }
        out
    }

    pub fn from_flat(geometry: &ModelGeometry, flat: &[f64]) -> Result<Self> {
        let p = StageParams::from_flat(geometry, flat)?;
        Ok(Self {
            d_alpha: p.alpha,
            d_fid_coeffs: p.fid_coeffs,
            d_fid_weights: p.fid_weights,
            d_reg_coeffs: p.reg_coeffs,
            d_reg_weights: p.reg_weights,
        })
    }

    /// `self += other`, block by block.
    pub fn accumulate(&mut self, other: &StageGrads) {
        self.d_alpha += other.d_alpha;
        for (dst, src) in [
            (&mut self.d_fid_coeffs, &other.d_fid_coeffs),
            (&mut self.d_fid_weights, &other.d_fid_weights),
            (&mut self.d_reg_coeffs, &other.d_reg_coeffs),
            (&mut self.d_reg_weights, &other.d_reg_weights),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                for (a, b) in d.iter_mut().zip(s) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.d_alpha *= s;
        for block in [
            &mut self.d_fid_coeffs,
            &mut self.d_fid_weights,
            &mut self.d_reg_coeffs,
            &mut self.d_reg_weights,
        ] {
            for v in block.iter_mut().flatten() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Zeroes the adjoint at pixels clamped by the projection.
pub fn mask_adjoint(e: &Image, mask: &[bool]) -> Image {
    if mask.is_empty() {
        return e.clone();
    }
    let mut out = e.clone();
    for (v, &m) in out.as_mut_slice().iter_mut().zip(mask) {
        if m {
            *v = 0.0;
        }
    }
    out
}

fn check_tape(tape: &StageTape, params: &StageParams, realized: &RealizedStage) -> Result<()> {
    if tape.fid_pre.len() != params.fid_coeffs.len()
        || tape.reg_pre.len() != params.reg_coeffs.len()
        || realized.fid.len() != params.fid_coeffs.len()
        || realized.reg.len() != params.reg_coeffs.len()
    {
        return Err(SfarlError::shape(
            format!(
                "{} fidelity / {} regularization filters",
                params.fid_coeffs.len(),
                params.reg_coeffs.len()
            ),
            format!("tape with {} / {}", tape.fid_pre.len(), tape.reg_pre.len()),
        ));
    }
    Ok(())
}

/// Shared backward pass of one stage.
///
/// `e` is `dl/dx^{t+1}`; it is masked with the tape's clip mask here (masking
/// is idempotent, so a pre-masked adjoint is fine). Returns the parameter
/// gradients and, when `want_input` is set, `dl/dx^t`.
pub fn stage_backward(
    tape: &StageTape,
    params: &StageParams,
    realized: &RealizedStage,
    bases: &Bases,
    op: &DegradationOp,
    e: &Image,
    want_input: bool,
) -> Result<(StageGrads, Option<Image>)> {
    check_tape(tape, params, realized)?;
    e.check_dims(&tape.input)?;
    let (h, w) = e.dims();
    let n = h * w;
    let e_m = mask_adjoint(e, &tape.mask);
    let lambda = realized.lambda;
    let mut input_grad = want_input.then(|| e_m.clone());

    // regularization filters
    let mut d_reg_coeffs = Vec::with_capacity(realized.reg.len());
    let mut d_reg_weights = Vec::with_capacity(realized.reg.len());
    let x_pad = realized
        .reg
        .first()
        .map(|u| pad(&tape.input, u.filter.half(), Boundary::Symmetric));
    let mut act = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for ((unit, u), coeffs) in realized
        .reg
        .iter()
        .zip(&tape.reg_pre)
        .zip(&params.reg_coeffs)
    {
        for ((a, s), &z) in act.iter_mut().zip(slope.iter_mut()).zip(u.as_slice()) {
            (*a, *s) = unit.influence.value_and_deriv(z);
        }
        let act_img = Image::from_vec_unchecked(h, w, act.clone());
        let k = unit.filter.size();
        // through the rotated filter
        let g_a = conv2_same_transpose(&e_m, &unit.flipped, Boundary::Symmetric);
        let via_flipped =
            pad(&act_img, unit.flipped.half(), Boundary::Symmetric).filter_grad(&e_m, k);
        let mut dw = vec![0.0; unit.influence.weights().len()];
        unit.influence
            .accumulate_weight_grad(u.as_slice(), g_a.as_slice(), &mut dw);
        dw.iter_mut().for_each(|v| *v = -*v);
        // through the influence slope and the forward filter
        let g_u = Image::from_vec_unchecked(
            h,
            w,
            slope
                .iter()
                .zip(g_a.as_slice())
                .map(|(s, g)| s * g)
                .collect(),
        );
        let via_filter = x_pad.as_ref().expect("padded input").filter_grad(&g_u, k);
        let mut d_filter = rot180(&via_flipped);
        add_scaled_taps(&mut d_filter, &via_filter, 1.0);
        negate(&mut d_filter);
        d_reg_coeffs.push(normalize_vjp(&bases.reg, coeffs, &d_filter)?);
        d_reg_weights.push(dw);
        if let Some(ig) = input_grad.as_mut() {
            ig.axpy(
                -1.0,
                &conv2_same_transpose(&g_u, &unit.filter, Boundary::Symmetric),
            );
        }
    }

    // fidelity filters
    let mut d_fid_coeffs = Vec::with_capacity(realized.fid.len());
    let mut d_fid_weights = Vec::with_capacity(realized.fid.len());
    let mut d_lambda = 0.0;
    let g_h = if realized.fid.is_empty() {
        None
    } else {
        Some(apply_adjoint_transpose(op, &e_m))
    };
    let r_pad = realized
        .fid
        .first()
        .map(|u| pad(&tape.residual, u.filter.half(), Boundary::Symmetric));
    let mut residual_grad = want_input.then(|| Image::zeros(h, w));
    for ((unit, b), coeffs) in realized
        .fid
        .iter()
        .zip(&tape.fid_pre)
        .zip(&params.fid_coeffs)
    {
        let g_h = g_h.as_ref().expect("fidelity adjoint");
        for ((a, s), &z) in act.iter_mut().zip(slope.iter_mut()).zip(b.as_slice()) {
            (*a, *s) = unit.influence.value_and_deriv(z);
        }
        let v_img = Image::from_vec_unchecked(h, w, act.clone());
        let k = unit.filter.size();
        let g_v = conv2_same_transpose(g_h, &unit.flipped, Boundary::Symmetric);
        d_lambda -= v_img.dot(&g_v);
        let via_flipped = pad(&v_img, unit.flipped.half(), Boundary::Symmetric).filter_grad(g_h, k);
        let mut dw = vec![0.0; unit.influence.weights().len()];
        unit.influence
            .accumulate_weight_grad(b.as_slice(), g_v.as_slice(), &mut dw);
        dw.iter_mut().for_each(|v| *v *= -lambda);
        let g_b = Image::from_vec_unchecked(
            h,
            w,
            slope
                .iter()
                .zip(g_v.as_slice())
                .map(|(s, g)| s * g)
                .collect(),
        );
        let via_filter = r_pad
            .as_ref()
            .expect("padded residual")
            .filter_grad(&g_b, k);
        let mut d_filter = rot180(&via_flipped);
        add_scaled_taps(&mut d_filter, &via_filter, 1.0);
        scale_taps(&mut d_filter, -lambda);
        d_fid_coeffs.push(normalize_vjp(&bases.fid, coeffs, &d_filter)?);
        d_fid_weights.push(dw);
        if let Some(rg) = residual_grad.as_mut() {
            rg.axpy(
                1.0,
                &conv2_same_transpose(&g_b, &unit.filter, Boundary::Symmetric),
            );
        }
    }
    if let (Some(ig), Some(rg)) = (input_grad.as_mut(), residual_grad) {
        if !realized.fid.is_empty() {
            ig.axpy(-lambda, &apply_transpose(op, &rg));
        }
    }

    let grads = StageGrads {
        d_alpha: lambda * d_lambda,
        d_fid_coeffs,
        d_fid_weights,
        d_reg_coeffs,
        d_reg_weights,
    };
    Ok((grads, input_grad))
}

fn add_scaled_taps(dst: &mut Filter, src: &Filter, s: f64) {
    for (d, v) in dst.taps_mut().iter_mut().zip(src.taps()) {
        *d += s * v;
    }
}

fn scale_taps(f: &mut Filter, s: f64) {
    f.taps_mut().iter_mut().for_each(|v| *v *= s);
}

fn negate(f: &mut Filter) {
    scale_taps(f, -1.0);
}

/// Parameter gradients of one stage given `e = dl/dx^{t+1}`.
pub fn stage_param_grads(
    tape: &StageTape,
    params: &StageParams,
    geometry: &ModelGeometry,
    op: &DegradationOp,
    e: &Image,
) -> Result<StageGrads> {
    let bases = geometry.bases()?;
    let realized = params.realize(geometry, &bases)?;
    Ok(stage_backward(tape, params, &realized, &bases, op, e, false)?.0)
}

/// `e^T dx^{t+1}/dx^t`, the adjoint handed to the previous stage.
pub fn stage_input_vjp(
    tape: &StageTape,
    params: &StageParams,
    geometry: &ModelGeometry,
    op: &DegradationOp,
    e: &Image,
) -> Result<Image> {
    let bases = geometry.bases()?;
    let realized = params.realize(geometry, &bases)?;
    let (_, input) = stage_backward(tape, params, &realized, &bases, op, e, true)?;
    Ok(input.expect("input gradient requested"))
}

/// Walks the stages from last to first and returns every stage's gradients.
pub fn backprop_through_stages(
    tapes: &[StageTape],
    model: &SfarlModel,
    op: &DegradationOp,
    loss_grad: &Image,
) -> Result<Vec<StageGrads>> {
    let bases = model.geometry.bases()?;
    let realized = model.realize()?;
    backprop_realized(tapes, model, &realized, &bases, op, loss_grad)
}

pub(crate) fn backprop_realized(
    tapes: &[StageTape],
    model: &SfarlModel,
    realized: &[RealizedStage],
    bases: &Bases,
    op: &DegradationOp,
    loss_grad: &Image,
) -> Result<Vec<StageGrads>> {
    if tapes.len() != model.num_stages() {
        return Err(SfarlError::shape(
            format!("{} tapes", model.num_stages()),
            format!("{}", tapes.len()),
        ));
    }
    let mut grads = Vec::with_capacity(tapes.len());
    let mut adjoint = loss_grad.clone();
    for t in (0..tapes.len()).rev() {
        let (g, input) = stage_backward(
            &tapes[t],
            &model.stages[t],
            &realized[t],
            bases,
            op,
            &adjoint,
            t > 0,
        )?;
        grads.push(g);
        if let Some(input) = input {
            adjoint = input;
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Central finite differences of `f` at `params`, one coordinate at a time.
pub fn fd_oracle(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|j| {
            let orig = p[j];
            p[j] = orig + h;
            let plus = f(&p);
            p[j] = orig - h;
            let minus = f(&p);
            p[j] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b|_2 / max(|b|_2, floor)`, the block-wise relative error used by
/// gradient checks.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{apply, apply_adjoint, gaussian_kernel};
    use crate::grid::conv2_same;
    use crate::model::{inference_step, run_inference, Task};
    use crate::rng::Seeded;
    use rand::Rng;

    fn zero_weight_model(inst: &ToyInstance) -> SfarlModel {
        let mut m = inst.model.clone();
        for s in &mut m.stages {
            s.fid_weights.iter_mut().flatten().for_each(|w| *w = 0.0);
            s.reg_weights.iter_mut().flatten().for_each(|w| *w = 0.0);
        }
        m
    }

    fn random_like(img: &Image, seed: u64) -> Image {
        let mut rng = Seeded::new(seed).rng();
        let (h, w) = img.dims();
        Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let inst = toy_instance(0, 2, 10).unwrap();
        let run = run_inference(&inst.model, &inst.y, &inst.op, None).unwrap();
        let zero = Image::zeros(10, 10);
        let grads = backprop_through_stages(&run.tapes, &inst.model, &inst.op, &zero).unwrap();
        for g in grads {
            assert!(g.to_flat().iter().all(|v| *v == 0.0));
        }
        let vjp = stage_input_vjp(
            &run.tapes[0],
            &inst.model.stages[0],
            &inst.model.geometry,
            &inst.op,
            &zero,
        )
        .unwrap();
        assert!(vjp.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_zero_coefficient_gradients_and_identity_jacobian() {
        let inst = toy_instance(3, 1, 10).unwrap();
        let model = zero_weight_model(&inst);
        let run = run_inference(&model, &inst.y, &inst.op, None).unwrap();
        let e = random_like(&inst.y, 1);
        let g = stage_param_grads(
            &run.tapes[0],
            &model.stages[0],
            &model.geometry,
            &inst.op,
            &e,
        )
        .unwrap();
        assert!(g.d_fid_coeffs.iter().flatten().all(|v| *v == 0.0));
        assert!(g.d_reg_coeffs.iter().flatten().all(|v| *v == 0.0));
        assert!(g.d_fid_weights.iter().flatten().any(|v| *v != 0.0));
        let vjp = stage_input_vjp(
            &run.tapes[0],
            &model.stages[0],
            &model.geometry,
            &inst.op,
            &e,
        )
        .unwrap();
        assert_eq!(vjp, e);
    }

    #[test]
    fn single_stage_backprop_equals_stage_grads() {
        let inst = toy_instance(2, 1, 12).unwrap();
        let run = run_inference(&inst.model, &inst.y, &inst.op, None).unwrap();
        let e = random_like(&inst.y, 2);
        let chain = backprop_through_stages(&run.tapes, &inst.model, &inst.op, &e).unwrap();
        let direct = stage_param_grads(
            &run.tapes[0],
            &inst.model.stages[0],
            &inst.model.geometry,
            &inst.op,
            &e,
        )
        .unwrap();
        assert_eq!(chain, vec![direct]);
    }

    #[test]
    fn gradients_are_linear_in_the_adjoint() {
        let inst = toy_instance(6, 2, 12).unwrap();
        let run = run_inference(&inst.model, &inst.y, &inst.op, None).unwrap();
        let (e1, e2) = (random_like(&inst.y, 3), random_like(&inst.y, 4));
        let grads = |e: &Image| -> Vec<f64> {
            backprop_through_stages(&run.tapes, &inst.model, &inst.op, e)
                .unwrap()
                .iter()
                .flat_map(|g| g.to_flat())
                .collect()
        };
        let combo = e1.scale(2.0).add(&e2.scale(-0.5));
        let lhs = grads(&combo);
        let rhs: Vec<f64> = grads(&e1)
            .iter()
            .zip(grads(&e2))
            .map(|(a, b)| 2.0 * a - 0.5 * b)
            .collect();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn tape_count_mismatch_is_rejected() {
        let inst = toy_instance(0, 2, 8).unwrap();
        let run = run_inference(&inst.model, &inst.y, &inst.op, None).unwrap();
        let e = Image::zeros(8, 8);
        assert!(backprop_through_stages(&run.tapes[..1], &inst.model, &inst.op, &e).is_err());
    }

    /// Dense matrix of a linear image map, built column by column.
    fn dense(h: usize, w: usize, f: impl Fn(&Image) -> Image) -> Vec<Vec<f64>> {
        let n = h * w;
        let mut m = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut basis = Image::zeros(h, w);
            basis.as_mut_slice()[j] = 1.0;
            for (i, v) in f(&basis).as_slice().iter().enumerate() {
                m[i][j] = *v;
            }
        }
        m
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().zip(b).map(|(x, r)| x * r[j]).sum())
                    .collect()
            })
            .collect()
    }

    fn scale_rows(diag: &[f64], m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        m.iter()
            .zip(diag)
            .map(|(row, d)| row.iter().map(|v| v * d).collect())
            .collect()
    }

    #[test]
    fn input_vjp_matches_dense_jacobian() {
        let (h, w) = (6, 6);
        let n = h * w;
        let mut inst = toy_instance(0, 1, 6).unwrap();
        assert_eq!(inst.model.task, Task::Deconv);
        inst.op = DegradationOp::blur(gaussian_kernel(3, 0.7).unwrap());
        let model = &inst.model;
        let stage = &model.stages[0];
        let realized = stage
            .realize(&model.geometry, &model.geometry.bases().unwrap())
            .unwrap();
        let x = random_like(&inst.y, 9).map(|v| 0.5 + 0.3 * v);
        let (_, tape) =
            inference_step(&x, &inst.y, &inst.op, &realized, model.feasible_rule).unwrap();

        // J = I - sum Cfbar D(phi'(u)) Cf - lambda Atilde sum Cpbar D(phi'(b)) Cp A
        let mut jac: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let sym = Boundary::Symmetric;
        for (unit, u) in realized.reg.iter().zip(&tape.reg_pre) {
            let cf = dense(h, w, |v| conv2_same(v, &unit.filter, sym));
            let cfb = dense(h, w, |v| conv2_same(v, &unit.flipped, sym));
            let d: Vec<f64> = u
                .as_slice()
                .iter()
                .map(|z| unit.influence.deriv(*z))
                .collect();
            let term = matmul(&cfb, &scale_rows(&d, &cf));
            for (r, t) in jac.iter_mut().zip(term) {
                r.iter_mut().zip(t).for_each(|(a, b)| *a -= b);
            }
        }
        let a = dense(h, w, |v| apply(&inst.op, v));
        let at = dense(h, w, |v| apply_adjoint(&inst.op, v));
        for (unit, b) in realized.fid.iter().zip(&tape.fid_pre) {
            let cp = dense(h, w, |v| conv2_same(v, &unit.filter, sym));
            let cpb = dense(h, w, |v| conv2_same(v, &unit.flipped, sym));
            let d: Vec<f64> = b
                .as_slice()
                .iter()
                .map(|z| unit.influence.deriv(*z))
                .collect();
            let term = matmul(&at, &matmul(&cpb, &scale_rows(&d, &matmul(&cp, &a))));
            for (r, t) in jac.iter_mut().zip(term) {
                r.iter_mut()
                    .zip(t)
                    .for_each(|(x, y)| *x -= realized.lambda * y);
            }
        }

        for j in 0..n {
            let mut e = Image::zeros(h, w);
            e.as_mut_slice()[j] = 1.0;
            let vjp = stage_input_vjp(&tape, stage, &model.geometry, &inst.op, &e).unwrap();
            for (i, v) in vjp.as_slice().iter().enumerate() {
                assert!((v - jac[j][i]).abs() <= 1e-10, "row {j} col {i}");
            }
        }
    }

    #[test]
    fn fd_oracle_on_simple_functions() {
        let p = [0.3, -1.2, 2.5];
        let g = fd_oracle(|v| 0.5 * v.iter().map(|x| x * x).sum::<f64>(), &p, 1e-4);
        for (a, b) in g.iter().zip(&p) {
            assert!((a - b).abs() < 1e-9);
        }
        let c = [1.5, -2.0, 0.25];
        let g = fd_oracle(|v| v.iter().zip(&c).map(|(x, y)| x * y).sum(), &p, 1e-3);
        for (a, b) in g.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_flat_round_trip() {
        let geometry = toy_geometry();
        let flat: Vec<f64> = (0..geometry.stage_len()).map(|i| i as f64).collect();
        let g = StageGrads::from_flat(&geometry, &flat).unwrap();
        assert_eq!(g.to_flat(), flat);
        let mut twice = g.clone();
        twice.accumulate(&g);
        twice.scale(0.5);
        assert_eq!(twice, g);
    }
}
