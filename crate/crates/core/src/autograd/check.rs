//! Finite-difference certification of the analytic gradients on seeded toy
//! instances.

use std::fmt;

use rand::Rng;

use super::{backprop_through_stages, fd_oracle, relative_error, stage_input_vjp, StageGrads};
use crate::degradation::{apply, gaussian_kernel, DegradationOp};
use crate::error::Result;
use crate::grid::Image;
use crate::influence::RbfGeometry;
use crate::loss::{LossKind, SsimConfig};
use crate::model::{
    inference_step, restore, run_inference, ModelGeometry, SfarlModel, StageParams, Task,
};
use crate::rng::Seeded;

/// Gradient blocks that are certified separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradBlock {
    Alpha,
    FidCoeffs,
    FidWeights,
    RegCoeffs,
    RegWeights,
    InputVjp,
}

impl GradBlock {
    pub const ALL: [GradBlock; 6] = [
        GradBlock::Alpha,
        GradBlock::FidCoeffs,
        GradBlock::FidWeights,
        GradBlock::RegCoeffs,
        GradBlock::RegWeights,
        GradBlock::InputVjp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradBlock::Alpha => "alpha",
            GradBlock::FidCoeffs => "fid_coeffs",
            GradBlock::FidWeights => "fid_weights",
            GradBlock::RegCoeffs => "reg_coeffs",
            GradBlock::RegWeights => "reg_weights",
            GradBlock::InputVjp => "input_vjp",
        }
    }

    fn extract(self, g: &StageGrads) -> Vec<f64> {
        let flat = |b: &Vec<Vec<f64>>| b.iter().flatten().copied().collect();
        match self {
            GradBlock::Alpha => vec![g.d_alpha],
            GradBlock::FidCoeffs => flat(&g.d_fid_coeffs),
            GradBlock::FidWeights => flat(&g.d_fid_weights),
            GradBlock::RegCoeffs => flat(&g.d_reg_coeffs),
            GradBlock::RegWeights => flat(&g.d_reg_weights),
            GradBlock::InputVjp => Vec::new(),
        }
    }
}

impl fmt::Display for GradBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub stage_counts: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: corrupts the analytic value of one block.
    pub perturb: Option<GradBlock>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            stage_counts: vec![1, 3],
            losses: vec![LossKind::Mse, LossKind::NegSsim],
            step: 1e-6,
            tolerance: 1e-4,
            perturb: None,
        }
    }
}

/// One certified block on one toy instance.
#[derive(Clone, Debug)]
pub struct GradcheckRow {
    pub seed: u64,
    pub stages: usize,
    pub loss: LossKind,
    pub task: Task,
    pub block: GradBlock,
    /// Worst block-wise relative error over the stages.
    pub rel_error: f64,
    pub passed: bool,
}

impl fmt::Display for GradcheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed={} T={} loss={:?} task={:?} block={} rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.seed,
            self.stages,
            self.loss,
            self.task,
            self.block,
            self.rel_error
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn worst(&self, block: GradBlock) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.block == block)
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    }
}

/// A seeded toy problem: model, observation, ground truth and operator.
#[derive(Clone, Debug)]
pub struct ToyInstance {
    pub model: SfarlModel,
    pub y: Image,
    pub gt: Image,
    pub op: DegradationOp,
}

pub fn toy_geometry() -> ModelGeometry {
    let rbf = RbfGeometry::with_default_precision(5, 1.0).expect("valid toy geometry");
    ModelGeometry {
        filter_size: 3,
        n_fid: 2,
        n_reg: 2,
        fid_rbf: rbf,
        reg_rbf: rbf,
    }
}

/// Random parameters for every stage; the task cycles with the seed so that
/// blur, identity and box-projected instances are all covered.
pub fn toy_instance(seed: u64, stages: usize, side: usize) -> Result<ToyInstance> {
    let task = match seed % 3 {
        0 => Task::Deconv,
        1 => Task::Denoise,
        _ => Task::Rain,
    };
    let geometry = toy_geometry();
    let mut rng = Seeded::new(seed).derive(0x6772_6164).rng();
    let params = (0..stages)
        .map(|_| {
            let mut flat: Vec<f64> = (0..geometry.stage_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            flat[0] = rng.random_range(-1.5..-0.3);
            StageParams::from_flat(&geometry, &flat)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = SfarlModel::new(task, geometry, params)?;
    let gt = Image::from_fn(side, side, |_, _| rng.random_range(0.1..0.9));
    let (op, y) = match task {
        Task::Deconv => {
            let op = DegradationOp::blur(gaussian_kernel(3, 0.8)?);
            let blurred = apply(&op, &gt);
            let y = Image::from_fn(side, side, |i, j| {
                blurred.get(i, j) + rng.random_range(-0.02..0.02)
            });
            (op, y)
        }
        Task::Denoise => (
            DegradationOp::Identity,
            Image::from_fn(side, side, |i, j| {
                gt.get(i, j) + rng.random_range(-0.1..0.1)
            }),
        ),
        Task::Rain => (
            DegradationOp::Identity,
            Image::from_fn(side, side, |i, j| {
                (gt.get(i, j) + rng.random_range(0.0..0.3)).min(1.0)
            }),
        ),
    };
    Ok(ToyInstance { model, y, gt, op })
}

fn model_with_flat(base: &SfarlModel, flat: &[f64]) -> SfarlModel {
    let len = base.geometry.stage_len();
    let mut m = base.clone();
    for (t, stage) in m.stages.iter_mut().enumerate() {
        *stage = StageParams::from_flat(&base.geometry, &flat[t * len..(t + 1) * len])
            .expect("flat length matches geometry");
    }
    m
}

fn perturbed(mut v: Vec<f64>, on: bool) -> Vec<f64> {
    if on {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if let Some(first) = v.first_mut() {
            *first += 1e-2 * (1.0 + norm);
        }
    }
    v
}

/// Checks every block on one instance.
pub fn check_instance(
    inst: &ToyInstance,
    loss: LossKind,
    cfg: &GradcheckConfig,
) -> Result<Vec<(GradBlock, f64)>> {
    let ssim_cfg = SsimConfig::default();
    let model = &inst.model;
    let run = run_inference(model, &inst.y, &inst.op, None)?;
    let loss_grad = loss.grad(run.output(), &inst.gt, &ssim_cfg)?;
    let analytic = backprop_through_stages(&run.tapes, model, &inst.op, &loss_grad)?;

    let flat: Vec<f64> = model.stages.iter().flat_map(|s| s.to_flat()).collect();
    let objective = |p: &[f64]| {
        let m = model_with_flat(model, p);
        let out = restore(&m, &inst.y, &inst.op).expect("toy restore");
        loss.value(&out, &inst.gt, &ssim_cfg).expect("toy loss")
    };
    let numeric = fd_oracle(objective, &flat, cfg.step);
    let numeric_stages: Vec<StageGrads> = numeric
        .chunks(model.geometry.stage_len())
        .map(|c| StageGrads::from_flat(&model.geometry, c))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for block in GradBlock::ALL {
        if block == GradBlock::InputVjp {
            continue;
        }
        let worst = analytic
            .iter()
            .zip(&numeric_stages)
            .map(|(a, n)| {
                relative_error(
                    &perturbed(block.extract(a), cfg.perturb == Some(block)),
                    &block.extract(n),
                    1e-8,
                )
            })
            .fold(0.0, f64::max);
        out.push((block, worst));
    }

    // input vjp of the first stage against a random adjoint
    let stage = &model.stages[0];
    let geometry = &model.geometry;
    let realized = stage.realize(geometry, &geometry.bases()?)?;
    let (h, w) = inst.y.dims();
    let mut rng = Seeded::new(flat.len() as u64).derive(0x0076_6a70).rng();
    let e = Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
    let tape = &run.tapes[0];
    let vjp = stage_input_vjp(tape, stage, geometry, &inst.op, &e)?;
    let x0 = tape.input.clone();
    let contract = |p: &[f64]| {
        let x = Image::from_vec_unchecked(h, w, p.to_vec());
        let (next, _) = inference_step(&x, &inst.y, &inst.op, &realized, model.feasible_rule)
            .expect("toy step");
        next.dot(&e)
    };
    let numeric = fd_oracle(contract, x0.as_slice(), cfg.step);
    let analytic = perturbed(vjp.into_vec(), cfg.perturb == Some(GradBlock::InputVjp));
    out.push((
        GradBlock::InputVjp,
        relative_error(&analytic, &numeric, 1e-8),
    ));
    Ok(out)
}

/// Runs the full suite over seeds, stage counts and losses.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for &seed in &cfg.seeds {
        for &stages in &cfg.stage_counts {
            let inst = toy_instance(seed, stages, 12)?;
            for &loss in &cfg.losses {
                for (block, rel_error) in check_instance(&inst, loss, cfg)? {
                    report.rows.push(GradcheckRow {
                        seed,
                        stages,
                        loss,
                        task: inst.model.task,
                        block,
                        rel_error,
                        passed: rel_error <= cfg.tolerance,
                    });
                }
            }
        }
    }
    Ok(report)
}
