//! Parameter initialization, mini-batching, greedy stage-wise training and
//! joint fine-tuning.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::backprop_realized;
use crate::autograd::{stage_backward, StageGrads};
use crate::degradation::{DegradationOp, TrainingSample};
use crate::error::{Result, SfarlError};
use crate::grid::Image;
use crate::influence::fit_weights;
use crate::loss::{psnr, ssim, LossKind, SsimConfig};
use crate::model::{forward_realized, run_realized};
use crate::model::{inference_step, ModelGeometry, RealizedStage, SfarlModel, StageParams, Task};
use crate::rng::Seeded;

/// Stream ids for the per-epoch shuffling generators.
const GREEDY_STREAM: u64 = 0x6772_6565;
const JOINT_STREAM: u64 = 0x6a6f_696e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs_greedy: usize,
    pub epochs_joint: usize,
    pub batch_size: usize,
    /// Optimizer of the greedy phase.
    pub adam: AdamConfig,
    /// Optimizer of the joint phase. Its smaller default step keeps the fresh
    /// optimizer from knocking the greedy solution far uphill before the
    /// moment estimates settle.
    pub joint_adam: AdamConfig,
    pub patch_size: usize,
    pub seed: u64,
    /// Global-norm clip applied to each mini-batch gradient.
    pub grad_clip: f64,
    /// Checkpoint period of the joint phase, in epochs.
    pub joint_checkpoint_every: usize,
    pub ssim: SsimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mse,
            epochs_greedy: 10,
            epochs_joint: 50,
            batch_size: 8,
            adam: AdamConfig::default(),
            joint_adam: AdamConfig {
                learning_rate: 1e-4,
                ..AdamConfig::default()
            },
            patch_size: 64,
            seed: 0,
            grad_clip: 1e2,
            joint_checkpoint_every: 10,
            ssim: SsimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.joint_adam.validate()?;
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(SfarlError::InvalidArgument(
                "batch and patch sizes must be at least 1".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(SfarlError::InvalidArgument(
                "gradient clip must be positive".into(),
            ));
        }
        if self.joint_checkpoint_every == 0 {
            return Err(SfarlError::InvalidArgument(
                "joint checkpoint period must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A degraded/clean pair with the operator used for restoration.
#[derive(Clone, Debug)]
pub struct Pair {
    pub y: Image,
    pub gt: Image,
    pub op: DegradationOp,
}

impl From<&TrainingSample> for Pair {
    fn from(s: &TrainingSample) -> Self {
        Pair {
            y: s.degraded.clone(),
            gt: s.ground_truth.clone(),
            op: s.op.clone(),
        }
    }
}

/// Every stage initialized identically: one DCT atom per filter, fidelity
/// influence fitted to the identity, regularization influence fitted to a
/// scaled log-penalty derivative, and `lambda = 1`.
///
/// Both influence targets are divided by the number of filter taps: a
/// complete orthonormal bank satisfies `sum_m rot180(p_m) * p_m = k^2 delta`,
/// so unscaled identity influences would take a `k^2`-times too long step.
pub fn init_model(geometry: &ModelGeometry, task: Task, stages: usize) -> Result<SfarlModel> {
    geometry.validate()?;
    let one_hot = |count: usize, len: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|m| {
                let mut c = vec![0.0; len];
                c[m] = 1.0;
                c
            })
            .collect()
    };
    let taps = (geometry.filter_size * geometry.filter_size) as f64;
    let fid_w = fit_weights(&geometry.fid_rbf, |z| z / taps);
    let reg_w = fit_weights(&geometry.reg_rbf, |z| 0.1 * 2.0 * z / (1.0 + z * z) / taps);
    let stage = StageParams {
        alpha: 0.0,
        fid_coeffs: one_hot(geometry.n_fid, geometry.fid_coeff_len()),
        fid_weights: vec![fid_w; geometry.n_fid],
        reg_coeffs: one_hot(geometry.n_reg, geometry.reg_coeff_len()),
        reg_weights: vec![reg_w; geometry.n_reg],
    };
    SfarlModel::new(task, *geometry, vec![stage; stages])
}

/// One epoch of shuffled mini-batches of aligned random crops.
pub fn make_batches<R: Rng>(
    data: &[Pair],
    batch_size: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Pair>>> {
    if batch_size == 0 {
        return Err(SfarlError::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut patches = Vec::with_capacity(data.len());
    for i in order {
        let p = &data[i];
        let (h, w) = p.y.dims();
        if patch_size > h.min(w) {
            return Err(SfarlError::Dimension(format!(
                "patch size {patch_size} exceeds sample {i} of size {h}x{w}"
            )));
        }
        let top = rng.random_range(0..=h - patch_size);
        let left = rng.random_range(0..=w - patch_size);
        patches.push(Pair {
            y: p.y.crop(top, left, patch_size, patch_size)?,
            gt: p.gt.crop(top, left, patch_size, patch_size)?,
            op: p.op.clone(),
        });
    }
    Ok(patches.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Zero-based stage index during greedy training.
    pub stage: Option<usize>,
    /// One-based epoch within the phase (and stage).
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub wall_secs: f64,
}

/// Callbacks invoked during training. All methods default to no-ops.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Observer that keeps the epoch records in memory.
#[derive(Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl TrainObserver for History {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Training data plus an optional validation split.
pub struct TrainData<'a> {
    pub train: &'a [Pair],
    pub validation: &'a [Pair],
}

fn check_data(data: &[Pair], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(SfarlError::InvalidArgument("training set is empty".into()));
    }
    for (i, p) in data.iter().enumerate() {
        p.y.check_dims(&p.gt)?;
        let (h, w) = p.y.dims();
        if cfg.patch_size > h.min(w) {
            return Err(SfarlError::Dimension(format!(
                "patch size {} exceeds sample {i} of size {h}x{w}",
                cfg.patch_size
            )));
        }
    }
    Ok(())
}

/// Mean PSNR and SSIM of the restored validation split.
pub fn evaluate(model: &SfarlModel, data: &[Pair], ssim_cfg: &SsimConfig) -> Result<(f64, f64)> {
    let stages = model.realize()?;
    let scores = data
        .par_iter()
        .map(|p| {
            let out = forward_realized(&stages, model.feasible_rule, &p.y, &p.op, &p.y)?;
            Ok((psnr(&out, &p.gt)?, ssim(&out, &p.gt, ssim_cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len().max(1) as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

/// Mean training loss of the full model over whole samples.
pub fn mean_loss(model: &SfarlModel, data: &[Pair], cfg: &TrainConfig) -> Result<f64> {
    let stages = model.realize()?;
    let losses = data
        .par_iter()
        .map(|p| {
            let out = forward_realized(&stages, model.feasible_rule, &p.y, &p.op, &p.y)?;
            cfg.loss.value(&out, &p.gt, &cfg.ssim)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn validation_metrics(
    model: &SfarlModel,
    validation: &[Pair],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    if validation.is_empty() {
        return Ok((None, None));
    }
    let (p, s) = evaluate(model, validation, &cfg.ssim)?;
    Ok((Some(p), Some(s)))
}

/// Sums per-sample results in sample order so the reduction does not
/// depend on how rayon scheduled the work.
fn ordered_sum(results: Vec<(f64, Vec<f64>)>, len: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; len];
    for (l, g) in results {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

fn set_stage_flat(model: &mut SfarlModel, t: usize, flat: &[f64]) -> Result<()> {
    model.stages[t] = StageParams::from_flat(&model.geometry, flat)?;
    model.stages[t].validate(&model.geometry)
}

/// Whether a crop is guaranteed to cover the whole sample, so that prefix
/// outputs can be computed once per stage and reused every epoch.
fn crops_are_whole(data: &[Pair], patch: usize) -> bool {
    data.iter().all(|p| p.y.dims() == (patch, patch))
}

/// Greedy stage-wise training (stages `from_stage..T`), each stage trained
/// for `epochs_greedy` epochs with every earlier stage frozen.
pub fn train_greedy(
    model: &mut SfarlModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    train_greedy_from(model, data, cfg, 0, observer)
}

pub fn train_greedy_from(
    model: &mut SfarlModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    from_stage: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate()?;
    check_data(data.train, cfg)?;
    model.validate()?;
    if cfg.epochs_greedy == 0 {
        return Ok(());
    }
    let bases = model.geometry.bases()?;
    let whole = crops_are_whole(data.train, cfg.patch_size);
    let rule = model.feasible_rule;
    let start = Instant::now();

    for t in from_stage..model.num_stages() {
        let prefix: Vec<RealizedStage> = model.stages[..t]
            .iter()
            .map(|s| s.realize(&model.geometry, &bases))
            .collect::<Result<_>>()?;
        // x^t for every whole sample, reused across epochs
        let cache: Option<Vec<Image>> = if whole {
            Some(
                data.train
                    .par_iter()
                    .map(|p| forward_realized(&prefix, rule, &p.y, &p.op, &p.y))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let mut flat = model.stages[t].to_flat();
        let mut adam = AdamState::new(flat.len());
        for epoch in 0..cfg.epochs_greedy {
            let mut rng = Seeded::new(cfg.seed)
                .derive(GREEDY_STREAM)
                .derive(t as u64)
                .derive(epoch as u64)
                .rng();
            let batches = if whole {
                // shuffle indices only; crops are the whole image
                let mut order: Vec<usize> = (0..data.train.len()).collect();
                order.shuffle(&mut rng);
                order
                    .chunks(cfg.batch_size)
                    .map(|c| c.iter().map(|&i| (i, None)).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            } else {
                make_batches(data.train, cfg.batch_size, cfg.patch_size, &mut rng)?
                    .into_iter()
                    .map(|b| b.into_iter().map(|p| (usize::MAX, Some(p))).collect())
                    .collect()
            };
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for batch in &batches {
                let stage = model.stages[t].realize(&model.geometry, &bases)?;
                let params = &model.stages[t];
                let results = batch
                    .par_iter()
                    .map(|(i, patch)| {
                        let (pair, x0) = match patch {
                            Some(p) => {
                                let x0 = forward_realized(&prefix, rule, &p.y, &p.op, &p.y)?;
                                (p, x0)
                            }
                            None => (
                                &data.train[*i],
                                cache.as_ref().expect("prefix cache")[*i].clone(),
                            ),
                        };
                        let (next, tape) = inference_step(&x0, &pair.y, &pair.op, &stage, rule)?;
                        let loss = cfg.loss.value(&next, &pair.gt, &cfg.ssim)?;
                        let e = cfg.loss.grad(&next, &pair.gt, &cfg.ssim)?;
                        let (g, _) =
                            stage_backward(&tape, params, &stage, &bases, &pair.op, &e, false)?;
                        Ok((loss, g.to_flat()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let n = results.len();
                let (loss_sum, mut grad) = ordered_sum(results, flat.len());
                grad.iter_mut().for_each(|g| *g /= n as f64);
                clip_global_norm(&mut grad, cfg.grad_clip);
                adam_step(&mut adam, &mut flat, &grad, &cfg.adam)?;
                set_stage_flat(model, t, &flat)?;
                epoch_loss += loss_sum;
                seen += n;
            }
            let (val_psnr, val_ssim) = validation_metrics(model, data.validation, cfg)?;
            observer.on_epoch(&EpochRecord {
                phase: Phase::Greedy,
                stage: Some(t),
                epoch: epoch + 1,
                mean_loss: epoch_loss / seen as f64,
                val_psnr,
                val_ssim,
                wall_secs: start.elapsed().as_secs_f64(),
            })?;
        }
        observer.on_checkpoint(&Checkpoint {
            model: model.clone(),
            phase: Phase::Greedy,
            completed: t + 1,
            adam: None,
        })?;
    }
    Ok(())
}

/// Joint fine-tuning of all stages for `epochs_joint` epochs.
pub fn train_joint(
    model: &mut SfarlModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    train_joint_from(model, data, cfg, 0, None, observer)
}

/// Joint fine-tuning resumed after `from_epoch` completed epochs with the
/// given optimizer state.
pub fn train_joint_from(
    model: &mut SfarlModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    from_epoch: usize,
    adam: Option<AdamState>,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate()?;
    check_data(data.train, cfg)?;
    model.validate()?;
    let bases = model.geometry.bases()?;
    let rule = model.feasible_rule;
    let stage_len = model.geometry.stage_len();
    let mut flat: Vec<f64> = model.stages.iter().flat_map(|s| s.to_flat()).collect();
    let mut adam = adam.unwrap_or_else(|| AdamState::new(flat.len()));
    if adam.len() != flat.len() {
        return Err(SfarlError::shape(
            format!("optimizer state for {} parameters", flat.len()),
            format!("{}", adam.len()),
        ));
    }
    let start = Instant::now();
    for epoch in from_epoch..cfg.epochs_joint {
        let mut rng = Seeded::new(cfg.seed)
            .derive(JOINT_STREAM)
            .derive(epoch as u64)
            .rng();
        let batches = make_batches(data.train, cfg.batch_size, cfg.patch_size, &mut rng)?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            let realized: Vec<RealizedStage> = model
                .stages
                .iter()
                .map(|s| s.realize(&model.geometry, &bases))
                .collect::<Result<_>>()?;
            let results = batch
                .par_iter()
                .map(|p| {
                    let run = run_realized(&realized, rule, &p.y, &p.op, None)?;
                    let loss = cfg.loss.value(run.output(), &p.gt, &cfg.ssim)?;
                    let e = cfg.loss.grad(run.output(), &p.gt, &cfg.ssim)?;
                    let grads = backprop_realized(&run.tapes, model, &realized, &bases, &p.op, &e)?;
                    Ok((loss, grads.iter().flat_map(StageGrads::to_flat).collect()))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = results.len();
            let (loss_sum, mut grad) = ordered_sum(results, flat.len());
            grad.iter_mut().for_each(|g| *g /= n as f64);
            clip_global_norm(&mut grad, cfg.grad_clip);
            adam_step(&mut adam, &mut flat, &grad, &cfg.joint_adam)?;
            for (t, chunk) in flat.chunks(stage_len).enumerate() {
                set_stage_flat(model, t, chunk)?;
            }
            epoch_loss += loss_sum;
            seen += n;
        }
        let (val_psnr, val_ssim) = validation_metrics(model, data.validation, cfg)?;
        observer.on_epoch(&EpochRecord {
            phase: Phase::Joint,
            stage: None,
            epoch: epoch + 1,
            mean_loss: epoch_loss / seen as f64,
            val_psnr,
            val_ssim,
            wall_secs: start.elapsed().as_secs_f64(),
        })?;
        let done = epoch + 1;
        if done % cfg.joint_checkpoint_every == 0 || done == cfg.epochs_joint {
            observer.on_checkpoint(&Checkpoint {
                model: model.clone(),
                phase: Phase::Joint,
                completed: done,
                adam: Some(adam.clone()),
            })?;
        }
    }
    Ok(())
}

/// Greedy training followed by joint fine-tuning, optionally resumed from a
/// checkpoint.
pub fn train(
    model: &mut SfarlModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    match resume {
        None => {
            train_greedy(model, data, cfg, observer)?;
            train_joint(model, data, cfg, observer)
        }
        Some(ck) => {
            if ck.model.geometry != model.geometry || ck.model.num_stages() != model.num_stages() {
                return Err(SfarlError::InvalidArgument(
                    "checkpoint geometry or stage count differs from the requested model".into(),
                ));
            }
            *model = ck.model;
            match ck.phase {
                Phase::Greedy => {
                    train_greedy_from(model, data, cfg, ck.completed, observer)?;
                    train_joint(model, data, cfg, observer)
                }
                Phase::Joint => train_joint_from(model, data, cfg, ck.completed, ck.adam, observer),
            }
        }
    }
}
