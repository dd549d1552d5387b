use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sfarl_core::autograd::{run_gradcheck, GradBlock, GradcheckConfig};
use sfarl_core::degradation::{synth_dataset, synth_scene, DatasetSpec, DegradationOp};
use sfarl_core::io::{
    manifest_base, read_channels, read_kernel_text, write_channels, write_gray, write_kernel_text,
    Manifest, ManifestEntry,
};
use sfarl_core::loss::{psnr, ssim, SsimConfig};
use sfarl_core::model::{deserialize_model, run_inference, serialize_model, ModelGeometry, Task};
use sfarl_core::rng::Seeded;
use sfarl_core::trainer::{
    init_model, load_checkpoint, save_checkpoint, train, AdamConfig, Checkpoint, EpochRecord,
    TrainConfig, TrainData, TrainObserver,
};
use sfarl_core::{Image, Result, SfarlError};

use crate::{
    Cli, CliError, Command, EvalArgs, GradcheckArgs, InferArgs, SynthArgs, TaskArg, TrainArgs,
};

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> SfarlError {
    SfarlError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Luma of a color image, or the single channel of a gray one.
fn to_gray(channels: Vec<Image>) -> Image {
    if channels.len() == 1 {
        return channels.into_iter().next().expect("one channel");
    }
    let (r, g, b) = (&channels[0], &channels[1], &channels[2]);
    r.zip_map(g, |r, g| 0.299 * r + 0.587 * g)
        .zip_map(b, |rg, b| rg + 0.114 * b)
}

fn synth(a: SynthArgs) -> std::result::Result<(), CliError> {
    let kind = a.task.dataset_kind();
    let clean: Vec<Image> = match &a.clean {
        Some(dir) => {
            let files = image_files(dir)?;
            if files.is_empty() {
                return Err(CliError::Data(SfarlError::InvalidArgument(format!(
                    "no images in {}",
                    dir.display()
                ))));
            }
            files
                .iter()
                .map(|p| read_channels(p).map(to_gray))
                .collect::<Result<_>>()?
        }
        None => {
            let root = Seeded::new(a.seed).derive(0x7363_656e);
            (0..a.scenes)
                .map(|i| synth_scene(a.scene_size, a.scene_size, root.derive(i as u64).seed()))
                .collect::<Result<_>>()?
        }
    };
    if a.held_out >= clean.len() {
        return Err(CliError::Usage(format!(
            "--held-out {} leaves no training images out of {}",
            a.held_out,
            clean.len()
        )));
    }
    let mut spec = DatasetSpec::new(kind, a.seed);
    if let Some(v) = a.variants {
        spec.variants = v;
    }
    if let Some(s) = a.sigma {
        spec.sigma = s;
    }
    if let Some(s) = a.severity {
        spec.severity = s;
    }
    let kernel = a.kernel.as_deref().map(read_kernel_text).transpose()?;
    let samples = synth_dataset(&clean, &spec, kernel.as_ref())?;

    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let config = serde_json::json!({
        "spec": spec,
        "clean_source": a.clean.as_ref().map(|p| p.display().to_string()),
        "scenes": if a.clean.is_none() { Some(a.scenes) } else { None },
        "scene_size": a.scene_size,
        "held_out_images": a.held_out,
    });
    let mut manifest = Manifest::new(kind.task(), a.seed, config);
    let first_held_out = clean.len() - a.held_out;
    for (i, x) in clean.iter().enumerate() {
        let gt_name = format!("gt_{i:04}.png");
        write_gray(&a.out.join(&gt_name), x)?;
        for v in 0..spec.variants {
            let sample = &samples[i * spec.variants + v];
            let y_name = format!("y_{i:04}_{v:02}.png");
            write_gray(&a.out.join(&y_name), &sample.degraded)?;
            let kernel = match &sample.op {
                DegradationOp::Blur(k) => {
                    let name = format!("k_{i:04}_{v:02}.txt");
                    write_kernel_text(&a.out.join(&name), k)?;
                    Some(name)
                }
                DegradationOp::Identity => None,
            };
            manifest.entries.push(ManifestEntry {
                degraded: y_name,
                ground_truth: gt_name.clone(),
                kernel,
                meta: Some(sample.meta.clone()),
                held_out: i >= first_held_out,
            });
        }
    }
    let path = a.out.join("manifest.jsonl");
    manifest.write(&path)?;
    println!(
        "wrote {} samples ({} held out) to {}",
        manifest.entries.len(),
        manifest.entries.iter().filter(|e| e.held_out).count(),
        path.display()
    );
    Ok(())
}

/// Writes the JSON-lines log and checkpoints, and reports progress.
struct CliObserver {
    log: BufWriter<File>,
    log_path: PathBuf,
    checkpoint_dir: Option<PathBuf>,
}

impl TrainObserver for CliObserver {
    fn on_epoch(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.log, "{line}").map_err(|e| io_error(&self.log_path, e))?;
        self.log.flush().map_err(|e| io_error(&self.log_path, e))?;
        let stage = r
            .stage
            .map(|s| format!(" stage {}", s + 1))
            .unwrap_or_default();
        let val = match (r.val_psnr, r.val_ssim) {
            (Some(p), Some(s)) => format!(" val psnr {p:.2} ssim {s:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "{:?}{stage} epoch {} loss {:.6}{val} ({:.1}s)",
            r.phase, r.epoch, r.mean_loss, r.wall_secs
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("{}.sfrl", ck.stem()));
            save_checkpoint(&path, ck)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LogHeader<'a> {
    producer: String,
    seed: u64,
    task: Task,
    stages: usize,
    manifest: String,
    config: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs) -> std::result::Result<(), CliError> {
    let manifest = Manifest::read(&a.manifest)?;
    let base = manifest_base(&a.manifest);
    let train_pairs = manifest.load_pairs(&base, false)?;
    let validation = manifest.load_pairs(&base, true)?;
    if train_pairs.is_empty() {
        return Err(CliError::Data(SfarlError::InvalidArgument(
            "manifest has no training samples".into(),
        )));
    }
    let task = manifest.header.task;
    check_task(a.task, task, "manifest")?;
    let stages = a.stages.unwrap_or_else(|| task.default_stages());
    if stages == 0 {
        return Err(CliError::Usage("--stages must be at least 1".into()));
    }
    let geometry = ModelGeometry::full_bank(a.filter_size, a.rbf, 1.0)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut model = init_model(&geometry, task, stages)?;
    let cfg = TrainConfig {
        loss: a.loss.into(),
        epochs_greedy: a.epochs_greedy,
        epochs_joint: a.epochs_joint,
        batch_size: a.batch,
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        joint_adam: AdamConfig {
            learning_rate: a.joint_lr,
            ..AdamConfig::default()
        },
        patch_size: a.patch,
        seed: a.seed,
        joint_checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let resume = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.task != task
                || ck.model.geometry != geometry
                || ck.model.num_stages() != stages
            {
                return Err(CliError::Data(SfarlError::InvalidArgument(format!(
                    "checkpoint {} does not match the requested task, geometry or stage count",
                    p.display()
                ))));
            }
            Some(ck)
        }
        None => None,
    };
    if let Some(dir) = &a.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.model.with_extension("log.jsonl"));
    let file = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut observer = CliObserver {
        log: BufWriter::new(file),
        log_path: log_path.clone(),
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    let header = LogHeader {
        producer: format!("sfarl {}", env!("CARGO_PKG_VERSION")),
        seed: a.seed,
        task,
        stages,
        manifest: a.manifest.display().to_string(),
        config: &cfg,
    };
    writeln!(
        observer.log,
        "{}",
        serde_json::to_string(&header).map_err(SfarlError::from)?
    )
    .map_err(|e| io_error(&log_path, e))?;

    let data = TrainData {
        train: &train_pairs,
        validation: &validation,
    };
    train(&mut model, &data, &cfg, resume, &mut observer)?;
    write_file(&a.model, &serialize_model(&model)?)?;
    println!("wrote {}", a.model.display());
    Ok(())
}

fn check_task(
    expected: Option<TaskArg>,
    actual: Task,
    source: &str,
) -> std::result::Result<(), CliError> {
    match expected {
        Some(e) if e.dataset_kind().task() != actual => {
            Err(CliError::Data(SfarlError::InvalidArgument(format!(
                "--task {e:?} does not match the {source}, which is for {actual:?}"
            ))))
        }
        _ => Ok(()),
    }
}

fn intermediate_path(output: &Path, t: usize) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = output.extension().and_then(|s| s.to_str()).unwrap_or("png");
    output.with_file_name(format!("{stem}.stage{:02}.{ext}", t + 1))
}

fn infer(a: InferArgs) -> std::result::Result<(), CliError> {
    let bytes = fs::read(&a.model).map_err(|e| io_error(&a.model, e))?;
    let model = deserialize_model(&bytes)?;
    check_task(a.task, model.task, "model")?;
    let op = match (model.task, &a.kernel) {
        (Task::Deconv, Some(k)) => DegradationOp::blur(read_kernel_text(k)?),
        (Task::Deconv, None) => {
            return Err(CliError::Usage(
                "this deconvolution model needs --kernel".into(),
            ))
        }
        (task, Some(_)) => {
            return Err(CliError::Usage(format!(
                "--kernel given but the model was trained for {task:?}"
            )))
        }
        (_, None) => DegradationOp::Identity,
    };
    let channels = read_channels(&a.input)?;
    let runs = channels
        .iter()
        .map(|y| run_inference(&model, y, &op, None))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<Image> = runs.iter().map(|r| r.output().clone()).collect();
    write_channels(&a.output, &finals)?;
    if a.emit_intermediates {
        for t in 0..model.num_stages() {
            let stage: Vec<Image> = runs.iter().map(|r| r.states[t].clone()).collect();
            write_channels(&intermediate_path(&a.output, t), &stage)?;
        }
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    name: String,
    /// `None` when the images are identical (infinite PSNR).
    psnr: Option<f64>,
    ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_ssim: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    producer: String,
    rows: Vec<EvalRow>,
    mean_psnr: Option<f64>,
    mean_ssim: f64,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn fmt_psnr(v: Option<f64>) -> String {
    v.map_or_else(|| "inf".to_string(), |p| format!("{p:.2}"))
}

fn eval(a: EvalArgs) -> std::result::Result<(), CliError> {
    let cfg = SsimConfig::default();
    let mut rows = Vec::new();
    match (&a.restored, &a.ground_truth, &a.manifest, &a.model) {
        (Some(r), Some(g), None, None) => {
            let pairs: Vec<(String, PathBuf, PathBuf)> = if r.is_dir() {
                if !g.is_dir() {
                    return Err(CliError::Usage(
                        "--restored and --ground-truth must both be files or both directories"
                            .into(),
                    ));
                }
                let mut pairs = Vec::new();
                for f in image_files(r)? {
                    let name = f.file_name().expect("file name").to_owned();
                    let other = g.join(&name);
                    if !other.exists() {
                        return Err(CliError::Data(SfarlError::InvalidArgument(format!(
                            "no ground truth for {}",
                            f.display()
                        ))));
                    }
                    pairs.push((name.to_string_lossy().into_owned(), f, other));
                }
                for f in image_files(g)? {
                    if !r.join(f.file_name().expect("file name")).exists() {
                        return Err(CliError::Data(SfarlError::InvalidArgument(format!(
                            "no restored image for {}",
                            f.display()
                        ))));
                    }
                }
                pairs
            } else {
                vec![(r.display().to_string(), r.clone(), g.clone())]
            };
            for (name, rp, gp) in pairs {
                let rc = read_channels(&rp)?;
                let gc = read_channels(&gp)?;
                if rc.len() != gc.len() {
                    return Err(CliError::Data(SfarlError::InvalidArgument(format!(
                        "{name}: channel counts differ"
                    ))));
                }
                rows.push(score(&name, &rc, &gc, None, &cfg)?);
            }
        }
        (None, None, Some(m), Some(model_path)) => {
            let manifest = Manifest::read(m)?;
            let base = manifest_base(m);
            let bytes = fs::read(model_path).map_err(|e| io_error(model_path, e))?;
            let model = deserialize_model(&bytes)?;
            if model.task != manifest.header.task {
                return Err(CliError::Data(SfarlError::InvalidArgument(format!(
                    "model task {:?} does not match manifest task {:?}",
                    model.task, manifest.header.task
                ))));
            }
            let held_out = manifest.entries.iter().any(|e| e.held_out);
            let names: Vec<&str> = manifest
                .entries
                .iter()
                .filter(|e| e.held_out == held_out)
                .map(|e| e.degraded.as_str())
                .collect();
            let pairs = manifest.load_pairs(&base, held_out)?;
            for (name, p) in names.iter().zip(&pairs) {
                let out = run_inference(&model, &p.y, &p.op, None)?;
                rows.push(score(
                    name,
                    std::slice::from_ref(out.output()),
                    std::slice::from_ref(&p.gt),
                    Some(&p.y),
                    &cfg,
                )?);
            }
        }
        _ => {
            return Err(CliError::Usage(
                "give either --restored and --ground-truth, or --manifest and --model".into(),
            ))
        }
    }
    if rows.is_empty() {
        return Err(CliError::Data(SfarlError::InvalidArgument(
            "nothing to evaluate".into(),
        )));
    }
    let n = rows.len() as f64;
    let mean_psnr = if rows.iter().all(|r| r.psnr.is_some()) {
        Some(rows.iter().filter_map(|r| r.psnr).sum::<f64>() / n)
    } else {
        None
    };
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    println!("{:<32} {:>9} {:>8}", "image", "psnr_db", "ssim");
    for r in &rows {
        println!("{:<32} {:>9} {:>8.4}", r.name, fmt_psnr(r.psnr), r.ssim);
    }
    println!(
        "{:<32} {:>9} {:>8.4}",
        "mean",
        fmt_psnr(mean_psnr),
        mean_ssim
    );
    if let Some(path) = &a.report {
        let report = EvalReport {
            producer: format!("sfarl {}", env!("CARGO_PKG_VERSION")),
            rows,
            mean_psnr,
            mean_ssim,
        };
        let text = serde_json::to_string_pretty(&report).map_err(SfarlError::from)?;
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

/// Channel-averaged PSNR and SSIM.
fn score(
    name: &str,
    restored: &[Image],
    truth: &[Image],
    input: Option<&Image>,
    cfg: &SsimConfig,
) -> Result<EvalRow> {
    let c = restored.len() as f64;
    let mut p = 0.0;
    let mut s = 0.0;
    for (r, g) in restored.iter().zip(truth) {
        p += psnr(r, g)?;
        s += ssim(r, g, cfg)?;
    }
    let (input_psnr, input_ssim) = match input {
        Some(y) => (finite(psnr(y, &truth[0])?), Some(ssim(y, &truth[0], cfg)?)),
        None => (None, None),
    };
    Ok(EvalRow {
        name: name.to_string(),
        psnr: finite(p / c),
        ssim: s / c,
        input_psnr,
        input_ssim,
    })
}

fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), CliError> {
    let perturb = match a.perturb.as_deref() {
        None => None,
        Some(name) => Some(
            GradBlock::ALL
                .into_iter()
                .find(|b| b.name() == name)
                .ok_or_else(|| CliError::Usage(format!("unknown gradient block {name:?}")))?,
        ),
    };
    let cfg = GradcheckConfig {
        seeds: (0..a.seeds).collect(),
        tolerance: a.tolerance,
        perturb,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    for row in &report.rows {
        println!("{row}");
    }
    for block in GradBlock::ALL {
        println!("worst {block}: {:.3e}", report.worst(block));
    }
    let failed: Vec<String> = report
        .failures()
        .map(|r| r.block.name().to_string())
        .collect();
    if failed.is_empty() {
        println!(
            "all {} checks passed at {:.0e}",
            report.rows.len(),
            cfg.tolerance
        );
        Ok(())
    } else {
        let mut blocks = failed.clone();
        blocks.sort();
        blocks.dedup();
        Err(CliError::Verify(format!(
            "{} of {} checks failed; blocks: {}",
            failed.len(),
            report.rows.len(),
            blocks.join(", ")
        )))
    }
}
