use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfarl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfarl"))
        .args(args)
        .env_remove("SFARL_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> String {
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_denoise(dir: &Path, seed: &str) {
    ok(sfarl(&[
        "synth",
        "--task",
        "denoise",
        "--out",
        s(dir),
        "--scenes",
        "5",
        "--scene-size",
        "16",
        "--held-out",
        "2",
        "--seed",
        seed,
    ]));
}

fn train_small(manifest: &Path, model: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--manifest",
        s(manifest),
        "--model",
        s(model),
        "--stages",
        "2",
        "--epochs-greedy",
        "2",
        "--epochs-joint",
        "2",
        "--batch",
        "2",
        "--patch",
        "12",
        "--filter-size",
        "3",
        "--rbf",
        "15",
        "--lr",
        "0.01",
        "--seed",
        "4",
    ];
    args.extend_from_slice(extra);
    ok(sfarl(&args))
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_denoise(&data, "1");
    let manifest = data.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 6, "header plus five samples");
    assert!(data.join("y_0000_00.png").exists());
    assert!(data.join("gt_0004.png").exists());

    let model = dir.path().join("m.sfrl");
    let log = dir.path().join("train.jsonl");
    train_small(&manifest, &model, &["--log", s(&log)]);
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(
        log_text.lines().count(),
        1 + 2 * 2 + 2,
        "header, greedy, joint"
    );
    for line in log_text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    let last: serde_json::Value = serde_json::from_str(log_text.lines().last().unwrap()).unwrap();
    assert_eq!(last["phase"], "joint");
    assert!(last["val_psnr"].is_f64());

    let restored = dir.path().join("r.png");
    ok(sfarl(&[
        "infer",
        "--model",
        s(&model),
        "--input",
        s(&data.join("y_0004_00.png")),
        "--output",
        s(&restored),
        "--emit-intermediates",
    ]));
    assert!(restored.exists());
    assert!(dir.path().join("r.stage01.png").exists());
    assert_eq!(
        fs::read(dir.path().join("r.stage02.png")).unwrap(),
        fs::read(&restored).unwrap()
    );

    let report = dir.path().join("report.json");
    let table = ok(sfarl(&[
        "eval",
        "--restored",
        s(&restored),
        "--ground-truth",
        s(&data.join("gt_0004.png")),
        "--report",
        s(&report),
    ]));
    assert!(table.contains("psnr_db"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["mean_ssim"].as_f64().unwrap() <= 1.0);

    let table = ok(sfarl(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
    ]));
    assert_eq!(
        table.lines().count(),
        1 + 2 + 1,
        "header, two held-out rows, mean"
    );
}

#[test]
fn identical_images_report_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    synth_denoise(dir.path(), "2");
    let gt = dir.path().join("gt_0000.png");
    let out = ok(sfarl(&[
        "eval",
        "--restored",
        s(&gt),
        "--ground-truth",
        s(&gt),
    ]));
    let mean = out.lines().last().unwrap();
    assert!(mean.contains("inf") && mean.contains("1.0000"), "{mean}");
}

#[test]
fn directory_eval_pairs_by_name_and_rejects_unpaired_files() {
    let dir = tempfile::tempdir().unwrap();
    synth_denoise(dir.path(), "2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    for name in ["gt_0000.png", "gt_0001.png"] {
        fs::copy(dir.path().join(name), a.join(name)).unwrap();
        fs::copy(dir.path().join(name), b.join(name)).unwrap();
    }
    let out = ok(sfarl(&[
        "eval",
        "--restored",
        s(&a),
        "--ground-truth",
        s(&b),
    ]));
    assert_eq!(out.lines().count(), 4);
    fs::copy(dir.path().join("gt_0002.png"), a.join("extra.png")).unwrap();
    let out = sfarl(&["eval", "--restored", s(&a), "--ground-truth", s(&b)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_denoise(&data, "3");
    let again = dir.path().join("again");
    synth_denoise(&again, "3");
    for name in ["y_0000_00.png", "gt_0003.png", "manifest.jsonl"] {
        assert_eq!(
            fs::read(data.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap()
        );
    }
    let manifest = data.join("manifest.jsonl");
    let ck = dir.path().join("ck");
    let m1 = dir.path().join("m1.sfrl");
    train_small(
        &manifest,
        &m1,
        &[
            "--checkpoint-dir",
            s(&ck),
            "--checkpoint-every",
            "1",
            "--threads",
            "1",
        ],
    );
    let m2 = dir.path().join("m2.sfrl");
    train_small(&manifest, &m2, &["--threads", "2"]);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    for stem in ["greedy-01", "joint-0001"] {
        let resumed = dir.path().join(format!("{stem}.sfrl"));
        let from = ck.join(format!("{stem}.sfrl"));
        assert!(from.exists(), "{stem}");
        train_small(&manifest, &resumed, &["--resume", s(&from)]);
        assert_eq!(
            fs::read(&resumed).unwrap(),
            fs::read(&m1).unwrap(),
            "{stem}"
        );
    }
}

#[test]
fn deconvolution_needs_a_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(sfarl(&[
        "synth",
        "--task",
        "deconv",
        "--out",
        s(&data),
        "--scenes",
        "3",
        "--scene-size",
        "20",
        "--seed",
        "5",
    ]));
    assert!(data.join("k_0000_00.txt").exists());
    let model = dir.path().join("m.sfrl");
    ok(sfarl(&[
        "train",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--model",
        s(&model),
        "--stages",
        "1",
        "--epochs-greedy",
        "1",
        "--epochs-joint",
        "0",
        "--patch",
        "16",
        "--filter-size",
        "3",
        "--rbf",
        "9",
    ]));
    let y = data.join("y_0000_00.png");
    let out_path = dir.path().join("r.png");
    let out = sfarl(&[
        "infer",
        "--model",
        s(&model),
        "--input",
        s(&y),
        "--output",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--kernel"));
    ok(sfarl(&[
        "infer",
        "--model",
        s(&model),
        "--input",
        s(&y),
        "--output",
        s(&out_path),
        "--kernel",
        s(&data.join("k_0000_00.txt")),
    ]));
}

#[test]
fn color_images_are_restored_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_denoise(&data, "6");
    let model = dir.path().join("m.sfrl");
    train_small(&data.join("manifest.jsonl"), &model, &[]);
    // a color PPM, written by hand
    let (w, h) = (9usize, 7usize);
    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..w * h * 3 {
        ppm.push((i * 37 % 251) as u8);
    }
    let input = dir.path().join("c.ppm");
    fs::write(&input, ppm).unwrap();
    let output = dir.path().join("c_out.ppm");
    ok(sfarl(&[
        "infer",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--output",
        s(&output),
    ]));
    let written = fs::read(&output).unwrap();
    assert!(written.starts_with(b"P6"));
}

#[test]
fn exit_codes_distinguish_usage_data_and_verification_failures() {
    assert_eq!(code(&sfarl(&["train", "--bogus"])), 1);
    assert_eq!(code(&sfarl(&[])), 1);
    assert_eq!(code(&sfarl(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.sfrl");
    let out = sfarl(&[
        "infer",
        "--model",
        s(&missing),
        "--input",
        s(&missing),
        "--output",
        s(&missing),
    ]);
    assert_eq!(code(&out), 2);
    let bad = dir.path().join("bad.sfrl");
    fs::write(&bad, b"not a model").unwrap();
    let out = sfarl(&[
        "infer",
        "--model",
        s(&bad),
        "--input",
        s(&bad),
        "--output",
        s(&missing),
    ]);
    assert_eq!(code(&out), 2);

    let out = ok(sfarl(&["gradcheck", "--seeds", "1"]));
    assert!(out.lines().any(|l| l.starts_with("PASS")));
    assert!(!out.lines().any(|l| l.starts_with("FAIL")));
    let out = sfarl(&["gradcheck", "--seeds", "1", "--perturb", "reg_weights"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("reg_weights"));
}

#[test]
fn task_flag_must_match_the_model_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_denoise(&data, "7");
    let manifest = data.join("manifest.jsonl");
    let model = dir.path().join("m.sfrl");
    let out = sfarl(&[
        "train",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--task",
        "rain",
    ]);
    assert_eq!(code(&out), 2);
    train_small(&manifest, &model, &["--task", "denoise"]);
    let y = data.join("y_0000_00.png");
    let r = dir.path().join("r.png");
    let out = sfarl(&[
        "infer",
        "--model",
        s(&model),
        "--input",
        s(&y),
        "--output",
        s(&r),
        "--task",
        "rain",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Denoise"));
    ok(sfarl(&[
        "infer",
        "--model",
        s(&model),
        "--input",
        s(&y),
        "--output",
        s(&r),
        "--task",
        "denoise",
    ]));
}

#[test]
fn zero_weight_model_returns_its_input() {
    use sfarl_core::model::{serialize_model, ModelGeometry, SfarlModel, StageParams, Task};
    let dir = tempfile::tempdir().unwrap();
    synth_denoise(dir.path(), "8");
    let geometry = ModelGeometry::full_bank(3, 9, 1.0).unwrap();
    let mut stage = StageParams::zeros(&geometry);
    for c in stage
        .fid_coeffs
        .iter_mut()
        .chain(stage.reg_coeffs.iter_mut())
    {
        c[0] = 1.0;
    }
    let model = SfarlModel::new(Task::Denoise, geometry, vec![stage; 2]).unwrap();
    let path = dir.path().join("zero.sfrl");
    fs::write(&path, serialize_model(&model).unwrap()).unwrap();
    let y = dir.path().join("y_0001_00.png");
    let r = dir.path().join("r.png");
    ok(sfarl(&[
        "infer",
        "--model",
        s(&path),
        "--input",
        s(&y),
        "--output",
        s(&r),
    ]));
    let out = ok(sfarl(&[
        "eval",
        "--restored",
        s(&r),
        "--ground-truth",
        s(&y),
    ]));
    assert!(out.lines().last().unwrap().contains("inf"), "{out}");
}

#[test]
fn constant_offset_of_a_tenth_scores_twenty_decibels() {
    let dir = tempfile::tempdir().unwrap();
    // 16-bit PGMs at 0 and 6554/65535 = 0.100008 (PSNR 19.9993 dB)
    let write = |name: &str, v: u16| {
        let mut pgm = b"P5\n8 8\n65535\n".to_vec();
        for _ in 0..64 {
            pgm.extend_from_slice(&v.to_be_bytes());
        }
        let p = dir.path().join(name);
        fs::write(&p, pgm).unwrap();
        p
    };
    let a = write("a.pgm", 0);
    let b = write("b.pgm", 6554);
    let out = ok(sfarl(&[
        "eval",
        "--restored",
        s(&a),
        "--ground-truth",
        s(&b),
    ]));
    assert!(out.lines().last().unwrap().contains("20.00"), "{out}");
}
