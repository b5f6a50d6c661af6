use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use derain_core::imageio::{load_png, save_png};
use derain_core::metrics::{psnr, ssim_index};
use derain_core::net::{Cascade, DerainModel, Depth, ModelConfig, WidthScale};
use derain_core::tensor::Tensor;
use derain_core::train::{toy_pair, Checkpoint, ToyDatasetSpec};

fn derain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derain")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `key=value` fields of a record line.
fn fields(line: &str) -> Vec<(String, String)> {
    line.split_whitespace()
        .filter_map(|t| t.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn field(line: &str, key: &str) -> String {
    fields(line)
        .into_iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        phi1_depth: Depth::L17,
        phi2_depth: Depth::L17,
        width: WidthScale::TINY,
        cascade: Cascade::Uncertainty,
        scales: 2,
    }
}

fn save_model(dir: &Path, model: DerainModel<f32>) -> PathBuf {
    let path = dir.join("model");
    Checkpoint {
        model,
        seed: 0,
        resume: None,
    }
    .save(&path)
    .unwrap();
    path
}

fn toy_clean(i: usize, size: usize) -> Tensor<f32> {
    let spec = ToyDatasetSpec {
        size,
        ..ToyDatasetSpec::default()
    };
    toy_pair(&spec, i).unwrap().1.cast()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(derain(&["--help"]).status.code(), Some(0));
    assert_eq!(derain(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(derain(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(derain(&["bench", "--strategies", "xx"]).status.code(), Some(1));
    assert_eq!(derain(&["bench", "--sizes", "30"]).status.code(), Some(1));
    assert_eq!(derain(&["eval", "--pred", "a"]).status.code(), Some(1));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nbatch = lots\n").unwrap();
    let o = derain(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_and_loss_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = derain(&["make-dataset", "--out", p(&data), "--count", "12", "--size", "32", "--val-fraction", "0.17"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.path().join("train.cfg");
    fs::write(
        &cfg,
        "# quick run\nbatch = 2\npatch = 32\nstage1_steps = 50\nstage2_steps = 50\nmodel.phi1_depth = 17\nrainmix.synth_layers = 4\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = derain(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let losses: Vec<&str> = text.lines().filter(|l| l.starts_with("stage=")).collect();
    assert_eq!(losses.len(), 100);
    for key in ["stage", "step", "loss", "lr", "wall_ms"] {
        field(losses[0], key);
    }
    assert_eq!(fs::read_to_string(out.join("loss.txt")).unwrap().lines().count(), 100);
    let eval = text.lines().find(|l| l.starts_with("eval ")).unwrap();
    field(eval, "gain_db").parse::<f64>().unwrap();
    for sub in ["stage1", "final"] {
        Checkpoint::load(&out.join(sub)).unwrap();
    }
    assert!(out.join("config.txt").is_file());

    // The final checkpoint resumes as a finished run.
    let o = derain(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--resume", p(&out.join("final"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn ablation_matrix_runs_eight_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(derain(&["make-dataset", "--out", p(&data), "--count", "6", "--size", "16", "--val-fraction", "0.34"])
        .status
        .success());
    let cfg = dir.path().join("abl.cfg");
    fs::write(
        &cfg,
        "batch = 1\npatch = 16\nstage1_steps = 2\nstage2_steps = 2\nmodel.phi1_depth = 17\nrainmix.synth_layers = 2\n",
    )
    .unwrap();
    let out = dir.path().join("abl");
    let o = derain(&["train", "--ablation", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("variant=")).map(String::from).collect();
    assert_eq!(rows.len(), 8);
    let mut names: Vec<String> = rows.iter().map(|r| field(r, "variant")).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 8);
    for name in &names {
        Checkpoint::load(&out.join(name).join("seed0").join("final")).unwrap();
    }
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.starts_with("variant"));
    assert_eq!(table.lines().filter(|l| l.starts_with("variant=")).count(), 8);
}

#[test]
fn derain_single_image_without_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path(), DerainModel::new(tiny_model(), 3).unwrap());
    let input = dir.path().join("rainy.png");
    save_png(&input, &toy_clean(0, 64)).unwrap();
    let out = dir.path().join("out");
    let o = derain(&["derain", "--model", p(&model), "--input", p(&input), "--output", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(field(lines[0], "name"), "rainy.png");
    assert_eq!(field(lines[0], "psnr"), "");
    assert!(field(lines[0], "ms").parse::<f64>().unwrap() > 0.0);
    assert_eq!(load_png(&out.join("rainy.png")).unwrap().shape(), &[1, 3, 64, 64]);
}

#[test]
fn derain_frames_in_order_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path(), DerainModel::new(tiny_model(), 4).unwrap());
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    for i in 0..10 {
        // Odd size exercises padding to a multiple of 16 and the crop back.
        let img = toy_clean(i, 40);
        save_png(&frames.join(format!("f{i}.png")), &img).unwrap();
    }
    let run = |out: &Path| {
        let o = derain(&["derain", "--model", p(&model), "--input", p(&frames), "--output", p(out), "--frames"]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let text = run(&a);
    run(&b);
    let order: Vec<(String, String)> = text.lines().map(|l| (field(l, "name"), field(l, "frame"))).collect();
    let expected: Vec<(String, String)> = (0..10).map(|i| (format!("f{i}.png"), i.to_string())).collect();
    assert_eq!(order, expected);
    for i in 0..10 {
        let name = format!("f{i}.png");
        assert_eq!(load_png(&a.join(&name)).unwrap().shape(), &[1, 3, 40, 40]);
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn identity_model_reproduces_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DerainModel::new(ModelConfig::final_design(WidthScale::TINY), 5).unwrap();
    m.force_identity_kernels();
    let model = save_model(dir.path(), m);
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    for i in 0..2 {
        save_png(&input.join(format!("{i}.png")), &toy_clean(i, 48)).unwrap();
    }
    let out = dir.path().join("out");
    let o = derain(&["derain", "--model", p(&model), "--input", p(&input), "--output", p(&out), "--gt", p(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..2 {
        let name = format!("{i}.png");
        assert_eq!(load_png(&out.join(&name)).unwrap(), load_png(&input.join(&name)).unwrap());
    }
    for line in stdout(&o).lines() {
        assert_eq!(field(line, "psnr"), "100");
        assert_eq!(field(line, "ssim"), "1");
    }
}

#[test]
fn derain_skips_undecodable_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path(), DerainModel::new(tiny_model(), 6).unwrap());
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    let out = dir.path().join("out");
    let args = ["derain", "--model", p(&model), "--input", p(&input), "--output", p(&out)];
    let o = derain(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    save_png(&input.join("ok.png"), &toy_clean(0, 32)).unwrap();
    let o = derain(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.png"));
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn non_finite_model_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DerainModel::new(tiny_model(), 7).unwrap();
    let id = m.store.find("phi1.head.bias").unwrap();
    m.store.value_mut(id).data_mut()[0] = f32::NAN;
    let model = save_model(dir.path(), m);
    let input = dir.path().join("x.png");
    save_png(&input, &toy_clean(0, 32)).unwrap();
    let o = derain(&["derain", "--model", p(&model), "--input", p(&input), "--output", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_reports_metrics_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, same, shifted) = (dir.path().join("gt"), dir.path().join("same"), dir.path().join("shifted"));
    for d in [&gt, &same, &shifted] {
        fs::create_dir(d).unwrap();
    }
    for i in 0..3 {
        // Values k/255 with k <= 200 so an offset of 25 levels never clips.
        let img = toy_clean(i, 32).map(|v| (v * 200.0).round() / 255.0);
        let name = format!("{i}.png");
        save_png(&gt.join(&name), &img).unwrap();
        save_png(&same.join(&name), &img).unwrap();
        save_png(&shifted.join(&name), &img.map(|v| v + 25.0 / 255.0)).unwrap();
    }
    let o = derain(&["eval", "--pred", p(&same), "--gt", p(&gt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mean = stdout(&o).lines().find(|l| l.starts_with("mean ")).unwrap().to_string();
    assert_eq!(field(&mean, "psnr"), "100");
    assert_eq!(field(&mean, "ssim"), "1");

    let o = derain(&["eval", "--pred", p(&shifted), "--gt", p(&gt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let expected = 20.0 * (255.0f64 / 25.0).log10();
    for line in text.lines().filter(|l| l.starts_with("name=")) {
        let name = field(line, "name");
        let (a, b) = (load_png(&shifted.join(&name)).unwrap(), load_png(&gt.join(&name)).unwrap());
        let reported: f64 = field(line, "psnr").parse().unwrap();
        assert!((reported - psnr(&a, &b).unwrap()).abs() <= 1e-9);
        assert!((reported - expected).abs() < 1e-4, "{reported} vs {expected}");
        let s: f64 = field(line, "ssim").parse().unwrap();
        assert!((s - ssim_index(&a, &b).unwrap()).abs() <= 1e-9);
    }

    fs::remove_file(gt.join("1.png")).unwrap();
    let o = derain(&["eval", "--pred", p(&same), "--gt", p(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("1.png"), "{}", stderr(&o));
}

#[test]
fn bench_records_match_the_mac_formula() {
    let o = derain(&[
        "bench", "--sizes", "32,16x48", "--scales", "1,4", "--runs", "1", "--warmup", "0", "--depth", "17",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("strategy=")).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let (h, w, s): (u64, u64, u64) = (
            field(r, "H").parse().unwrap(),
            field(r, "W").parse().unwrap(),
            field(r, "S").parse().unwrap(),
        );
        let expected = match field(r, "strategy").as_str() {
            "ws" => s * 9 * h * w * 3,
            _ => 3 * h * w * (1..=s).map(|k| (2 * k + 1).pow(2)).sum::<u64>(),
        };
        assert_eq!(field(r, "macs"), expected.to_string());
        assert_eq!(field(r, "counted_macs"), expected.to_string());
    }
    assert_eq!(text.lines().filter(|l| l.starts_with("check=ws_time_flat")).count(), 2);
}

#[test]
fn augment_preview_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = derain(&["augment-preview", "--seed", seed, "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b, c) = (run("7", "a"), run("7", "b"), run("8", "c"));
    for f in derain_cli::PREVIEW_FILES.iter().chain(&["path0.png", "path3.png"]) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("manifest.txt")).unwrap(), fs::read(c.join("manifest.txt")).unwrap());
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    let weights: f64 = manifest
        .lines()
        .filter(|l| l.starts_with("background.path"))
        .map(|l| field(l, "weight").parse::<f64>().unwrap())
        .sum();
    assert!((weights - 1.0).abs() < 1e-12);
    let sheet = load_png(&a.join("sheet.png")).unwrap();
    assert_eq!(sheet.shape()[2], 64);
}
