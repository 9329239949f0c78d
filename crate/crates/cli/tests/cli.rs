use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pclsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pclsr"))
        .args(args)
        .env_remove("PCLSR_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/train")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("config.json");
    let text = format!(
        r#"{{"lr_patch": 8, "batch_size": 2, "k_pos": 1, "k_neg": 1, "n_resblocks": 1, "n_channels": 8,
            "embed_base_channels": 4, "embed_layers": 4, "loss_layers": 2, "steps": 10,
            "train_dir": "{}"{extra}}}"#,
        fixture_dir().display()
    );
    std::fs::write(&p, text).unwrap();
    p
}

/// A Set5-shaped folder built from the fixture crops.
fn fake_set5(root: &Path) {
    let hr = root.join("Set5/HR");
    std::fs::create_dir_all(&hr).unwrap();
    let src = ["astronaut_a", "chelsea_a", "coffee_a", "hubble", "rocket"];
    for (name, from) in ["baby", "bird", "butterfly", "head", "woman"].iter().zip(src) {
        std::fs::copy(fixture_dir().join(format!("{from}.png")), hr.join(format!("{name}.png"))).unwrap();
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = pclsr(&["train", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let tmp = tempfile::tempdir().unwrap();
    let o = pclsr(&["train", "--config", "/nonexistent.json", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#", "alhpa": 0.3"#);
    let o = pclsr(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn toy_run_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let o = pclsr(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "3", "--override", "alpha=5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.snapshot.json", "log.csv", "final.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.snapshot.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["alpha"], 5.0);
    assert_eq!(manifest["seed"], 3);
    assert_eq!(std::fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 11);

    // refuses to clobber the run without --force
    let again = pclsr(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(again.status.code(), Some(2));

    let data = tmp.path().join("data");
    fake_set5(&data);
    let eval = |out: &str, force: bool| {
        let mut args = vec![
            "eval",
            "--checkpoint",
            s(&run.join("final.bin")).to_owned().leak(),
            "--dataset",
            "set5",
            "--data-root",
            s(&data).to_owned().leak(),
            "--out",
            s(&tmp.path().join(out)).to_owned().leak(),
        ];
        if force {
            args.push("--force");
        }
        pclsr(&args)
    };
    let first = eval("eval", false);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let line = stdout(&first);
    assert!(line.starts_with("PSNR=") && line.contains(" SSIM="), "{line}");
    let psnr: f64 = line.trim().split(' ').next().unwrap()[5..].parse().unwrap();
    assert!(psnr.is_finite());
    let csv1 = std::fs::read(tmp.path().join("eval/report.csv")).unwrap();
    assert_eq!(eval("eval", false).status.code(), Some(2));
    assert_eq!(eval("eval", true).status.code(), Some(0));
    assert_eq!(std::fs::read(tmp.path().join("eval/report.csv")).unwrap(), csv1);

    // checkpoint from a future schema
    let mut bytes = std::fs::read(run.join("final.bin")).unwrap();
    bytes[8] = 9;
    let future = tmp.path().join("future.bin");
    std::fs::write(&future, bytes).unwrap();
    let o = pclsr(&[
        "eval",
        "--checkpoint",
        s(&future),
        "--dataset",
        "set5",
        "--data-root",
        s(&data),
        "--out",
        s(&tmp.path().join("e2")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn divergence_aborts_with_numeric_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#", "learning_rate": 1e300"#);
    let run = tmp.path().join("run");
    let o = pclsr(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("abort_dump.json").exists());
}

#[test]
fn baseline_reports_and_caps_constant_images() {
    let tmp = tempfile::tempdir().unwrap();
    let flat = tmp.path().join("flat");
    std::fs::create_dir_all(&flat).unwrap();
    let img = pclsr::Image::from_elem((32, 32, 3), 0.4);
    for i in 0..2 {
        pclsr::datapipe::save_png(&flat.join(format!("{i}.png")), &img).unwrap();
    }
    let out = tmp.path().join("report");
    let o = pclsr(&["baseline", "--dataset", s(&flat), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "PSNR=100.0000 SSIM=1.0000");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("0,100.000000,1.000000"));

    let o = pclsr(&["baseline", "--dataset", "set14", "--data-root", s(tmp.path()), "--out", s(&out), "--force"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn baseline_matches_an_external_bicubic_upscaler() {
    // evaluating any upscaler that happens to be bicubic reproduces the baseline report
    let tmp = tempfile::tempdir().unwrap();
    fake_set5(tmp.path());
    let out = tmp.path().join("b");
    let o = pclsr(&["baseline", "--dataset", "set5", "--data-root", s(tmp.path()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let ds = pclsr::datapipe::load_benchmark(tmp.path(), &pclsr::datapipe::Benchmark::Set5, 4).unwrap();
    let stub = pclsr::metrics::evaluate_dataset(&ds, 4, pclsr::metrics::Quantize::Off, |lr| {
        pclsr::datapipe::bicubic_upscale(lr, 4)
    })
    .unwrap();
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), stub.to_csv());
}

#[test]
fn degrade_materializes_lr_folder() {
    let tmp = tempfile::tempdir().unwrap();
    fake_set5(tmp.path());
    let o = pclsr(&["degrade", "--dataset", "set5", "--data-root", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(0));
    let lr = tmp.path().join("Set5/LR_x4");
    assert_eq!(std::fs::read_dir(&lr).unwrap().count(), 5);
    let img = pclsr::datapipe::load_png(&lr.join("baby.png")).unwrap();
    assert_eq!(img.dim(), (24, 24, 3));
    assert_ne!(pclsr(&["degrade", "--dataset", "set5", "--data-root", s(tmp.path())]).status.code(), Some(0));
}

#[test]
fn augment_preview_writes_samples_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("aug");
    let input = fixture_dir().join("coffee_a.png");
    let o = pclsr(&["augment-preview", "--input", s(&input), "--out", s(&out), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["positives"].as_array().unwrap().len(), 5);
    assert_eq!(m["negatives"].as_array().unwrap().len(), 4);
    assert!(m["positives"][0]["kernel"].is_null());
    assert_eq!(m["negatives"][0]["kernel"]["kind"], "gaussian_blur");
    assert_eq!(m["positives"][1]["kernel"]["kind"], "unsharp");
    for f in ["positives_0.png", "positives_4.png", "negatives_3.png"] {
        assert!(out.join(f).exists());
    }
    let again = tmp.path().join("aug2");
    pclsr(&["augment-preview", "--input", s(&input), "--out", s(&again), "--seed", "7"]);
    assert_eq!(
        std::fs::read(out.join("negatives_2.png")).unwrap(),
        std::fs::read(again.join("negatives_2.png")).unwrap()
    );
}

#[test]
fn wavelet_writes_subbands_with_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("w");
    let o = pclsr(&["wavelet", "--input", s(&fixture_dir().join("hubble.png")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let side: Vec<pclsr_cli::SubbandScaling> =
        serde_json::from_str(&std::fs::read_to_string(out.join("subbands.json")).unwrap()).unwrap();
    assert_eq!(side.iter().map(|b| b.file.as_str()).collect::<Vec<_>>(), ["LL.png", "LH.png", "HL.png", "HH.png"]);
    for b in &side {
        assert!(b.max >= b.min);
        assert!((b.scale * (b.max - b.min) - 255.0).abs() < 1e-9);
        let img = pclsr::datapipe::load_png(&out.join(&b.file)).unwrap();
        assert_eq!(img.dim(), (48, 48, 3));
    }
    // LL of a [0,1] image spans at most [0, 2]
    assert!(side[0].min >= 0.0 && side[0].max <= 2.0);
}
