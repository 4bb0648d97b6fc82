use std::fs;
use std::path::Path;

use udma::cli::run;

fn udma(args: &[&str]) -> i32 {
    let mut argv = vec!["udma"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# small run\nrange_width = 128\nrange_height = 16\nfov_up_deg = 10\nfov_down_deg = 20\n\
             range_scale = 20\nfeature_dim = 4\nknn = 2\ndisc_hidden = 8\ntrain_steps = 3\nfine_tune_steps = 2\n\
             lr_generator = 0.01\nsource_dir = {0}\ntarget_dir = {0}\n",
            s(data)
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(udma(&["--help"]), 0);
    assert_eq!(udma(&["bogus"]), 1);
    assert_eq!(udma(&["viz"]), 1);
    assert_eq!(udma(&["eval"]), 1);
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    assert_eq!(udma(&["preseg", "--scan", s(&dir.path().join("none.bin")), "--out", s(&out)]), 1);
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(udma(&["synth", "--out", s(dir.path()), "--config", s(&bad)]), 1);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = small_config(dir.path(), &data);
    assert_eq!(udma(&["synth", "--out", s(&data), "--count", "2", "--source", "--config", s(&cfg)]), 0);
    let scan = data.join("scan_0000.bin");
    for f in ["scan_0000.bin", "scan_0000.label", "scan_0001.bin", "source_0000.img", "source_0000.label"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let comp = dir.path().join("comp.json");
    assert_eq!(udma(&["preseg", "--scan", s(&scan), "--out", s(&comp), "--config", s(&cfg)]), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&comp).unwrap()).unwrap();
    assert!(json["component_id"].as_array().unwrap().len() > 100);

    let rimg = dir.path().join("scan.rimg");
    let pgm = dir.path().join("scan.pgm");
    assert_eq!(
        udma(&["project", "--scan", s(&scan), "--components", s(&comp), "--out", s(&rimg), "--png", s(&pgm), "--config", s(&cfg)]),
        0
    );
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n128 16\n255\n"));
    let viz = dir.path().join("comp.pgm");
    assert_eq!(udma(&["viz", "--image", s(&rimg), "--out", s(&viz), "--channel", "component"]), 0);
    assert_eq!(fs::read(&viz).unwrap().len(), "P5\n128 16\n255\n".len() + 128 * 16);

    let label = data.join("scan_0000.label");
    assert_eq!(udma(&["eval", "--truth", s(&label), "--pred", s(&label), "--json"]), 0);

    let ckpt = dir.path().join("model.ckpt");
    let metrics = dir.path().join("metrics.jsonl");
    assert_eq!(udma(&["train", "--config", s(&cfg), "--out", s(&ckpt), "--metrics", s(&metrics)]), 0);
    let lines = fs::read_to_string(&metrics).unwrap();
    assert_eq!(lines.lines().count(), 5);
    for l in lines.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
    assert_eq!(
        udma(&["eval", "--checkpoint", s(&ckpt), "--scan", s(&scan), "--config", s(&cfg)]),
        0
    );
}

#[test]
fn train_requires_data_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "train_steps = 1\n").unwrap();
    let out = dir.path().join("m.ckpt");
    let metrics = dir.path().join("m.jsonl");
    assert_eq!(udma(&["train", "--config", s(&cfg), "--out", s(&out), "--metrics", s(&metrics)]), 1);
}

#[test]
fn gradcheck_command_small() {
    assert_eq!(udma(&["gradcheck", "--seeds", "1", "--size", "4", "--per-tensor", "1"]), 0);
}
