use std::path::Path;
use std::process::{Command, Output};

fn strokeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strokeseg")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(strokeseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(strokeseg(&["generate", "--seed", "1"]).status.code(), Some(1));
    assert_eq!(strokeseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = strokeseg(&["eval", "--checkpoint", p(&dir.path().join("none.bin")), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = strokeseg(&["generate", "--n", "2", "--mix", "single-middle", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single-middle"));
}

#[test]
fn generate_train_eval_predict_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let gen = strokeseg(&[
        "generate", "--n", "5", "--mix", "single-left,multiple-both", "--seed", "4", "--size", "16", "--spacing-mm", "8",
        "--out", p(&data),
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("statistics.json").exists());

    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        "epochs = 2\nbatch_size = 2\ntrain_fraction = 0.6\n[pipeline]\nmode = \"basic\"\ntarget_shape = [16, 16, 16]\n",
    )
    .unwrap();
    let train = strokeseg(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run)]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["config.toml", "seed.txt", "code_hash.txt", "history.json", "metrics.csv", "metrics.json", "checkpoint.bin", "curves.png", "comparison.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_dir(run.join("overlays")).unwrap().count(), 2);

    let prepared = dir.path().join("prepared");
    let pre = strokeseg(&["preprocess", "--in", p(&data), "--out", p(&prepared), "--mode", "basic", "--config", p(&config)]);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));

    let eval_dir = dir.path().join("eval");
    let ckpt = run.join("checkpoint.bin");
    let eval = strokeseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&prepared), "--out", p(&eval_dir)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let image = prepared.join("images/phantom_0000.nii.gz");
    let mask = dir.path().join("pred.nii.gz");
    let pred = strokeseg(&["predict", "--checkpoint", p(&ckpt), "--in", p(&image), "--out", p(&mask)]);
    assert!(pred.status.success(), "{}", String::from_utf8_lossy(&pred.stderr));
    assert!(mask.exists());

    let rep = dir.path().join("report");
    let out = strokeseg(&["report", "--run-dir", p(&run), "--out", p(&rep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(rep.join("comparison.csv")).unwrap();
    assert!(table.contains("SQMLP-net,0.709"));
    assert!(table.contains("this run"));
    assert_eq!(std::fs::read_to_string(rep.join("curves.csv")).unwrap().lines().count(), 3);
}
