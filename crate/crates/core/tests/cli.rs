use std::fs;
use std::path::Path;

use stambridge::cli::{load_config, run_with};
use stambridge::config::TrainConfig;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("stambridge").chain(args.iter().copied());
    let code = run_with(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
epochs = 1
batch_size = 4
blocks = 1
d_model = 8
heads = 2
ffn = 16
patch_maps = 2
patch_kernel = 5
patch_pool = 2
";

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("c.txt");
    fs::write(&f, "lr = 0.001\nepochs = 3\n").unwrap();
    let cfg = load_config(Some(&f), &[("lr", "0.01".into())]).unwrap();
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.epochs, 3);

    let (code, out) = run(&[
        "train",
        "--config",
        s(&f),
        "--lr",
        "0.01",
        "--data",
        s(&tmp.path().join("none")),
    ]);
    assert_eq!(code, 2);
    assert!(out.contains("lr=0.01\n"), "{out}");
}

#[test]
fn an_empty_file_means_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("empty.txt");
    fs::write(&f, "").unwrap();
    assert_eq!(load_config(Some(&f), &[]).unwrap(), TrainConfig::default());
}

#[test]
fn bad_values_and_keys_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("c.txt");
    fs::write(&f, "epochs = abc\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&f)]).0, 2);
    fs::write(&f, "learning_rate = 0.1\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&f)]).0, 2);
    assert_eq!(run(&["train", "--epochs", "-1"]).0, 2);
    assert_eq!(
        run(&["train", "--config", s(&tmp.path().join("missing.txt"))]).0,
        2
    );
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["gradcheck", "--fault", "nope"]).0, 2);
    assert_eq!(run(&["ringing", "--keep", "0"]).0, 2);
    assert_eq!(
        run(&["synth", "--classes", "1", "--out", s(tmp.path())]).0,
        2
    );
}

#[test]
fn missing_dataset_creates_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck");
    let (code, _) = run(&[
        "train",
        "--data",
        s(&tmp.path().join("absent")),
        "--ckpt",
        s(&ck),
    ]);
    assert_eq!(code, 2);
    assert!(!ck.exists());
    let (code, _) = run(&["eval", "--ckpt", s(&ck), "--data", s(tmp.path())]);
    assert_eq!(code, 2);
}

#[test]
fn version_and_help() {
    let (code, out) = run(&["version"]);
    assert_eq!(code, 0);
    assert_eq!(
        out,
        format!(
            "stambridge {} (tensor format v1)\n",
            env!("CARGO_PKG_VERSION")
        )
    );
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn ringing_writes_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("r.json");
    let (code, out) = run(&["ringing", "--time", "64", "--pos", "32", "--out", s(&p)]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[0]["pre_onset_energy_soft"], 0.0);
}

#[test]
fn synth_train_eval_export_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck, ex) = (
        tmp.path().join("data"),
        tmp.path().join("ck"),
        tmp.path().join("ex"),
    );
    let (code, out) = run(&[
        "synth",
        "--classes",
        "3",
        "--test-classes",
        "3",
        "--trials",
        "2",
        "--subjects",
        "2",
        "--dim",
        "16",
        "--snr",
        "-5",
        "--seed",
        "2",
        "--out",
        s(&data),
    ]);
    assert_eq!(code, 0, "{out}");
    let cfg = tmp.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let (code, out) = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ck),
        "--dim",
        "16",
        "--precision",
        "f32",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("precision=f32"));

    let report = tmp.path().join("r.json");
    let eval = |seed: &str| {
        run(&[
            "eval",
            "--ckpt",
            s(&ck),
            "--data",
            s(&data),
            "--kway",
            "3",
            "--seed",
            seed,
            "--out",
            s(&report),
        ])
    };
    assert_eq!(eval("1").0, 0);
    let first = fs::read(&report).unwrap();
    assert_eq!(eval("1").0, 0);
    assert_eq!(fs::read(&report).unwrap(), first);
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["k_way"], 3);
    assert_eq!(v["n_queries"], 6);

    let (code, _) = run(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--kway", "4"]);
    assert_eq!(code, 2);
    let (code, out) = run(&[
        "export",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&ex),
    ]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 3);
}
