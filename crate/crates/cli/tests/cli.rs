use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use fpcr::data::{ingest_dataset, IngestOptions, Layout};

const BIN: &str = env!("CARGO_BIN_EXE_fpcr");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in tree(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

const SMALL: &[&str] = &[
    "--set",
    "train.main.steps=4",
    "--set",
    "train.residual_frozen.steps=2",
    "--set",
    "train.joint.steps=2",
    "--set",
    "data.train.count=3",
    "--set",
    "data.eval.count=2",
    "--set",
    "data.train.synth.height=32",
    "--set",
    "data.train.synth.width=32",
    "--set",
    "data.eval.synth.height=32",
    "--set",
    "data.eval.synth.width=32",
];

#[test]
fn synth_with_no_pairs_writes_an_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", "d", "--count", "0"], tmp.path());
    assert!(out.status.success());
    let files = tree(&tmp.path().join("d"));
    assert_eq!(files.keys().collect::<Vec<_>>(), ["manifest.json"]);
    let d = ingest_dataset(tmp.path().join("d"), Layout::PairedFiles, &IngestOptions::default()).unwrap();
    assert!(d.is_empty());
}

#[test]
fn synth_is_idempotent_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b", "a"] {
        let out = run(
            &["synth", "--out", d, "--count", "3", "--seed", "4", "--set", "height=16", "--set", "width=24"],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 3 * 4 + 1);
    assert_eq!(a, b);
}

#[test]
fn oracle_evaluation_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--oracle", "--run-dir", "ev", "--set", "data.eval.count=3"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_aee"], 0.0);
    assert_eq!(report["samples"].as_array().unwrap().len(), 3);
}

#[test]
fn invalid_configuration_exits_1_before_writing_anything() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["network.stages=1", "train.loss.lambda=-1", "bogus.key=3"] {
        let out = run(&["train", "--set", bad], tmp.path());
        assert_eq!(out.status.code(), Some(1), "{bad}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        let record = stderr.lines().find(|l| l.starts_with('{')).expect("JSON error record");
        let v: serde_json::Value = serde_json::from_str(record).unwrap();
        assert_eq!(v["error"]["kind"], "validation");
        assert_eq!(v["error"]["code"], 1);
    }
    assert!(!tmp.path().join("runs").exists());
    let missing = run(&["eval", "--checkpoint", "nope.bin"], tmp.path());
    assert_eq!(missing.status.code(), Some(1));
    let unknown = run(&["frobnicate"], tmp.path());
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn runs_land_in_timestamped_hashed_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--no-eval"];
    args.extend_from_slice(SMALL);
    let out = run(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dirs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].as_ref().unwrap().file_name().to_string_lossy().into_owned();
    let (stamp, hash) = name.rsplit_once('-').unwrap();
    assert_eq!(stamp.len(), "20260101T000000Z".len());
    assert_eq!(hash.len(), 8);
    let dir = tmp.path().join("runs").join(&name);
    for f in ["config.toml", "loss.csv", "model.bin", "summary.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,phase,lr,total,supervised,unsupervised,regularization");
    assert_eq!(csv.lines().count(), 1 + 8);
    // the resolved config alone reproduces the run
    let again = run(
        &["train", "--no-eval", "--config", dir.join("config.toml").to_str().unwrap(), "--run-dir", "again"],
        tmp.path(),
    );
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(tmp.path().join("again/loss.csv")).unwrap(), csv);
    assert_eq!(
        std::fs::read(tmp.path().join("again/model.bin")).unwrap(),
        std::fs::read(dir.join("model.bin")).unwrap()
    );
}

#[test]
fn resumed_training_continues_the_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--no-eval", "--run-dir", "full", "--set", "train.checkpoint_every=3"];
    args.extend_from_slice(SMALL);
    assert!(run(&args, tmp.path()).status.success());
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    std::fs::create_dir_all(part.join("checkpoints")).unwrap();
    std::fs::copy(full.join("config.toml"), part.join("config.toml")).unwrap();
    std::fs::copy(full.join("loss.csv"), part.join("loss.csv")).unwrap();
    std::fs::copy(
        full.join("checkpoints/ckpt-000003.bin"),
        part.join("checkpoints/ckpt-000003.bin"),
    )
    .unwrap();
    let out = run(&["train", "--no-eval", "--resume", "part"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(part.join("loss.csv")).unwrap(),
        std::fs::read_to_string(full.join("loss.csv")).unwrap()
    );
    assert_eq!(std::fs::read(part.join("model.bin")).unwrap(), std::fs::read(full.join("model.bin")).unwrap());
}

#[test]
fn gradcheck_subset_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--filter", "concat", "--run-dir", "g"], tmp.path());
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| concat | linear | PASS |"), "{table}");
    assert!(tmp.path().join("g/gradcheck.json").is_file());
    let none = run(&["gradcheck", "--filter", "no-such-op"], tmp.path());
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn viz_and_convert_write_images() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(run(&["synth", "--out", "d", "--count", "1", "--set", "height=16", "--set", "width=16"], p)
        .status
        .success());
    assert!(run(&["viz", "d/00000_flow.flo", "flow.png"], p).status.success());
    assert!(run(&["convert", "d/00000_img1.ppm", "img.png"], p).status.success());
    assert!(run(&["convert", "d/00000_flow.flo", "copy.flo"], p).status.success());
    assert_eq!(std::fs::read(p.join("copy.flo")).unwrap(), std::fs::read(p.join("d/00000_flow.flo")).unwrap());
    assert_eq!(&std::fs::read(p.join("flow.png")).unwrap()[1..4], b"PNG");
    let a = fpcr::data::read_image(p.join("d/00000_img1.ppm")).unwrap();
    let b = fpcr::data::read_image(p.join("img.png")).unwrap();
    assert_eq!(a, b);
    assert_eq!(run(&["convert", "d/00000_img1.ppm", "x.flo"], p).status.code(), Some(1));
    assert_eq!(run(&["viz", "missing.flo", "x.png"], p).status.code(), Some(2));
}
