use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcn_cli::{AugmentRunReport, TrainSummary};
use gcn_core::augment::AugmentationReport;
use gcn_core::data::netpbm;
use gcn_core::data::synth::synth_digits;
use gcn_core::gradcheck::LayerKind;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"))
}

fn gcn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("GCN_OUTPUT_ROOT")
        .output()
        .expect("spawn gcn")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_and_lists_every_layer_once() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&gcn(dir.path(), &["gradcheck"]));
    for k in LayerKind::ALL {
        let n = out
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(k.name()))
            .count();
        assert_eq!(n, 1, "{} in\n{out}", k.name());
    }
}

#[test]
fn gradcheck_fault_exits_one_naming_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let o = gcn(dir.path(), &["gradcheck", "--inject-fault", "deconv2d"]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8_lossy(&o.stdout);
    let bad: Vec<&str> = out.lines().filter(|l| l.contains("FAIL")).collect();
    assert_eq!(bad.len(), 1, "{out}");
    assert!(bad[0].starts_with("deconv2d") && bad[0].contains("element"));
    assert!(stderr(&o).contains("deconv2d"));

    let o = gcn(dir.path(), &["gradcheck", "--layer", "conv3d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_config_writes_all_artifacts_and_reconstructs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke_digits");
    ok(&gcn(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "run"]));
    let run = dir.path().join("run");
    for f in [
        "generator.gcn1",
        "classifier.gcn1",
        "trainer_state.gcn1",
        "metrics.csv",
        "config.json",
        "dataset.json",
        "summary.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert_eq!(csv.lines().next().unwrap(), "batch,lr,pixel_loss,ce_digit,ce_color,ce_rotation");
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.batches, 200);
    let echo = gcn_core::ExperimentConfig::load(run.join("config.json")).unwrap();
    assert_eq!(echo, gcn_core::ExperimentConfig::load(&cfg).unwrap());

    // Reconstruction: a training combination lands near its real image.
    let out = ok(&gcn(
        dir.path(),
        &[
            "generate",
            "--checkpoint",
            "run",
            "--feature",
            "digit=3",
            "--feature",
            "color=red",
            "--feature",
            "rotation=rot0",
            "--output",
            "three.ppm",
        ],
    ));
    assert!(out.contains("digit: 3"), "{out}");
    let img = netpbm::load(dir.path().join("three.ppm")).unwrap();
    let real = synth_digits(0, 1, &[0], &[0], 28).unwrap();
    let d = |digit: usize| real[digit].image.squared_distance(&img).unwrap();
    assert!(d(3) < 10.0, "distance {}", d(3));
    assert!((0..10).filter(|&k| k != 3).all(|k| d(k) > d(3)));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke_digits");
    let cfg = cfg.to_str().unwrap();
    let six = "train.total_batches=6";
    ok(&gcn(dir.path(), &["train", "--config", cfg, "--set", six, "--out", "full"]));
    ok(&gcn(dir.path(), &["train", "--config", cfg, "--set", "train.total_batches=3", "--out", "split"]));
    let o = gcn(dir.path(), &["train", "--config", cfg, "--set", six, "--out", "split"]);
    assert_eq!(o.status.code(), Some(2), "an existing run needs --resume");
    ok(&gcn(dir.path(), &["train", "--config", cfg, "--set", six, "--out", "split", "--resume"]));
    for f in ["metrics.csv", "generator.gcn1", "classifier.gcn1", "trainer_state.gcn1", "summary.json"] {
        let a = fs::read(dir.path().join("full").join(f)).unwrap();
        let b = fs::read(dir.path().join("split").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn missing_dataset_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gcn(dir.path(), &["train", "--config", config("digits").to_str().unwrap(), "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train-images-idx3-ubyte"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invalid_config_reports_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("desk_glyphs");
    let o = gcn(
        dir.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--set", "train.halving_period=\"soon\""],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.halving_period"), "{}", stderr(&o));

    let o = gcn(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--set", "train.epochs=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));

    let o = gcn(dir.path(), &["train", "--config", "nowhere.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.json"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

    let o = gcn(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
}

fn tiny_glyph_run(dir: &Path, out: &str) {
    let cfg = config("desk_glyphs");
    ok(&gcn(
        dir,
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "train.total_batches=20",
            "--out",
            out,
        ],
    ));
}

#[test]
fn glyph_generate_augment_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_glyph_run(d, "run");
    tiny_glyph_run(d, "again");
    for f in ["metrics.csv", "generator.gcn1", "classifier.gcn1", "summary.json", "config.json"] {
        assert!(fs::read(d.join("run").join(f)).unwrap() == fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }
    let gen_bytes = fs::read(d.join("run/generator.gcn1")).unwrap();

    // Blended identity.
    let out = ok(&gcn(
        d,
        &[
            "generate",
            "--checkpoint",
            "run",
            "--feature",
            "expression=happy",
            "--blend",
            "p0:0.5,p1:0.5",
            "--output",
            "imgs/blend.ppm",
        ],
    ));
    assert!(out.contains("identity:") && out.contains("expression:"), "{out}");
    let bytes = fs::read(d.join("imgs/blend.ppm")).unwrap();
    let img = netpbm::decode(&bytes).unwrap();
    assert_eq!(img.shape(), &[3, 28, 28]);
    assert_eq!(netpbm::encode(&img).unwrap(), bytes);

    for bad in [
        vec!["--feature", "expression=smug", "--feature", "identity=p0"],
        vec!["--feature", "expression=happy", "--feature", "identity=p99"],
        vec!["--feature", "mood=happy", "--feature", "identity=p0"],
        vec!["--feature", "expression=happy"],
        vec!["--feature", "expression=happy", "--blend", "p0:0.5,p1:0.4"],
    ] {
        let mut args = vec!["generate", "--checkpoint", "run", "--output", "bad.ppm"];
        args.extend(bad.iter());
        let o = gcn(d, &args);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert!(!d.join("bad.ppm").exists());
    }

    // Augment: 3 identities x 2 expressions -> 18 blends.
    let out = ok(&gcn(
        d,
        &[
            "augment",
            "--checkpoint",
            "run",
            "--identities",
            "3",
            "--expressions",
            "2",
            "--threshold",
            "0",
            "--outdir",
            "aug",
        ],
    ));
    assert!(out.contains("generated 18 kept 18"), "{out}");
    let report: AugmentRunReport =
        serde_json::from_str(&fs::read_to_string(d.join("aug/augment_report.json")).unwrap()).unwrap();
    assert_eq!(report.counts.generated, 18);
    assert_eq!(report.counts.kept, 18);
    assert!(report.rejected.is_empty());
    let ppms = walk(&d.join("aug")).into_iter().filter(|p| p.extension().is_some_and(|e| e == "ppm")).count();
    assert_eq!(ppms, 18);

    ok(&gcn(
        d,
        &["augment", "--checkpoint", "run", "--identities", "3", "--expressions", "2", "--threshold", "0.9", "--outdir", "strict"],
    ));
    let strict: AugmentRunReport =
        serde_json::from_str(&fs::read_to_string(d.join("strict/augment_report.json")).unwrap()).unwrap();
    assert_eq!(strict.counts.generated, 18);
    assert_eq!(strict.counts.kept + strict.counts.filtered_out, 18);
    assert_eq!(strict.rejected.len(), strict.counts.filtered_out);
    assert!(strict.rejected.iter().all(|r| r.probability < 0.9));
    assert_eq!(fs::read(d.join("run/generator.gcn1")).unwrap(), gen_bytes, "inputs are not modified");

    // Identical manifests in both arms give identical accuracies.
    let cfg = config("desk_glyphs");
    let out = ok(&gcn(
        d,
        &[
            "eval",
            "--original",
            "aug/manifest.json",
            "--synthesized",
            "aug/manifest.json",
            "--test",
            "aug/manifest.json",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "augment.recognizer.batches=10",
            "--set",
            "augment.recognizer.seed=7",
            "--augment-report",
            "aug/augment_report.json",
            "--out",
            "eval.json",
        ],
    ));
    assert!(out.contains("original accuracy"), "{out}");
    let r: AugmentationReport = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(r.original_accuracy, r.synthesized_accuracy);
    assert_eq!(r.config.seed, 7);
    assert_eq!(r.config.batches, 10);
    assert_eq!(r.test_size, 18);
    assert_eq!(r.counts.generated, 18);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn dataset_build_and_inspect_use_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_gcn"))
        .args(["dataset", "build", "--config", config("desk_digits").to_str().unwrap(), "--out", "ds", "--images"])
        .current_dir(dir.path())
        .env("GCN_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    let out = ok(&o);
    assert!(out.contains("30 samples (29 train, 1 held out)"), "{out}");
    assert!(root.join("ds/manifest.json").is_file());
    assert!(root.join("ds/files/manifest.json").is_file());
    assert!(!dir.path().join("ds").exists());

    let a = ok(&gcn(dir.path(), &["dataset", "inspect", "root/ds/manifest.json"]));
    let b = ok(&gcn(dir.path(), &["dataset", "inspect", "root/ds/files/manifest.json"]));
    assert!(a.contains("source: digits") && b.contains("source: files"), "{a}\n{b}");
    assert!(a.contains("feature color: 3 classes (3 present)"), "{a}");
    let sha = |s: &str| s.lines().find(|l| l.starts_with("sha256:")).unwrap().to_string();
    assert_eq!(sha(&a), sha(&b), "PPM export is pixel-exact");
    assert!(b.contains("29 train, 1 held out"), "{b}");
}
