use std::path::Path;
use std::process::{Command, Output};

use polar_nnbp::bench::read_report;
use polar_nnbp::cli::{RunManifest, RunStatus};
use polar_nnbp::Checkpoint;

fn nnbp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnbp"))
        .args(args)
        .current_dir(dir)
        .env_remove("NNBP_WORKERS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_TRAIN: &str = "code = code.txt\niterations = 3\nsnr_list = 1,3\ncodewords_per_snr = 200\nmini_batch = 50\n\
                           learning_rate = 0.03\nvalidation_ratio = 0.2\nmax_epochs = 2\nseed = 5\n";

fn setup_code(dir: &Path, n: &str, k: &str) {
    let o = nnbp(&["construct", "-N", n, "-K", k, "-o", "code.txt"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn construct_writes_expected_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(nnbp(&["construct", "-N", "8", "-K", "4", "-o", "a.txt"], d).status.success());
    let text = std::fs::read_to_string(d.join("a.txt")).unwrap();
    assert!(text.lines().any(|l| l == "A=3,5,6,7"), "{text}");

    assert!(nnbp(&["construct", "-N", "64", "-K", "32", "-o", "b.txt"], d).status.success());
    let first = std::fs::read(d.join("b.txt")).unwrap();
    assert!(nnbp(&["construct", "-N", "64", "-K", "32", "-o", "b.txt"], d).status.success());
    assert_eq!(first, std::fs::read(d.join("b.txt")).unwrap());

    let m = RunManifest::load(&d.join("b.txt.manifest.json")).unwrap();
    assert_eq!(m.command, "construct");
    assert_eq!(m.status, RunStatus::Completed);
    assert!(m.finished_unix_ms.unwrap() >= m.started_unix_ms);

    let o = nnbp(&["construct", "-N", "12", "-K", "4", "-o", "c.txt"], d);
    assert!(!o.status.success());
    assert!(!d.join("c.txt").exists());
}

#[test]
fn train_syndrome_and_bce_differ() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_code(d, "16", "8");
    // Two epochs rarely beat epoch 0 on validation FER, so keep the final weights.
    std::fs::write(d.join("syn.cfg"), format!("{SMALL_TRAIN}loss = syndrome\nselect = last\n")).unwrap();
    std::fs::write(d.join("bce.cfg"), format!("{SMALL_TRAIN}loss = bce\nselect = last\n")).unwrap();
    for cfg in ["syn.cfg", "bce.cfg"] {
        let o = nnbp(&["train", cfg], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let syn = Checkpoint::load(&d.join("syn.weights.json")).unwrap();
    let bce = Checkpoint::load(&d.join("bce.weights.json")).unwrap();
    assert_eq!(syn.iterations, 3);
    assert_ne!(syn, bce);
    let history = std::fs::read_to_string(d.join("syn.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("epoch,train_loss,val_loss,val_fer,seconds"));
    let m = RunManifest::load(&d.join("syn.weights.json.manifest.json")).unwrap();
    assert_eq!(m.seed, Some(5));
    assert_eq!(m.outputs.len(), 2);
    assert!(m.outputs.iter().all(|o| o.digest.is_some()));
}

#[test]
fn train_config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_code(d, "8", "4");
    let cfg = format!("{SMALL_TRAIN}loss = syndrome\n").replace("mini_batch = 50\n", "");
    std::fs::write(d.join("a.cfg"), cfg).unwrap();
    let o = nnbp(&["train", "a.cfg"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mini_batch"), "{}", stderr(&o));

    std::fs::write(d.join("b.cfg"), format!("{SMALL_TRAIN}loss = hinge\n")).unwrap();
    let o = nnbp(&["train", "b.cfg"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("loss"), "{}", stderr(&o));

    std::fs::write(d.join("c.cfg"), format!("{SMALL_TRAIN}loss = bce\nmomentum = 0.9\n")).unwrap();
    let o = nnbp(&["train", "c.cfg"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn train_aborts_on_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_code(d, "8", "4");
    let cfg = format!("{SMALL_TRAIN}loss = bce\n").replace("learning_rate = 0.03", "learning_rate = 1e308");
    std::fs::write(d.join("nan.cfg"), cfg).unwrap();
    let o = nnbp(&["train", "nan.cfg"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let m = RunManifest::load(&d.join("nan.weights.json.manifest.json")).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert!(!d.join("nan.weights.json").exists());
}

#[test]
fn eval_curves_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_code(d, "16", "8");
    std::fs::write(d.join("syn.cfg"), format!("{SMALL_TRAIN}loss = syndrome\n")).unwrap();
    std::fs::write(d.join("bce.cfg"), format!("{SMALL_TRAIN}loss = bce\n")).unwrap();
    assert!(nnbp(&["train", "syn.cfg"], d).status.success());
    assert!(nnbp(&["train", "bce.cfg"], d).status.success());

    let base = ["eval", "--code", "code.txt", "--snr", "1,3", "--seed", "8", "--min-errors", "20"];
    let o = nnbp(&[&base[..], &["-o", "base.csv"]].concat(), d);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports = read_report(&d.join("base.csv")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].decoder, "conventional");
    assert_eq!(reports[0].points.len(), 2);

    let two = ["--checkpoint", "syn.weights.json", "--checkpoint", "supervised=bce.weights.json"];
    for out in ["x.csv", "y.csv"] {
        let o = nnbp(&[&base[..], &two[..], &["-o", out]].concat(), d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let reports = read_report(&d.join("x.csv")).unwrap();
    let labels: Vec<&str> = reports.iter().map(|r| r.decoder.as_str()).collect();
    assert_eq!(labels, ["conventional", "syn", "supervised"]);
    assert_eq!(std::fs::read(d.join("x.csv")).unwrap(), std::fs::read(d.join("y.csv")).unwrap());

    // T mismatch and shape mismatch are rejected
    let o = nnbp(&[&base[..], &["--checkpoint", "syn.weights.json", "--iterations", "5", "-o", "z.csv"]].concat(), d);
    assert!(!o.status.success());
    setup_code(d, "8", "4");
    let o = nnbp(&[&base[..], &["--checkpoint", "syn.weights.json", "-o", "z.csv"]].concat(), d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("N=16"), "{}", stderr(&o));
}

#[test]
fn eval_with_ml_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_code(d, "8", "4");
    let o = nnbp(&["eval", "--code", "code.txt", "--snr", "2", "--seed", "1", "--ml", "--min-errors", "50", "-o", "r.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports = read_report(&d.join("r.csv")).unwrap();
    assert_eq!(reports[1].decoder, "ml");
    assert!(reports[1].points[0].frame_errors <= reports[0].points[0].frame_errors);
}

#[test]
fn gradcheck_passes_and_guards_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = nnbp(&["gradcheck", "--seed", "1"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let o = nnbp(&["gradcheck", "-N", "16", "-K", "8", "-T", "3", "--seed", "2", "-o", "g.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("g.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);

    let o = nnbp(&["gradcheck", "-N", "64", "-K", "32", "--seed", "1"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("N <= 16"), "{}", stderr(&o));

    // an impossible tolerance makes the check fail with a non-zero exit
    let o = nnbp(&["gradcheck", "--seed", "1", "--tolerance", "0"], d);
    assert!(!o.status.success());
    let m = RunManifest::load(&d.join("gradcheck.manifest.json")).unwrap();
    assert_eq!(m.status, RunStatus::CheckFailed);
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_code(d, "8", "4");
    let o = nnbp(&["eval", "--code", "code.txt", "--snr", "1", "--seed", "3", "--min-errors", "10", "-o", "r.csv"], d);
    assert!(o.status.success());
    let o = nnbp(&["replay", "r.csv.manifest.json", "--out-dir", "again"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("r.csv")).unwrap(), std::fs::read(d.join("again/r.csv")).unwrap());

    let path = d.join("r.csv.manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut m: RunManifest = serde_json::from_str(&text).unwrap();
    m.outputs[0].digest = Some("0000000000000000".into());
    m.save(&path).unwrap();
    let o = nnbp(&["replay", "r.csv.manifest.json", "--out-dir", "again2"], d);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("DIFFERS"));
}
