use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = "n_subjects = 7
trials_per_subject = 1
frames_per_trial = 40
signal_to_noise = 2.0
seed = 5
audio_dim = 3
text_dim = 2
validation_subjects = 1
";

const CONFIG: &str = "window_len = 20
hop = 10
train_offset = 5
lr = 0.001
min_lr = 0.00001
warmup_epochs = 1
max_epochs = 2

[model]
visual_channels = [2, 2, 2]
visual_dim = 4
audio_dim = 3
text_dim = 2
tcn_channels = [4]
dilations = [1]
key_dim = 4
";

fn afusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afusion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = afusion(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SPEC).unwrap();
    fs::write(d.join("train.toml"), CONFIG).unwrap();

    let manifest = d.join("data/manifest.csv");
    ok(&["synth", "--spec", p(&d.join("spec.toml")), "--out", p(&d.join("data"))]);
    assert!(manifest.exists());

    let folds = d.join("folds.csv");
    ok(&["folds", "--manifest", p(&manifest), "--seed", "3", "--out", p(&folds)]);

    for fold in ["0", "1"] {
        let out = d.join(format!("fold{fold}"));
        let stdout = ok(&[
            "train", "--manifest", p(&manifest), "--folds", p(&folds), "--fold", fold,
            "--config", p(&d.join("train.toml")), "--out", p(&out),
        ]);
        assert!(stdout.contains("best validation CCC"));
        let log = fs::read_to_string(out.join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(out.join("model.afwt").exists());
    }

    let preds = d.join("preds");
    ok(&[
        "predict", "--manifest", p(&manifest), "--checkpoints",
        p(&d.join("fold0")), p(&d.join("fold1/model.afwt")), "--out", p(&preds),
    ]);
    assert_eq!(fs::read_dir(preds.join("model1")).unwrap().count(), 7);

    for method in ["ccc", "ewe"] {
        let fused = d.join(format!("fused_{method}"));
        ok(&["center", "--preds", p(&preds), "--method", method, "--out", p(&fused)]);
        let weights = fs::read_to_string(fused.join("weights.txt")).unwrap();
        assert_eq!(weights.lines().count(), 1 + 2 * 7);

        let report = d.join(format!("eval_{method}.csv"));
        let stdout = ok(&["eval", "--preds", p(&fused), "--manifest", p(&manifest), "--out", p(&report)]);
        assert!(stdout.contains("7 trials, mean CCC"));
        let rows: Vec<String> = fs::read_to_string(&report).unwrap().lines().map(String::from).collect();
        assert_eq!(rows[0], "trial_id,ccc_valence,ccc_arousal,mean");
        assert_eq!(rows.len(), 8);
        for row in &rows[1..] {
            let mean: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert!((-1.0..=1.0).contains(&mean));
        }
    }
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad_spec.toml"), "signal_to_noise = -1.0\n").unwrap();
    let out = afusion(&["synth", "--spec", p(&d.join("bad_spec.toml")), "--out", p(&d.join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("spec.toml"), SPEC).unwrap();
    ok(&["synth", "--spec", p(&d.join("spec.toml")), "--out", p(&d.join("data"))]);
    let manifest = d.join("data/manifest.csv");
    let folds = d.join("folds.csv");
    ok(&["folds", "--manifest", p(&manifest), "--out", p(&folds)]);

    fs::write(d.join("bad.toml"), "lr = 0.001\nmin_lr = 0.01\n").unwrap();
    let out = afusion(&[
        "train", "--manifest", p(&manifest), "--folds", p(&folds), "--fold", "0",
        "--config", p(&d.join("bad.toml")), "--out", p(&d.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_lr"));

    let out = afusion(&[
        "train", "--manifest", p(&manifest), "--folds", p(&folds), "--fold", "9", "--out", p(&d.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = afusion(&["eval", "--preds", p(d), "--manifest", p(&d.join("missing.csv")), "--out", p(&d.join("e.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}
