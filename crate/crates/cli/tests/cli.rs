use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]
output_dir = "tiny"

[dataset]
source = "gaussians"
n_train = 200
n_test = 200
prior = 0.5
separation = 4.0
dim = 2
n_labeled_positives = 20
validation_size = 50
validation = "labeled"

[network]
hidden = [8]

[optimizer]
lr = 0.01
batch_size = 32
epochs = 2

[puupl]
max_new_labels = 10
max_iterations = 2

[eval]
criterion = "accuracy"
"#;

fn puupl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_puupl"))
        .args(args)
        .env("PUUPL_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn train_then_eval_the_saved_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let root = dir.path().join("out");

    let out = puupl(&root, &["train", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("accuracy"));
    let run = root.join("tiny");
    assert!(run.join("summary.json").is_file());
    let snapshot = run.join("seed-0/theta_star.bin");
    assert!(snapshot.is_file());

    let csv = dir.path().join("points.csv");
    fs::write(&csv, "f0,f1,label\n3.0,3.0,1\n-3.0,-3.0,0\n2.5,2.0,1\n-2.0,-2.5,0\n").unwrap();
    let out = puupl(&root, &["eval", "--snapshot", snapshot.to_str().unwrap(), "--data", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn seed_flag_overrides_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let root = dir.path().join("out");
    let out = puupl(&root, &["train", "--config", config.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(root.join("tiny/seed-5").is_dir());
    assert!(!root.join("tiny/seed-0").exists());
}

#[test]
fn sweep_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let root = dir.path().join("out");
    let out = puupl(
        &root,
        &["sweep", "--config", config.to_str().unwrap(), "--param", "puupl.method", "--values", "nnpu,puupl"],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    for v in ["nnpu", "puupl"] {
        assert!(root.join(format!("tiny/puupl.method={v}/summary.json")).is_file(), "{v}");
    }
    assert!(root.join("tiny/sweep_puupl.method.csv").is_file());
}

#[test]
fn bad_config_exits_with_code_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, TINY.replace("epochs = 2", "epochs = -1")).unwrap();
    let out = puupl(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("optimizer.epochs"), "{}", text(&out.stderr));

    fs::write(&config, TINY.replace("prior = 0.5\nseparation", "prior = 1.5\nseparation")).unwrap();
    let out = puupl(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn missing_files_are_reported_without_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let out = puupl(dir.path(), &["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("absent.toml"), "{}", text(&out.stderr));

    let out = puupl(dir.path(), &["eval", "--snapshot", "nope.bin", "--data", "nope.csv"]);
    assert_eq!(out.status.code(), Some(1));
}
