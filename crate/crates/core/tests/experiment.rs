use std::fs;
use std::path::Path;

use puupl::engine::{RunObserver, RunState};
use puupl::experiment::{self, RunConfig};
use puupl::uncertainty::UncertaintyReport;
use puupl::{PuError, Result};

const SMALL: &str = r#"
seeds = [0, 1]
output_dir = "unused"

[dataset]
source = "gaussians"
n_train = 300
n_test = 500
prior = 0.5
separation = 4.0
dim = 2
n_labeled_positives = 30
validation_size = 100
validation = "labeled"

[network]
hidden = [8]

[optimizer]
lr = 0.01
batch_size = 32
epochs = 3

[puupl]
prior = 0.5
max_new_labels = 20
max_iterations = 3

[eval]
criterion = "accuracy"
"#;

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = experiment::parse_config_str(SMALL, Path::new(".")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(path: impl AsRef<Path>) -> String {
    let path = path.as_ref();
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn experiment_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let summary = experiment::run_experiment(&small_config(&out), 2).unwrap();

    assert_eq!(summary.seeds, vec![0, 1]);
    assert_eq!(summary.runs.len(), 2);
    assert!((0.0..=1.0).contains(&summary.accuracy.mean));
    assert!(summary.accuracy.stderr >= 0.0);
    for file in ["config.json", "summary.json"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    for seed in [0, 1] {
        let s = out.join(format!("seed-{seed}"));
        for file in ["epochs.csv", "iterations.jsonl", "theta_star.bin", "test_metrics.json", "checkpoint.json"] {
            assert!(s.join(file).is_file(), "seed {seed}: {file}");
        }
        let epochs = read(s.join("epochs.csv"));
        assert!(epochs.starts_with("iteration,epoch,"));
        for plot in ["val_score", "loss", "pseudo_labeled", "pl_accuracy"] {
            assert!(out.join("plots").join(format!("{plot}_seed-{seed}.csv")).is_file(), "{plot}");
        }
    }
    let on_disk: serde_json::Value = serde_json::from_str(&read(out.join("summary.json"))).unwrap();
    assert_eq!(on_disk["accuracy"]["mean"].as_f64(), Some(summary.accuracy.mean));
}

#[test]
fn rerunning_a_finished_experiment_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    experiment::run_experiment(&cfg, 1).unwrap();
    let first = read(out.join("summary.json"));
    experiment::run_experiment(&cfg, 1).unwrap();
    assert_eq!(first, read(out.join("summary.json")));
}

/// Fails once `stop_after` iterations have finished, as an interruption would.
struct StopAfter(usize);

impl RunObserver for StopAfter {
    fn iteration_finished(&mut self, state: &RunState, _: &UncertaintyReport) -> Result<()> {
        if state.next_iteration >= self.0 {
            Err(PuError::Numeric("interrupted".into()))
        } else {
            Ok(())
        }
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("unused"));
    cfg.puupl.patience = 10;
    let loaded = experiment::load_data(&cfg.dataset).unwrap();
    let data = experiment::prepare(&cfg.dataset, &loaded, 4).unwrap();

    let whole = dir.path().join("whole");
    experiment::run_seed(&cfg, &data, 4, &whole).unwrap();

    let split = dir.path().join("split");
    let err = experiment::run_seed_observed(&cfg, &data, 4, &split, &mut StopAfter(1)).unwrap_err();
    assert!(err.to_string().contains("interrupted"));
    assert!(split.join("checkpoint.json").is_file());
    assert!(!split.join("test_metrics.json").exists());
    experiment::run_seed(&cfg, &data, 4, &split).unwrap();

    for file in ["epochs.csv", "iterations.jsonl", "test_metrics.json"] {
        assert_eq!(read(whole.join(file)), read(split.join(file)), "{file}");
    }
    assert_eq!(fs::read(whole.join("theta_star.bin")).unwrap(), fs::read(split.join("theta_star.bin")).unwrap());
}

#[test]
fn checkpoint_from_another_config_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("unused"));
    let loaded = experiment::load_data(&cfg.dataset).unwrap();
    let data = experiment::prepare(&cfg.dataset, &loaded, 0).unwrap();
    let run = dir.path().join("seed");
    experiment::run_seed(&cfg, &data, 0, &run).unwrap();

    cfg.optimizer.epochs = 1;
    cfg.puupl.max_iterations = 1;
    experiment::run_seed(&cfg, &data, 0, &run).unwrap();
    let epochs = read(run.join("epochs.csv"));
    assert_eq!(epochs.lines().count(), 2, "{epochs}");
}

#[test]
fn sweep_runs_each_value_and_tabulates() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("seeds = [0, 1]", "seeds = [0]")
        .replace("output_dir = \"unused\"", "output_dir = \"out\"");
    let path = dir.path().join("small.toml");
    fs::write(&path, text).unwrap();
    // Relative output directories resolve against the working directory or
    // the output root variable; an absolute path keeps the test hermetic.
    let abs = dir.path().join("out");
    let text = read(&path).replace("output_dir = \"out\"", &format!("output_dir = {:?}", abs.to_str().unwrap()));
    fs::write(&path, text).unwrap();

    let values = vec!["0.3".to_string(), "0.7".to_string()];
    let rows = experiment::sweep(&path, "puupl.prior", &values, 1).unwrap();
    assert_eq!(rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["0.3", "0.7"]);
    for v in &values {
        let run = abs.join(format!("puupl.prior={v}"));
        let cfg: serde_json::Value = serde_json::from_str(&read(run.join("config.json"))).unwrap();
        assert_eq!(cfg["puupl"]["prior"].as_f64(), Some(v.parse().unwrap()));
        assert!(run.join("summary.json").is_file());
    }
    let table = read(abs.join("sweep_puupl.prior.csv"));
    assert_eq!(table.lines().count(), 3);
    assert!(abs.join("plots/sweep_puupl.prior_accuracy.csv").is_file());
    assert!(abs.join("plots/sweep_puupl.prior_ece.csv").is_file());

    let err = experiment::sweep(&path, "puupl.prior", &[], 1).unwrap_err();
    assert!(matches!(err, PuError::Config { .. }), "{err}");
    let err = experiment::sweep(&path, "puupl.bogus", &values, 1).unwrap_err();
    assert!(err.to_string().contains("puupl.bogus"), "{err}");
    let err = experiment::sweep(&path, "puupl.prior", &["1.5".to_string()], 1).unwrap_err();
    assert!(matches!(err, PuError::Config { .. }), "{err}");
}

#[test]
fn prior_grid_search_picks_from_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("unused"));
    cfg.search.prior_grid = vec![0.2, 0.5, 0.8];
    let loaded = experiment::load_data(&cfg.dataset).unwrap();
    let data = experiment::prepare(&cfg.dataset, &loaded, 1).unwrap();
    let run = dir.path().join("seed");
    let (result, _) = experiment::run_seed(&cfg, &data, 1, &run).unwrap();
    assert!(cfg.search.prior_grid.contains(&result.prior));
    let table = read(run.join("prior_search.csv"));
    assert_eq!(table.lines().next(), Some("prior,val_pu_auc"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn saved_snapshot_evaluates_raw_csv_like_the_run_did() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("unused"));
    let loaded = experiment::load_data(&cfg.dataset).unwrap();
    let data = experiment::prepare(&cfg.dataset, &loaded, 2).unwrap();
    let run = dir.path().join("seed");
    let (result, _) = experiment::run_seed(&cfg, &data, 2, &run).unwrap();

    // Undo the standardization so the CSV holds raw features.
    let s = data.standardizer.unwrap();
    let mut csv = String::from("f0,f1,label\n");
    for (row, &t) in data.test.features.rows().into_iter().zip(&data.test.targets) {
        csv.push_str(&format!("{},{},{t}\n", row[0] * s.std + s.mean, row[1] * s.std + s.mean));
    }
    let path = dir.path().join("test.csv");
    fs::write(&path, csv).unwrap();

    let report = experiment::evaluate_snapshot(&run.join("theta_star.bin"), &path, None, cfg.eval.bins).unwrap();
    assert!((report.accuracy - result.test.accuracy).abs() < 1e-9);
    assert!((report.ece - result.test.ece).abs() < 1e-6);

    let (members, meta) = experiment::load_theta_star(&run.join("theta_star.bin")).unwrap();
    assert_eq!(members.len(), 2);
    assert_eq!(meta.seed, 2);
    assert_eq!(meta.positive_classes, vec![1]);

    fs::write(&path, "f0,label\n0.5,1\n").unwrap();
    let err = experiment::evaluate_snapshot(&run.join("theta_star.bin"), &path, None, 10).unwrap_err();
    assert!(matches!(err, PuError::Shape(_)), "{err}");
}

#[test]
fn config_errors_name_the_offending_key() {
    let err = experiment::parse_config_str(&SMALL.replace("lr = 0.01", "lr = \"fast\""), Path::new(".")).unwrap_err();
    assert!(err.to_string().contains("optimizer.lr"), "{err}");
    let err = experiment::parse_config_str(&SMALL.replace("epochs = 3", "epochs = 3\nmomentum = 0.9"), Path::new(".")).unwrap_err();
    assert!(err.to_string().contains("momentum"), "{err}");
}
