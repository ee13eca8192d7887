use std::path::PathBuf;

use puupl::dataset::{binarize, load_idx};

fn mnist(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist").join(name)
}

#[test]
fn canonical_training_files_load_and_binarize() {
    let raw = load_idx(mnist("train-images-idx3-ubyte.gz"), mnist("train-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(raw.features.dim(), (60_000, 784));
    assert!(raw.features.iter().all(|&v| (0.0..=255.0).contains(&v)));
    let odd = binarize(&raw, &[1, 3, 5, 7, 9]).unwrap();
    let positives = odd.targets.iter().filter(|&&t| t == 1).count();
    assert_eq!(positives, 30_508);
    assert_eq!(odd.targets.len() - positives, 29_492);
}

#[test]
fn canonical_test_files_load() {
    let raw = load_idx(mnist("t10k-images-idx3-ubyte.gz"), mnist("t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(raw.features.dim(), (10_000, 784));
    assert!(raw.classes.iter().all(|&c| c < 10));
}

#[test]
fn mismatched_image_and_label_files_are_rejected() {
    let err = load_idx(mnist("t10k-images-idx3-ubyte.gz"), mnist("train-labels-idx1-ubyte.gz")).unwrap_err();
    assert!(err.to_string().contains("10000") || err.to_string().contains("60000"), "{err}");
}
