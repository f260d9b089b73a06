use std::fs;

use sfada::core::data::LabeledDataset;
use sfada::core::Tensor;
use sfada::idx::{load_idx_dataset, save_idx_dataset};
use sfada::Error;

fn tiny() -> LabeledDataset {
    let pixels: Vec<f64> = (0..16).map(|i| f64::from(i * 17) / 255.0).collect();
    let images = Tensor::new(&[4, 1, 2, 2], pixels).unwrap();
    LabeledDataset::new(images, vec![3, 0, 9, 3], (0..10).map(|c| c.to_string()).collect()).unwrap()
}

#[test]
fn four_image_pair_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let ds = tiny();
    save_idx_dataset(&ds, &img, &lab).unwrap();
    let back = load_idx_dataset(&img, &lab).unwrap();
    assert_eq!(back, ds);
    let bytes = fs::read(&img).unwrap();
    assert_eq!(&bytes[..4], &2051u32.to_be_bytes());
    assert_eq!(&fs::read(&lab).unwrap()[..4], &2049u32.to_be_bytes());
}

#[test]
fn truncated_and_malformed_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    save_idx_dataset(&tiny(), &img, &lab).unwrap();
    let full = fs::read(&img).unwrap();

    fs::write(&img, &full[..full.len() - 1]).unwrap();
    assert!(matches!(load_idx_dataset(&img, &lab), Err(Error::Format { .. })));
    fs::write(&img, &full[..6]).unwrap();
    assert!(matches!(load_idx_dataset(&img, &lab), Err(Error::Format { .. })));

    let mut swapped = full.clone();
    swapped[..4].copy_from_slice(&2049u32.to_be_bytes());
    fs::write(&img, &swapped).unwrap();
    assert!(matches!(load_idx_dataset(&img, &lab), Err(Error::Format { .. })));
}

#[test]
fn count_mismatch_is_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    save_idx_dataset(&tiny(), &img, &lab).unwrap();
    let mut labels = 2049u32.to_be_bytes().to_vec();
    labels.extend(3u32.to_be_bytes());
    labels.extend([1, 2, 3]);
    fs::write(&lab, labels).unwrap();
    assert!(matches!(load_idx_dataset(&img, &lab), Err(Error::Consistency(_))));
}

/// Runs only when `MNIST_DIR` points at the standard training files.
#[test]
fn mnist_train_split_has_sixty_thousand_samples() {
    let Some(dir) = std::env::var_os("MNIST_DIR") else { return };
    let dir = std::path::PathBuf::from(dir);
    let ds = load_idx_dataset(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(ds.len(), 60000);
}
