use std::path::PathBuf;

use splitinfer_core::data::{dataset_from_idx, load_mnist_idx, DataError};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/idx").join(name)
}

fn bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn load(images: &str, labels: &str) -> Result<splitinfer_core::Dataset, DataError> {
    load_mnist_idx(fixture(images), fixture(labels))
}

#[test]
fn valid_pair_scales_pixels() {
    let d = load("ok3-images.idx3", "ok3-labels.idx1").unwrap();
    assert_eq!((d.len(), d.dim()), (3, 4));
    assert_eq!(d.labels(), &[0, 9, 4]);
    assert_eq!(d.image(0), &[0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0]);
    assert_eq!(d.image(2), &[1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn single_item_pair() {
    let d = load("one-images.idx3", "one-labels.idx1").unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.image(0), &[200.0 / 255.0]);
    assert_eq!(d.label(0), 7);
}

#[test]
fn every_byte_value_maps_into_unit_interval() {
    let d = load("all-bytes-images.idx3", "all-bytes-labels.idx1").unwrap();
    assert_eq!(d.dim(), 256);
    for (b, &v) in d.image(0).iter().enumerate() {
        assert_eq!(v, b as f64 / 255.0);
    }
}

#[test]
fn all_ten_classes_accepted() {
    let d = load("classes-images.idx3", "classes-labels.idx1").unwrap();
    assert_eq!(d.labels(), (0..10).collect::<Vec<_>>().as_slice());
    assert_eq!(d.class_count(), 10);
}

#[test]
fn mnist_shaped_pair() {
    let d = load("mnist-shape-images.idx3", "mnist-shape-labels.idx1").unwrap();
    assert_eq!((d.len(), d.dim()), (2, 784));
    assert_eq!(d.image(1)[0], ((784 * 7) % 256) as f64 / 255.0);
}

#[test]
fn empty_pair_is_rejected() {
    assert!(matches!(load("empty-images.idx3", "empty-labels.idx1"), Err(DataError::Empty)));
}

#[test]
fn bad_magic() {
    let e = load("bad-magic-images.idx3", "one-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::BadMagic { found: 0x0801, .. }), "{e}");
    let e = load("one-images.idx3", "bad-magic-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::BadMagic { found: 0x0803, .. }), "{e}");
}

#[test]
fn truncated_files() {
    let e = load("truncated-images.idx3", "ok3-labels.idx1").unwrap_err();
    assert!(
        matches!(e, DataError::Truncated { declared: 28, actual: 27, .. }),
        "{e}"
    );
    let e = load("ok3-images.idx3", "truncated-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::Truncated { declared: 11, actual: 10, .. }), "{e}");
    let e = load("short-header-images.idx3", "one-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::Truncated { declared: 16, actual: 8, .. }), "{e}");
}

#[test]
fn trailing_bytes() {
    let e = load("trailing-images.idx3", "one-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::TrailingBytes { extra: 1, .. }), "{e}");
}

#[test]
fn count_mismatch() {
    let e = load("ok3-images.idx3", "four-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::CountMismatch { images: 3, labels: 4 }), "{e}");
}

#[test]
fn label_out_of_range() {
    let e = load("ok3-images.idx3", "label-range-labels.idx1").unwrap_err();
    assert!(matches!(e, DataError::LabelRange { index: 1, label: 10, .. }), "{e}");
}

#[test]
fn huge_declared_count_does_not_allocate() {
    let mut images = bytes("one-images.idx3");
    images[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
    images[8..12].copy_from_slice(&u32::MAX.to_be_bytes());
    let e = dataset_from_idx(&images, &bytes("one-labels.idx1")).unwrap_err();
    assert!(matches!(e, DataError::Truncated { .. }), "{e}");
}

#[test]
fn missing_file_reports_path() {
    let e = load("nope.idx3", "one-labels.idx1").unwrap_err();
    match e {
        DataError::Io { path, .. } => assert!(path.ends_with("nope.idx3")),
        other => panic!("unexpected {other}"),
    }
}
