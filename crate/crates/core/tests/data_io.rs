use std::io::Write;
use std::path::PathBuf;

use robustnet::data::{load_delimited, load_idx, Dataset, LabelColumn, PreprocessKind, SourceKind};
use robustnet::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p
}

#[test]
fn three_row_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_tmp(&dir, "d.csv", "1,2,a\n3,4,b\n5,6,a\n");
    let ds: Dataset<f64> = load_delimited(&p, &LabelColumn::Last, b',', false).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.class_count()), (3, 2, 2));
    assert_eq!(ds.labels(), &[0, 1, 0]);
    assert_eq!(ds.label_names(), &["a".to_string(), "b".to_string()]);
    assert_eq!(ds.x(2), &[5.0, 6.0]);
}

#[test]
fn header_and_named_label_column() {
    let ds: Dataset<f64> = load_delimited(fixture("iris-mini.csv"), &LabelColumn::Name("species".into()), b',', true).unwrap();
    assert_eq!((ds.len(), ds.dim()), (5, 2));
    assert_eq!(ds.labels(), &[0, 1, 0, 1, 0]);
    assert_eq!(ds.x(1), &[7.0, 3.2]);

    let dir = tempfile::tempdir().unwrap();
    let p = write_tmp(&dir, "t.tsv", "y\tf\nno\t0.5\nyes\t-1.5\n");
    let ds: Dataset<f32> = load_delimited(&p, &LabelColumn::Index(0), b'\t', true).unwrap();
    assert_eq!(ds.x(1), &[-1.5f32]);
    assert_eq!(ds.labels(), &[0, 1]);
}

#[test]
fn loader_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_delimited::<f64>(dir.path().join("nope.csv"), &LabelColumn::Last, b',', false),
        Err(Error::MissingFile(_))
    ));
    let empty = write_tmp(&dir, "e.csv", "");
    assert!(matches!(load_delimited::<f64>(&empty, &LabelColumn::Last, b',', false), Err(Error::Empty)));
    let bad = write_tmp(&dir, "b.csv", "1,2,a\n3,x,b\n");
    assert!(matches!(
        load_delimited::<f64>(&bad, &LabelColumn::Last, b',', false),
        Err(Error::NonNumeric { row: 2, column: 1, .. })
    ));
    let ragged = write_tmp(&dir, "r.csv", "1,2,a\n3,b\n");
    assert!(matches!(
        load_delimited::<f64>(&ragged, &LabelColumn::Last, b',', false),
        Err(Error::RaggedRow { row: 2, expected: 3, got: 2 })
    ));
    assert!(matches!(
        load_delimited::<f64>(fixture("iris-mini.csv"), &LabelColumn::Name("colour".into()), b',', true),
        Err(Error::Missing { .. })
    ));
}

#[test]
fn delimited_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        vec![0.1, -1e-300, 123456789.12345679],
        vec![std::f64::consts::PI, 2.0f64.sqrt(), -0.0],
        vec![1.0 / 3.0, 5e300, 7.0],
    ];
    let ds = Dataset::new(rows, vec![1, 0, 1], vec!["neg".into(), "pos".into()], SourceKind::Tabular).unwrap();
    let p = dir.path().join("rt.csv");
    ds.write_delimited(&p, b',').unwrap();
    let back: Dataset<f64> = load_delimited(&p, &LabelColumn::Last, b',', false).unwrap();
    for i in 0..3 {
        for (a, b) in ds.x(i).iter().zip(back.x(i)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    assert_eq!(back.label_names()[back.labels()[0]], "pos");
}

#[test]
fn idx_fixture_matches_bytes() {
    let ds: Dataset<f64> = load_idx(fixture("tiny-images.idx"), fixture("tiny-labels.idx")).unwrap();
    assert_eq!((ds.len(), ds.dim()), (2, 4));
    assert_eq!(ds.x(0), &[0.0, 255.0, 17.0, 34.0]);
    assert_eq!(ds.x(1), &[1.0, 2.0, 3.0, 255.0]);
    assert_eq!(ds.labels(), &[3, 7]);
    assert_eq!(ds.class_count(), 8);

    let gz: Dataset<f64> = load_idx(fixture("tiny-images.idx.gz"), fixture("tiny-labels.idx.gz")).unwrap();
    assert_eq!(gz, ds);

    let scaled = ds.preprocess(PreprocessKind::Scale01).unwrap();
    assert_eq!(scaled.x(0)[1], 1.0);
    assert_eq!(scaled.x(0)[0], 0.0);
}

#[test]
fn idx_errors() {
    assert!(matches!(
        load_idx::<f64>(fixture("bad-magic-images.idx"), fixture("tiny-labels.idx")),
        Err(Error::BadMagic { expected: 0x803, found: 0x802 })
    ));
    assert!(matches!(
        load_idx::<f64>(fixture("truncated-images.idx"), fixture("tiny-labels.idx")),
        Err(Error::Truncated(_))
    ));
    assert!(matches!(
        load_idx::<f64>(fixture("tiny-images.idx"), fixture("three-labels.idx")),
        Err(Error::CountMismatch { images: 2, labels: 3 })
    ));
    assert!(matches!(
        load_idx::<f64>(fixture("tiny-labels.idx"), fixture("tiny-labels.idx")),
        Err(Error::BadMagic { .. })
    ));
}
