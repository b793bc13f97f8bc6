//! Datasets: delimited text and IDX image files, preprocessing and
//! train/validation/test splits.

use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Example;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Smallest standard deviation (or maximum) used as a divisor.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Tabular,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessKind {
    None,
    Standardize,
    Scale01,
}

impl std::str::FromStr for PreprocessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "standardize" => Ok(Self::Standardize),
            "scale01" => Ok(Self::Scale01),
            other => Err(Error::InvalidConfig(format!("unknown preprocessing `{other}`"))),
        }
    }
}

/// Applied transform `x' = (x - offset) / scale`, per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub kind: PreprocessKind,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "last" => LabelColumn::Last,
            _ => match s.parse() {
                Ok(i) => LabelColumn::Index(i),
                Err(_) => LabelColumn::Name(s.to_string()),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    features: Tensor<T>,
    labels: Vec<usize>,
    label_names: Vec<String>,
    source: SourceKind,
    split: Option<Split>,
    preprocessing: Preprocessing,
}

impl<T: Real> Dataset<T> {
    pub fn new(rows: Vec<Vec<T>>, labels: Vec<usize>, label_names: Vec<String>, source: SourceKind) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty);
        }
        if rows.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: rows.len(),
                labels: labels.len(),
            });
        }
        if label_names.len() < 2 {
            return Err(Error::InvalidConfig("a dataset needs at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: label_names.len(),
            });
        }
        let m = rows[0].len();
        let features = Tensor::from_rows(&rows)?;
        Ok(Self {
            features,
            labels,
            label_names,
            source,
            split: None,
            preprocessing: Preprocessing {
                kind: PreprocessKind::None,
                offset: vec![0.0; m],
                scale: vec![1.0; m],
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[T] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn split_indices(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn example(&self, i: usize) -> Example<'_, T> {
        Example::new(self.x(i), self.labels[i])
    }

    pub fn examples(&self, indices: &[usize]) -> Vec<Example<'_, T>> {
        indices.iter().map(|&i| self.example(i)).collect()
    }

    pub fn all_examples(&self) -> Vec<Example<'_, T>> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    fn part(&self, pick: impl Fn(&Split) -> &Vec<usize>) -> Result<Vec<Example<'_, T>>> {
        Ok(self.examples(pick(self.split.as_ref().ok_or(Error::NoSplit)?)))
    }

    pub fn train(&self) -> Result<Vec<Example<'_, T>>> {
        self.part(|s| &s.train)
    }

    pub fn val(&self) -> Result<Vec<Example<'_, T>>> {
        self.part(|s| &s.val)
    }

    pub fn test(&self) -> Result<Vec<Example<'_, T>>> {
        self.part(|s| &s.test)
    }

    /// Assigns an explicit split after checking it partitions `[0, N)`.
    pub fn with_split(mut self, split: Split) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= self.len() || seen[i] {
                return Err(Error::InvalidConfig(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig("split does not cover every sample".into()));
        }
        self.split = Some(split);
        Ok(self)
    }

    /// Seeded shuffle into test (`⌊N/5⌋`), validation (`⌊(N - test)/4⌋`) and
    /// training (the rest). Index lists are returned sorted.
    pub fn split(self, seed: u64) -> Result<Self> {
        let n = self.len();
        if n < 5 {
            return Err(Error::TooSmall(n, 5));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut SeededRng::new(seed));
        let n_test = n / 5;
        let n_val = (n - n_test) / 4;
        let mut test = idx[..n_test].to_vec();
        let mut val = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        test.sort_unstable();
        val.sort_unstable();
        train.sort_unstable();
        self.with_split(Split { train, val, test })
    }

    /// Standardisation uses training statistics only; `scale01` divides images
    /// by 255 and tabular features by their largest absolute training value.
    pub fn preprocess(mut self, kind: PreprocessKind) -> Result<Self> {
        let m = self.dim();
        let (offset, scale) = match kind {
            PreprocessKind::None => (vec![0.0; m], vec![1.0; m]),
            PreprocessKind::Scale01 if self.source == SourceKind::Image => (vec![0.0; m], vec![255.0; m]),
            PreprocessKind::Scale01 => {
                let rows = self.stat_rows();
                let scale = (0..m)
                    .map(|j| {
                        rows.iter()
                            .map(|&i| self.features.at(i, j).as_f64().abs())
                            .fold(0.0, f64::max)
                            .max(SCALE_FLOOR)
                    })
                    .collect();
                (vec![0.0; m], scale)
            }
            PreprocessKind::Standardize => {
                let rows = self.split.as_ref().ok_or(Error::NoSplit)?.train.clone();
                let nf = rows.len() as f64;
                let mut mean = vec![0.0; m];
                let mut sd = vec![0.0; m];
                for j in 0..m {
                    let mu = rows.iter().map(|&i| self.features.at(i, j).as_f64()).sum::<f64>() / nf;
                    let var = rows
                        .iter()
                        .map(|&i| (self.features.at(i, j).as_f64() - mu).powi(2))
                        .sum::<f64>()
                        / nf;
                    mean[j] = mu;
                    sd[j] = var.sqrt().max(SCALE_FLOOR);
                }
                (mean, sd)
            }
        };
        let cols = m;
        for (k, v) in self.features.data_mut().iter_mut().enumerate() {
            let j = k % cols;
            *v = T::lit((v.as_f64() - offset[j]) / scale[j]);
        }
        self.preprocessing = Preprocessing { kind, offset, scale };
        Ok(self)
    }

    fn stat_rows(&self) -> Vec<usize> {
        match &self.split {
            Some(s) => s.train.clone(),
            None => (0..self.len()).collect(),
        }
    }

    /// Writes features followed by the label name, one sample per row.
    pub fn write_delimited(&self, path: impl AsRef<Path>, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(BufWriter::new(File::create(path)?));
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x(i).iter().map(|v| v.as_f64().to_string()).collect();
            rec.push(self.label_names[self.labels[i]].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a delimited text file. Every column except the label column must be
/// numeric; labels are mapped to class indices in order of first appearance.
pub fn load_delimited<T: Real>(
    path: impl AsRef<Path>,
    label_column: &LabelColumn,
    delimiter: u8,
    has_header: bool,
) -> Result<Dataset<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let records: Vec<csv::StringRecord> = reader
        .records()
        .filter(|r| r.as_ref().map_or(true, |r| !(r.len() == 1 && r[0].is_empty())))
        .collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Empty);
    }
    let width = header.as_ref().map_or(records[0].len(), Vec::len);
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Last => width - 1,
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::Missing {
                what: "label column",
                name: name.clone(),
            })?,
    };
    if label_idx >= width {
        return Err(Error::Missing {
            what: "label column",
            name: label_idx.to_string(),
        });
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut names: Vec<String> = Vec::new();
    let row_offset = if has_header { 2 } else { 1 };
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::RaggedRow {
                row: r + row_offset,
                expected: width,
                got: rec.len(),
            });
        }
        let mut row = Vec::with_capacity(width - 1);
        for (c, cell) in rec.iter().enumerate() {
            if c == label_idx {
                let pos = match names.iter().position(|n| n == cell) {
                    Some(p) => p,
                    None => {
                        names.push(cell.to_string());
                        names.len() - 1
                    }
                };
                labels.push(pos);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    row: r + row_offset,
                    column: c,
                    value: cell.to_string(),
                })?;
                row.push(T::lit(v));
            }
        }
        rows.push(row);
    }
    if names.len() < 2 {
        return Err(Error::InvalidConfig(format!("label column has {} distinct value(s)", names.len())));
    }
    Dataset::new(rows, labels, names, SourceKind::Tabular)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        std::io::BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, what: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{}: header", what.display())))
}

/// Loads an IDX image file and its label file. Images are flattened row-major
/// to raw byte values; class indices are the label bytes themselves.
pub fn load_idx<T: Real>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_maybe_gz(ip)?;
    let lab = read_maybe_gz(lp)?;
    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let nl = be_u32(&lab, 4, lp)? as usize;
    if n != nl {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let m = rows * cols;
    let pixels = img
        .get(16..16 + n * m)
        .ok_or_else(|| Error::Truncated(format!("{}: expected {} pixel bytes", ip.display(), n * m)))?;
    let labels: Vec<usize> = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::Truncated(format!("{}: expected {n} labels", lp.display())))?
        .iter()
        .map(|&b| b as usize)
        .collect();
    if n == 0 {
        return Err(Error::Empty);
    }
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    let data: Vec<Vec<T>> = pixels
        .chunks(m)
        .map(|c| c.iter().map(|&b| T::lit(b as f64)).collect())
        .collect();
    Dataset::new(data, labels, (0..classes).map(|c| c.to_string()).collect(), SourceKind::Image)
}

/// Two interleaving half circles with Gaussian noise, labels alternating
/// between the upper (0) and lower (1) moon.
pub fn make_moons<T: Real>(n: usize, noise: f64, seed: u64) -> Result<Dataset<T>> {
    let mut rng = SeededRng::new(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = std::f64::consts::PI * rng.uniform(0.0, 1.0);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        rows.push(vec![T::lit(x + normal.sample(&mut rng)), T::lit(y + normal.sample(&mut rng))]);
        labels.push(label);
    }
    Dataset::new(rows, labels, vec!["0".into(), "1".into()], SourceKind::Tabular)
}

/// Isotropic Gaussian clusters, one per center, assigned round-robin.
pub fn make_blobs<T: Real>(n: usize, centers: &[Vec<f64>], spread: f64, seed: u64) -> Result<Dataset<T>> {
    let mut rng = SeededRng::new(seed);
    let normal = Normal::new(0.0, spread.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers.len();
        rows.push(centers[c].iter().map(|&v| T::lit(v + normal.sample(&mut rng))).collect());
        labels.push(c);
    }
    Dataset::new(rows, labels, (0..centers.len()).map(|c| c.to_string()).collect(), SourceKind::Tabular)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize) -> Dataset<f64> {
        let rows = (0..n).map(|i| vec![i as f64, (i * i) as f64]).collect();
        Dataset::new(rows, (0..n).map(|i| i % 2).collect(), vec!["a".into(), "b".into()], SourceKind::Tabular).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = toy(100).split(1).unwrap();
        let sp = s.split_indices().unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (60, 20, 20));
        let s = toy(10).split(1).unwrap();
        let sp = s.split_indices().unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (6, 2, 2));
        assert_eq!(toy(10).split(3).unwrap(), toy(10).split(3).unwrap());
        assert!(matches!(toy(4).split(0), Err(Error::TooSmall(4, 5))));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 5usize..400, seed in 0u64..1000) {
            let s = toy(n).split(seed).unwrap();
            let sp = s.split_indices().unwrap();
            let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(sp.test.len(), n / 5);
            prop_assert_eq!(sp.val.len(), (n - n / 5) / 4);
        }
    }

    #[test]
    fn standardize_uses_train_only() {
        let ds = toy(50).split(7).unwrap();
        let train = ds.split_indices().unwrap().train.clone();
        let st = ds.clone().preprocess(PreprocessKind::Standardize).unwrap();
        for j in 0..2 {
            let vals: Vec<f64> = train.iter().map(|&i| st.x(i)[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(mean.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
        // perturbing a test sample leaves the statistics unchanged
        let test0 = ds.split_indices().unwrap().test[0];
        let mut rows: Vec<Vec<f64>> = (0..50).map(|i| ds.x(i).to_vec()).collect();
        rows[test0][0] = 1e6;
        let other = Dataset::new(rows, ds.labels().to_vec(), ds.label_names().to_vec(), SourceKind::Tabular)
            .unwrap()
            .with_split(ds.split_indices().unwrap().clone())
            .unwrap()
            .preprocess(PreprocessKind::Standardize)
            .unwrap();
        assert_eq!(other.preprocessing(), st.preprocessing());
        assert!(matches!(toy(10).preprocess(PreprocessKind::Standardize), Err(Error::NoSplit)));
    }

    #[test]
    fn constant_feature_standardizes_to_zero() {
        let rows = (0..10).map(|i| vec![3.0, i as f64]).collect();
        let ds = Dataset::new(rows, (0..10).map(|i| i % 2).collect(), vec!["0".into(), "1".into()], SourceKind::Tabular)
            .unwrap()
            .split(0)
            .unwrap()
            .preprocess(PreprocessKind::Standardize)
            .unwrap();
        assert!((0..10).all(|i| ds.x(i)[0] == 0.0));
    }

    #[test]
    fn scale01_images() {
        let ds = Dataset::new(
            vec![vec![0.0, 255.0], vec![255.0, 0.0]],
            vec![0, 1],
            vec!["0".into(), "1".into()],
            SourceKind::Image,
        )
        .unwrap()
        .preprocess(PreprocessKind::Scale01)
        .unwrap();
        assert_eq!(ds.x(0), &[0.0, 1.0]);
        assert_eq!(ds.x(1), &[1.0, 0.0]);
    }

    #[test]
    fn moons_are_balanced_and_reproducible() {
        let a: Dataset<f64> = make_moons(100, 0.1, 3).unwrap();
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 50);
        assert_eq!(a, make_moons(100, 0.1, 3).unwrap());
        assert_ne!(a, make_moons(100, 0.1, 4).unwrap());
    }
}
