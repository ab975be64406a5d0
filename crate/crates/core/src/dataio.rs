//! LIBSVM loading, deterministic splits and mini-batch plans.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("input contains no samples")]
    Empty,
    #[error("dataset needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("invalid split fractions: validation {val}, test {test}")]
    InvalidFractions { val: f64, test: f64 },
    #[error("invalid batch size {batch} for {n} samples")]
    InvalidBatchSize { batch: usize, n: usize },
    #[error("label {0} does not appear in the training label set")]
    UnknownLabel(i64),
    #[error("cache: {0}")]
    Cache(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Dense feature matrix with contiguous class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if n_classes < 2 {
            return Err(DataError::TooFewClasses(n_classes));
        }
        assert_eq!(features.nrows(), labels.len(), "row count must match label count");
        assert!(labels.iter().all(|&y| y < n_classes), "label out of range");
        Ok(Self { features, labels, n_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split,
        }
    }

    /// Feature rows and labels for a batch of indices.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Rows of a LIBSVM file before label remapping.
#[derive(Debug, Clone, Default)]
pub struct RawLibsvm {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub labels: Vec<i64>,
    /// Largest 1-based feature index seen.
    pub dim: usize,
}

fn parse_label(tok: &str, line: usize) -> Result<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Ok(v);
    }
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 => Ok(v as i64),
        _ => Err(DataError::Parse { line, msg: format!("bad label {tok:?}") }),
    }
}

pub fn parse_libsvm_raw(text: &str) -> Result<RawLibsvm> {
    let mut raw = RawLibsvm::default();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label = parse_label(toks.next().unwrap_or_default(), line_no)?;
        let mut row = Vec::new();
        let mut prev = 0usize;
        for tok in toks {
            let err = |msg: String| DataError::Parse { line: line_no, msg };
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected <index>:<value>, got {tok:?}")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("bad index {idx:?}")))?;
            let val: f64 = val.parse().map_err(|_| err(format!("bad value {val:?}")))?;
            if idx == 0 {
                return Err(err("indices are 1-based".into()));
            }
            if idx <= prev {
                return Err(err(format!("index {idx} not greater than previous {prev}")));
            }
            if !val.is_finite() {
                return Err(err(format!("non-finite value {val}")));
            }
            prev = idx;
            row.push((idx, val));
        }
        raw.dim = raw.dim.max(prev);
        raw.rows.push(row);
        raw.labels.push(label);
    }
    if raw.rows.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(raw)
}

/// Sorted original label values; position is the class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap(pub Vec<i64>);

impl LabelMap {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a i64>) -> Self {
        let set: BTreeSet<i64> = labels.into_iter().copied().collect();
        LabelMap(set.into_iter().collect())
    }

    pub fn class_of(&self, label: i64) -> Option<usize> {
        self.0.binary_search(&label).ok()
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }
}

impl RawLibsvm {
    pub fn into_dataset(self, map: &LabelMap, dim: usize, split: SplitTag) -> Result<Dataset> {
        let n = self.rows.len();
        let mut features = Array2::zeros((n, dim.max(self.dim)));
        for (r, row) in self.rows.iter().enumerate() {
            for &(idx, val) in row {
                features[[r, idx - 1]] = val;
            }
        }
        let labels = self
            .labels
            .iter()
            .map(|&l| map.class_of(l).ok_or(DataError::UnknownLabel(l)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(features, labels, map.n_classes(), split)
    }
}

/// Parses one LIBSVM document into a training-tagged dataset.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let raw = parse_libsvm_raw(text)?;
    let map = LabelMap::from_labels(&raw.labels);
    let dim = raw.dim;
    raw.into_dataset(&map, dim, SplitTag::Train)
}

/// Writes LIBSVM text with class ids as labels. Zero entries are omitted
/// except the last column of the first row, which keeps the width stable
/// on reparse.
pub fn to_libsvm(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    for (r, row) in ds.features.outer_iter().enumerate() {
        write!(out, "{}", ds.labels[r]).unwrap();
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 || (r == 0 && j + 1 == d) {
                write!(out, " {}:{}", j + 1, v).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.into(), source })
}

/// Train / validation / test triple.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Loads predefined LIBSVM splits with a label map and width shared across
/// all files. Missing validation/test files are carved out of the training
/// file with [`split_dataset`].
pub fn load_splits(
    train: &Path,
    validation: Option<&Path>,
    test: Option<&Path>,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<DataSplits> {
    let raw_train = parse_libsvm_raw(&read(train)?)?;
    let raw_val = validation.map(|p| read(p).and_then(|t| parse_libsvm_raw(&t))).transpose()?;
    let raw_test = test.map(|p| read(p).and_then(|t| parse_libsvm_raw(&t))).transpose()?;

    let all = [Some(&raw_train), raw_val.as_ref(), raw_test.as_ref()];
    let map = LabelMap::from_labels(all.iter().flatten().flat_map(|r| r.labels.iter()));
    let dim = all.iter().flatten().map(|r| r.dim).max().unwrap_or(0);

    let train_ds = raw_train.into_dataset(&map, dim, SplitTag::Train)?;
    match (raw_val, raw_test) {
        (Some(v), Some(t)) => Ok(DataSplits {
            train: train_ds,
            validation: v.into_dataset(&map, dim, SplitTag::Validation)?,
            test: t.into_dataset(&map, dim, SplitTag::Test)?,
        }),
        (Some(v), None) => {
            let (tr, _, te) = split_dataset(&train_ds, f64::MIN_POSITIVE, test_frac, seed)?;
            Ok(DataSplits { train: tr, validation: v.into_dataset(&map, dim, SplitTag::Validation)?, test: te })
        }
        (None, Some(t)) => {
            let (tr, va, _) = split_dataset(&train_ds, val_frac, f64::MIN_POSITIVE, seed)?;
            Ok(DataSplits { train: tr, validation: va, test: t.into_dataset(&map, dim, SplitTag::Test)? })
        }
        (None, None) => {
            let (train, validation, test) = split_dataset(&train_ds, val_frac, test_frac, seed)?;
            Ok(DataSplits { train, validation, test })
        }
    }
}

/// Seeded disjoint partition into (train, validation, test). Validation and
/// test get `floor(N * frac)` rows each; train keeps the rest.
pub fn split_dataset(
    ds: &Dataset,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(val_frac) || !ok(test_frac) || val_frac + test_frac >= 1.0 {
        return Err(DataError::InvalidFractions { val: val_frac, test: test_frac });
    }
    let n = ds.len();
    let n_val = (n as f64 * val_frac).floor() as usize;
    let n_test = (n as f64 * test_frac).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_from(seed));
    let (val, rest) = idx.split_at(n_val);
    let (test, train) = rest.split_at(n_test);
    Ok((
        ds.subset(train, SplitTag::Train),
        ds.subset(val, SplitTag::Validation),
        ds.subset(test, SplitTag::Test),
    ))
}

/// Fixed partition of sample indices into mini-batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
}

impl BatchPlan {
    /// Shuffles `0..n` and cuts it into `ceil(n / batch_size)` batches; only
    /// the last may be short.
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(DataError::InvalidBatchSize { batch: batch_size, n });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::rng_from(seed));
        let batches = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(Self { batch_size, batches, seed })
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn n_samples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

pub fn make_batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    BatchPlan::new(ds.len(), batch_size, seed)
}

/// Per-column z-score parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero variance are only centered.
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len() as f64;
        let mean = ds.features.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let scale = ds
            .features
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, &m)| {
                let var = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for mut row in ds.features.outer_iter_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn apply_all(splits: &mut DataSplits) -> Self {
        let st = Self::fit(&splits.train);
        st.apply(&mut splits.train);
        st.apply(&mut splits.validation);
        st.apply(&mut splits.test);
        st
    }
}

/// JSON header of the binary dataset cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub n: usize,
    pub d: usize,
    pub n_classes: usize,
    pub splits: Vec<(SplitTag, usize)>,
}

fn cache_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (prefix.with_extension("json"), prefix.with_extension("bin"))
}

/// Writes `<prefix>.json` and `<prefix>.bin`. The body is little-endian f32,
/// one record per sample: `d` features followed by the class id.
pub fn write_cache(prefix: &Path, splits: &DataSplits) -> Result<()> {
    let parts = [&splits.train, &splits.validation, &splits.test];
    let header = CacheHeader {
        n: parts.iter().map(|p| p.len()).sum(),
        d: splits.train.dim(),
        n_classes: splits.train.n_classes,
        splits: parts.iter().map(|p| (p.split, p.len())).collect(),
    };
    let mut body = Vec::with_capacity(header.n * (header.d + 1) * 4);
    for part in parts {
        for (row, &y) in part.features.outer_iter().zip(&part.labels) {
            for &x in row {
                body.extend_from_slice(&(x as f32).to_le_bytes());
            }
            body.extend_from_slice(&(y as f32).to_le_bytes());
        }
    }
    let (hp, bp) = cache_paths(prefix);
    fs::write(&hp, serde_json::to_vec_pretty(&header).expect("header serializes"))
        .map_err(|source| DataError::Io { path: hp.clone(), source })?;
    fs::write(&bp, body).map_err(|source| DataError::Io { path: bp.clone(), source })
}

pub fn read_cache(prefix: &Path) -> Result<DataSplits> {
    let (hp, bp) = cache_paths(prefix);
    let header: CacheHeader = serde_json::from_str(&read(&hp)?)
        .map_err(|e| DataError::Cache(format!("{}: {e}", hp.display())))?;
    let body = fs::read(&bp).map_err(|source| DataError::Io { path: bp.clone(), source })?;
    let stride = header.d + 1;
    if body.len() != header.n * stride * 4 || header.splits.len() != 3 {
        return Err(DataError::Cache(format!("{} does not match its header", bp.display())));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut offset = 0;
    let mut parts = Vec::with_capacity(3);
    for &(tag, len) in &header.splits {
        let mut features = Array2::zeros((len, header.d));
        let mut labels = Vec::with_capacity(len);
        for r in 0..len {
            let rec = &values[(offset + r) * stride..(offset + r + 1) * stride];
            for j in 0..header.d {
                features[[r, j]] = f64::from(rec[j]);
            }
            let y = rec[header.d];
            if y < 0.0 || y.fract() != 0.0 || y as usize >= header.n_classes {
                return Err(DataError::Cache(format!("bad label {y} in record {}", offset + r)));
            }
            labels.push(y as usize);
        }
        offset += len;
        parts.push(Dataset::new(features, labels, header.n_classes, tag)?);
    }
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(DataSplits { train, validation, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn toy(n: usize) -> Dataset {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::new(features, labels, 2, SplitTag::Train).unwrap()
    }

    #[test]
    fn parses_sparse_rows_and_remaps_labels() {
        let ds = parse_libsvm("1 1:0.5 3:1.0\n2 2:0.25").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.features, array![[0.5, 0.0, 1.0], [0.0, 0.25, 0.0]]);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.n_classes, 2);
    }

    #[test]
    fn remapping_follows_sorted_label_values() {
        let ds = parse_libsvm("7 1:1\n-1 1:2\n3 1:3\n-1 1:4").unwrap();
        assert_eq!(ds.labels, vec![2, 0, 1, 0]);
        assert_eq!(ds.n_classes, 3);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        match parse_libsvm("1 3:a") {
            Err(DataError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_libsvm("1 1:1\n\n2 3:1 2:1") {
            Err(DataError::Parse { line: 3, msg }) => assert!(msg.contains("not greater")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_libsvm("x 1:1"), Err(DataError::Parse { line: 1, .. })));
        assert!(matches!(parse_libsvm("1 0:1"), Err(DataError::Parse { .. })));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse_libsvm(""), Err(DataError::Empty)));
        assert!(matches!(parse_libsvm("\n  \n"), Err(DataError::Empty)));
        assert!(matches!(parse_libsvm("1 1:1\n1 2:1"), Err(DataError::TooFewClasses(1))));
    }

    #[test]
    fn split_sizes_use_floor() {
        let (tr, va, te) = split_dataset(&toy(10), 0.1, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));

        let big = Dataset::new(Array2::zeros((67_557, 1)), (0..67_557).map(|i| i % 3).collect(), 3, SplitTag::Train)
            .unwrap();
        let (tr, va, te) = split_dataset(&big, 0.1, 0.2, 0).unwrap();
        assert_eq!((va.len(), te.len(), tr.len()), (6755, 13_511, 47_291));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = toy(50);
        let a = split_dataset(&ds, 0.1, 0.2, 9).unwrap();
        let b = split_dataset(&ds, 0.1, 0.2, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        // first feature is 2*i, so it identifies the row
        let mut seen: Vec<usize> = [&a.0, &a.1, &a.2]
            .iter()
            .flat_map(|d| d.features.column(0).iter().map(|&x| x as usize / 2).collect::<Vec<_>>())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_fractions_rejected() {
        let ds = toy(10);
        for (v, t) in [(0.0, 0.2), (0.5, 0.5), (1.2, 0.1), (0.1, -0.1)] {
            assert!(matches!(split_dataset(&ds, v, t, 0), Err(DataError::InvalidFractions { .. })));
        }
    }

    #[test]
    fn batch_counts() {
        let p = BatchPlan::new(100, 20, 1).unwrap();
        assert_eq!(p.n_batches(), 5);
        assert!(p.batches.iter().all(|b| b.len() == 20));

        let p = BatchPlan::new(101, 20, 1).unwrap();
        assert_eq!(p.n_batches(), 6);
        assert_eq!(p.batches.last().unwrap().len(), 1);

        let p = BatchPlan::new(5, 5, 1).unwrap();
        assert_eq!(p.n_batches(), 1);
        let mut only = p.batches[0].clone();
        only.sort_unstable();
        assert_eq!(only, vec![0, 1, 2, 3, 4]);

        assert!(BatchPlan::new(5, 0, 1).is_err());
        assert!(BatchPlan::new(5, 6, 1).is_err());
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let mut splits = DataSplits {
            train: Dataset::new(array![[1.0, 5.0], [3.0, 5.0]], vec![0, 1], 2, SplitTag::Train).unwrap(),
            validation: Dataset::new(array![[5.0, 6.0]], vec![0], 2, SplitTag::Validation).unwrap(),
            test: Dataset::new(array![[2.0, 5.0]], vec![1], 2, SplitTag::Test).unwrap(),
        };
        Standardizer::apply_all(&mut splits);
        assert_eq!(splits.train.features, array![[-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(splits.validation.features, array![[3.0, 1.0]]);
        assert_eq!(splits.test.features, array![[0.0, 0.0]]);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let splits = DataSplits {
            train: Dataset::new(array![[0.5, -1.0], [2.0, 0.0]], vec![0, 2], 3, SplitTag::Train).unwrap(),
            validation: Dataset::new(array![[1.0, 1.0]], vec![1], 3, SplitTag::Validation).unwrap(),
            test: Dataset::new(array![[0.25, 4.0]], vec![2], 3, SplitTag::Test).unwrap(),
        };
        let prefix = dir.path().join("toy");
        write_cache(&prefix, &splits).unwrap();
        let back = read_cache(&prefix).unwrap();
        assert_eq!(back.train, splits.train);
        assert_eq!(back.validation, splits.validation);
        assert_eq!(back.test, splits.test);
        let header: CacheHeader =
            serde_json::from_str(&fs::read_to_string(prefix.with_extension("json")).unwrap()).unwrap();
        assert_eq!(header.n, 4);
        assert_eq!(header.splits[1], (SplitTag::Validation, 1));
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 1usize..300, b in 1usize..64, seed in any::<u64>()) {
            prop_assume!(b <= n);
            let plan = BatchPlan::new(n, b, seed).unwrap();
            prop_assert_eq!(plan.n_batches(), n.div_ceil(b));
            let mut all: Vec<usize> = plan.batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for batch in &plan.batches[..plan.n_batches() - 1] {
                prop_assert_eq!(batch.len(), b);
            }
            prop_assert_eq!(plan, BatchPlan::new(n, b, seed).unwrap());
        }

        #[test]
        fn libsvm_round_trip(
            rows in prop::collection::vec(
                (0usize..3, prop::collection::vec(prop_oneof![Just(0.0), -10.0f64..10.0], 4)),
                2..20,
            )
        ) {
            let mut rows = rows;
            rows[0].0 = 0;
            rows[1].0 = 1;
            let n = rows.len();
            let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let n_classes = labels.iter().max().unwrap() + 1;
            let features = Array2::from_shape_fn((n, 4), |(i, j)| rows[i].1[j]);
            let ds = Dataset::new(features, labels, n_classes, SplitTag::Train).unwrap();
            let back = parse_libsvm(&to_libsvm(&ds)).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
