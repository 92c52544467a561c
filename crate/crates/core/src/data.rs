//! Datasets: CSV ingestion, min-max normalization, splitting, duplication of
//! small training sets, synthetic generators and a binary cache format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DenseMatrix,
    /// Class ids `0..n_classes`.
    pub labels: Vec<usize>,
    pub feature_names: Option<Vec<String>>,
    /// Columns that carry the label signal, for synthetic data.
    pub planted: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Input("dataset has no rows".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Input(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_names: None,
            planted: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// `max label + 1`, at least 2.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(2, |&m| (m + 1).max(2))
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_names: self.feature_names.clone(),
            planted: self.planted.clone(),
        }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_features(&self, cols: &[usize]) -> Result<Dataset> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.n_features()) {
            return Err(Error::Input(format!("feature {c} out of range for {} columns", self.n_features())));
        }
        Ok(Dataset {
            features: self.features.select_cols(cols),
            labels: self.labels.clone(),
            feature_names: self
                .feature_names
                .as_ref()
                .map(|n| cols.iter().map(|&c| n[c].clone()).collect()),
            planted: self
                .planted
                .as_ref()
                .map(|p| cols.iter().enumerate().filter(|(_, c)| p.contains(c)).map(|(i, _)| i).collect()),
        })
    }
}

/// Reads a numeric CSV file. `label_column` defaults to the last column.
/// Line numbers in errors are 1-based and count the header.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<usize>, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let parse_err = |row: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };

    let names = if header {
        Some(
            reader
                .headers()
                .map_err(|e| parse_err(1, e.to_string()))?
                .iter()
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut width = names.as_ref().map(Vec::len);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut label_col = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(parse_err(line, format!("expected {w} fields, found {}", rec.len())));
        }
        let lc = *label_col.get_or_insert(label_column.unwrap_or(w.saturating_sub(1)));
        if lc >= w {
            return Err(parse_err(line, format!("label column {lc} out of range for {w} fields")));
        }
        for (j, field) in rec.iter().enumerate() {
            if j == lc {
                let y: usize = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("label {field:?} is not a non-negative integer")))?;
                labels.push(y);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("field {} ({field:?}) is not numeric", j + 1)))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("field {} is not finite", j + 1)));
                }
                values.push(v);
            }
        }
    }
    let rows = labels.len();
    if rows == 0 {
        return Err(Error::Input(format!("{} contains no data rows", path.display())));
    }
    let cols = values.len() / rows;
    let mut ds = Dataset::new(DenseMatrix::from_vec(rows, cols, values)?, labels)?;
    if let (Some(mut n), Some(lc)) = (names, label_col) {
        n.remove(lc);
        ds.feature_names = Some(n);
    }
    Ok(ds)
}

/// Per-column min-max scaling fitted on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(x: &DenseMatrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Input("cannot fit normalization on zero rows".into()));
        }
        let mut min = x.row(0).to_vec();
        let mut max = min.clone();
        for r in 1..x.rows() {
            for (j, &v) in x.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// Maps each column to `[0, 1]`, clipping out-of-range values; constant
    /// columns map to 0.
    pub fn apply(&self, x: &mut DenseMatrix) -> Result<()> {
        let cols = x.cols();
        if cols != self.min.len() {
            return Err(Error::Input(format!(
                "normalizer fitted on {} columns, data has {cols}",
                self.min.len()
            )));
        }
        for row in x.values_mut().chunks_exact_mut(cols) {
            for ((v, &lo), &hi) in row.iter_mut().zip(&self.min).zip(&self.max) {
                let range = hi - lo;
                *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        Ok(())
    }
}

/// Normalizes `train` and `others` with statistics from `train` alone.
pub fn normalize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>)> {
    let mm = MinMax::fit(&train.features)?;
    let mut t = train.clone();
    mm.apply(&mut t.features)?;
    let mut rest = Vec::with_capacity(others.len());
    for o in others {
        let mut o = (*o).clone();
        mm.apply(&mut o.features)?;
        rest.push(o);
    }
    Ok((t, rest))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            validation_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Row indices of a train / validation / test partition, each sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.test_fraction)
            && (0.0..1.0).contains(&self.validation_fraction)
            && self.test_fraction + self.validation_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "split fractions test={} validation={} must lie in [0, 1) and sum below 1",
                self.test_fraction, self.validation_fraction
            )))
        }
    }

    pub fn split(&self, n: usize) -> Result<Split> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let n_test = (self.test_fraction * n as f64).round() as usize;
        let n_val = (self.validation_fraction * n as f64).round() as usize;
        if n_test + n_val >= n {
            return Err(Error::Input(format!("{n} rows leave no training data after splitting")));
        }
        let mut test = idx[..n_test].to_vec();
        let mut validation = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        test.sort_unstable();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(Split { train, validation, test })
    }
}

/// Train, validation and test sets after splitting and normalizing.
#[derive(Debug, Clone)]
pub struct Partitioned {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

/// Splits `ds` and normalizes every part with training statistics.
pub fn split_and_normalize(ds: &Dataset, spec: &SplitSpec) -> Result<Partitioned> {
    let s = spec.split(ds.n_rows())?;
    if s.test.is_empty() {
        return Err(Error::Input("test split is empty".into()));
    }
    let train = ds.subset(&s.train);
    let test = ds.subset(&s.test);
    if s.validation.is_empty() {
        let (train, mut rest) = normalize(&train, &[&test])?;
        Ok(Partitioned {
            train,
            validation: None,
            test: rest.pop().expect("one dataset in"),
        })
    } else {
        let val = ds.subset(&s.validation);
        let (train, mut rest) = normalize(&train, &[&val, &test])?;
        let test = rest.pop().expect("two datasets in");
        let val = rest.pop().expect("two datasets in");
        Ok(Partitioned {
            train,
            validation: Some(val),
            test,
        })
    }
}

/// Repeats the dataset `⌈min_batches·batch_size / N⌉` times when it would give
/// fewer than `min_batches` full minibatches.
pub fn duplicate_to_min_batches(ds: &Dataset, batch_size: usize, min_batches: usize) -> Dataset {
    let n = ds.n_rows();
    if batch_size == 0 || n / batch_size >= min_batches {
        return ds.clone();
    }
    let factor = (min_batches * batch_size).div_ceil(n);
    let rows: Vec<usize> = (0..factor).flat_map(|_| 0..n).collect();
    ds.subset(&rows)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Binary labels from a random two-layer function of `k_informative` columns.
///
/// Features are i.i.d. uniform on `[0, 1]`. The score is a linear term in the
/// planted columns plus a small tanh layer over them; labels threshold the
/// score at its median and are then flipped with probability `noise`. With no
/// planted columns the labels are fair coin flips.
pub fn synth_planted_features(n: usize, d: usize, k_informative: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if k_informative > d {
        return Err(Error::Config(format!("{k_informative} planted features but only {d} columns")));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!("label noise {noise} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::Config("dataset needs at least one row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<usize> = (0..d).collect();
    cols.shuffle(&mut rng);
    let mut planted = cols[..k_informative].to_vec();
    planted.sort_unstable();

    let hidden = 6;
    let lin: Vec<f64> = (0..k_informative)
        .map(|_| {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * rng.random_range(0.7..1.3)
        })
        .collect();
    let scale = 2.0 / (k_informative.max(1) as f64).sqrt();
    let w1: Vec<f64> = (0..hidden * k_informative).map(|_| scale * normal(&mut rng)).collect();
    let w2: Vec<f64> = (0..hidden).map(|_| 0.5 * normal(&mut rng)).collect();

    let values: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
    let features = DenseMatrix::from_vec(n, d, values)?;

    let labels = if k_informative == 0 {
        (0..n).map(|_| rng.random_range(0..2)).collect()
    } else {
        let scores: Vec<f64> = (0..n)
            .map(|r| {
                let row = features.row(r);
                let z: Vec<f64> = planted.iter().map(|&c| 2.0 * row[c] - 1.0).collect();
                let linear: f64 = z.iter().zip(&lin).map(|(a, b)| a * b).sum();
                let nonlinear: f64 = (0..hidden)
                    .map(|h| {
                        let pre: f64 = z.iter().zip(&w1[h * k_informative..]).map(|(a, b)| a * b).sum();
                        w2[h] * pre.tanh()
                    })
                    .sum();
                linear + nonlinear
            })
            .collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[n / 2];
        scores
            .iter()
            .map(|&s| {
                let y = usize::from(s >= median);
                if noise > 0.0 && rng.random::<f64>() < noise {
                    1 - y
                } else {
                    y
                }
            })
            .collect()
    };
    let mut ds = Dataset::new(features, labels)?;
    ds.planted = Some(planted);
    Ok(ds)
}

/// Binary labels with graded feature relevance: column `j` enters the score
/// linearly with weight `±decay^j` (columns in a random order), so no clear
/// gap separates useful from useless features. Labels threshold the score at
/// its median and are flipped with probability `noise`.
pub fn synth_graded_features(n: usize, d: usize, decay: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Config(format!("decay {decay} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!("label noise {noise} outside [0, 1]")));
    }
    if n == 0 || d == 0 {
        return Err(Error::Config("dataset needs at least one row and one column".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    let mut coef = vec![0.0; d];
    for (rank, &c) in order.iter().enumerate() {
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        coef[c] = s * decay.powi(rank as i32);
    }
    let values: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
    let features = DenseMatrix::from_vec(n, d, values)?;
    let scores: Vec<f64> = (0..n)
        .map(|r| features.row(r).iter().zip(&coef).map(|(x, w)| (2.0 * x - 1.0) * w).sum())
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[n / 2];
    let labels = scores
        .iter()
        .map(|&s| {
            let y = usize::from(s >= median);
            if noise > 0.0 && rng.random::<f64>() < noise {
                1 - y
            } else {
                y
            }
        })
        .collect();
    let mut ds = Dataset::new(features, labels)?;
    // ordered by relevance, most relevant first
    ds.planted = Some(order);
    Ok(ds)
}

/// Sparse, wide binary-outcome data on which an unregularized network overfits.
///
/// Each entry is uniform on `(0, 1]` and then zeroed with probability
/// `sparse_rate`. The outcome is Bernoulli with a logit built from a handful
/// of planted columns: linear terms plus pairwise products.
pub fn synth_overfit_prone(n: usize, d: usize, sparse_rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&sparse_rate) {
        return Err(Error::Config(format!("sparse rate {sparse_rate} outside [0, 1]")));
    }
    if n == 0 || d == 0 {
        return Err(Error::Config("dataset needs at least one row and one column".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n * d)
        .map(|_| {
            if rng.random::<f64>() < sparse_rate {
                0.0
            } else {
                1.0 - rng.random::<f64>()
            }
        })
        .collect();
    let features = DenseMatrix::from_vec(n, d, values)?;

    let n_linear = d.min(20);
    let mut cols: Vec<usize> = (0..d).collect();
    cols.shuffle(&mut rng);
    let mut planted = cols[..n_linear].to_vec();
    let coef: Vec<f64> = (0..n_linear)
        .map(|_| {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * rng.random_range(4.0..8.0)
        })
        .collect();
    let pairs: Vec<(usize, usize, f64)> = (0..n_linear / 2)
        .map(|i| (planted[2 * i], planted[2 * i + 1], 8.0 * normal(&mut rng)))
        .collect();

    let labels = (0..n)
        .map(|r| {
            let row = features.row(r);
            let mut logit: f64 = planted.iter().zip(&coef).map(|(&c, &w)| w * row[c]).sum();
            logit += pairs.iter().map(|&(a, b, w)| w * row[a] * row[b]).sum::<f64>();
            let p = crate::nn::loss::sigmoid(logit);
            usize::from(rng.random::<f64>() < p)
        })
        .collect();
    planted.sort_unstable();
    let mut ds = Dataset::new(features, labels)?;
    ds.planted = Some(planted);
    Ok(ds)
}

const MAGIC: &[u8; 8] = b"BMDSET01";

/// Writes the binary cache: magic `BMDSET01`, then little-endian `u64` rows,
/// `u64` cols, `rows·cols` row-major `f64` values and `rows` `u32` labels.
pub fn write_binary(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&(ds.n_rows() as u64).to_le_bytes())?;
    put(&(ds.n_features() as u64).to_le_bytes())?;
    for v in ds.features.values() {
        put(&v.to_le_bytes())?;
    }
    for &y in &ds.labels {
        let y = u32::try_from(y).map_err(|_| Error::Input(format!("label {y} does not fit in u32")))?;
        put(&y.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Input(format!("{}: {m}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset cache file"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let n_vals = rows
        .checked_mul(cols)
        .ok_or_else(|| bad("dimensions overflow"))?;
    let want = 24 + 8 * n_vals + 4 * rows;
    if bytes.len() != want {
        return Err(bad(&format!("expected {want} bytes, found {}", bytes.len())));
    }
    let body = &bytes[24..];
    let values = body[..8 * n_vals]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = body[8 * n_vals..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Dataset::new(DenseMatrix::from_vec(rows, cols, values)?, labels)
}
