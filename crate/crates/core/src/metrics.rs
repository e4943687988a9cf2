//! Top-1 and per-bucket accuracy, Inception Score and KNN probing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ShotBucket;
use crate::matrix::Matrix;

pub const DEFAULT_IS_SPLITS: usize = 1;
pub const DEFAULT_KNN_K: usize = 10;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("label {0} has no shot bucket")]
    MissingBucket(usize),
    #[error("row {row} is not a probability distribution (sum {sum})")]
    RowNotStochastic { row: usize, sum: f64 },
    #[error("{rows} rows cannot be split into {splits} chunks")]
    TooFewRows { rows: usize, splits: usize },
    #[error("zero-norm feature vector at {which} row {row}")]
    ZeroNormFeature { which: &'static str, row: usize },
    #[error("k = {k} exceeds the {available} training points")]
    KTooLarge { k: usize, available: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("probability CSV line {line}: {message}")]
    CsvParse { line: usize, message: String },
}

/// Row-stochastic `N x C` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    /// Checks every entry is in `[0, 1]` and every row sums to 1 within 1e-9.
    pub fn new(m: Matrix) -> Result<Self, MetricsError> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(MetricsError::Empty);
        }
        for r in 0..m.rows() {
            let row = m.row(r);
            let sum: f64 = row.iter().sum();
            let in_range = row.iter().all(|&p| (0.0..=1.0).contains(&p));
            if !in_range || sum.is_nan() || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MetricsError::RowNotStochastic { row: r, sum });
            }
        }
        Ok(ProbMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        let cols = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(MetricsError::DimMismatch {
                expected: cols,
                found: r.len(),
            });
        }
        ProbMatrix::new(Matrix::from_rows(rows))
    }

    /// One row per line, comma-separated. Blank lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| MetricsError::CsvParse {
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            rows.push(row);
        }
        ProbMatrix::from_rows(&rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.0.rows() {
            let cells: Vec<String> = self.0.row(r).iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }
}

impl TryFrom<Matrix> for ProbMatrix {
    type Error = MetricsError;

    fn try_from(m: Matrix) -> Result<Self, MetricsError> {
        ProbMatrix::new(m)
    }
}

impl From<ProbMatrix> for Matrix {
    fn from(p: ProbMatrix) -> Matrix {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub top1: f64,
    pub per_bucket: BTreeMap<ShotBucket, f64>,
    pub is_mean: f64,
    pub is_std: f64,
}

pub fn top1_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Accuracy over the samples whose true class falls in each bucket.
/// Buckets without samples are absent from the result.
pub fn bucket_accuracy(
    pred: &[usize],
    truth: &[usize],
    buckets: &BTreeMap<usize, ShotBucket>,
) -> Result<BTreeMap<ShotBucket, f64>, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let mut tally: BTreeMap<ShotBucket, (usize, usize)> = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth) {
        let b = *buckets.get(t).ok_or(MetricsError::MissingBucket(*t))?;
        let e = tally.entry(b).or_default();
        e.0 += usize::from(p == t);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(b, (hit, n))| (b, hit as f64 / n as f64))
        .collect())
}

/// Inception Score over `splits` contiguous row chunks. Each chunk scores
/// `exp(mean_i KL(p_i || q))` with `q` the chunk's column mean and
/// `0 ln 0 = 0`. Returns the mean and population standard deviation of the
/// chunk scores.
pub fn inception_score(p: &ProbMatrix, splits: usize) -> Result<(f64, f64), MetricsError> {
    let n = p.rows();
    if splits == 0 || n < splits {
        return Err(MetricsError::TooFewRows { rows: n, splits });
    }
    let m = p.matrix();
    let c = p.classes();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
        let mut q = vec![0.0; c];
        for r in lo..hi {
            for (qj, pj) in q.iter_mut().zip(m.row(r)) {
                *qj += pj;
            }
        }
        let len = (hi - lo) as f64;
        q.iter_mut().for_each(|v| *v /= len);
        let mut kl_sum = 0.0;
        for r in lo..hi {
            for (&pj, &qj) in m.row(r).iter().zip(&q) {
                if pj > 0.0 {
                    kl_sum += pj * libm::log(pj / qj);
                }
            }
        }
        scores.push(libm::exp(kl_sum / len));
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, libm::sqrt(var)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Cosine,
    Euclidean,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// k-nearest-neighbour vote. Distance ties go to the lower training index;
/// vote ties go to the smallest label.
pub fn knn_classify(
    train: &Matrix,
    train_labels: &[usize],
    queries: &Matrix,
    k: usize,
    metric: DistanceMetric,
) -> Result<Vec<usize>, MetricsError> {
    if train.rows() != train_labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: train.rows(),
            right: train_labels.len(),
        });
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if k > train.rows() {
        return Err(MetricsError::KTooLarge {
            k,
            available: train.rows(),
        });
    }
    if queries.rows() > 0 && queries.cols() != train.cols() {
        return Err(MetricsError::DimMismatch {
            expected: train.cols(),
            found: queries.cols(),
        });
    }
    let train_norms: Vec<f64> = (0..train.rows()).map(|r| norm(train.row(r))).collect();
    if metric == DistanceMetric::Cosine {
        if let Some(row) = train_norms.iter().position(|&n| n == 0.0) {
            return Err(MetricsError::ZeroNormFeature { which: "train", row });
        }
    }
    let mut out = Vec::with_capacity(queries.rows());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.rows());
    for qi in 0..queries.rows() {
        let q = queries.row(qi);
        let qn = norm(q);
        if metric == DistanceMetric::Cosine && qn == 0.0 {
            return Err(MetricsError::ZeroNormFeature {
                which: "query",
                row: qi,
            });
        }
        dist.clear();
        for (ti, &tn) in train_norms.iter().enumerate() {
            let t = train.row(ti);
            let d = match metric {
                DistanceMetric::Cosine => 1.0 - q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (qn * tn),
                DistanceMetric::Euclidean => q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum(),
            };
            dist.push((d, ti));
        }
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &(_, ti) in &dist[..k] {
            *votes.entry(train_labels[ti]).or_default() += 1;
        }
        // BTreeMap iterates labels ascending, so strict > keeps the smallest.
        let mut best = (0, 0);
        for (&label, &n) in &votes {
            if n > best.1 {
                best = (label, n);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}
