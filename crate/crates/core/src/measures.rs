//! Measure types and label utilities shared by every solver.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smoothing used when hard labels are turned into logits.
pub const ONE_HOT_SMOOTHING: f64 = 1e-6;

/// Tolerance for simplex membership of coordinates and weights.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// True iff every entry is at least `-tol` and the entries sum to 1 within `tol`.
pub fn validate_simplex(v: &[f64], tol: f64) -> Result<bool> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("simplex check on non-finite vector"));
    }
    let sum: f64 = v.iter().sum();
    Ok(v.iter().all(|&x| x >= -tol) && (sum - 1.0).abs() <= tol)
}

/// One-hot encode integer labels into an `n x n_classes` matrix.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(labels.len(), n_classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::validation(format!(
                "label {y} at row {i} out of range for {n_classes} classes"
            )));
        }
        out[(i, y)] = 1.0;
    }
    Ok(out)
}

/// Row-wise softmax plus argmax decoding; ties go to the lowest class index.
pub fn softmax_decode(logits: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("non-finite label logits"));
    }
    let soft = softmax_rows(logits);
    let hard = argmax_rows(&soft);
    Ok((soft, hard))
}

pub(crate) fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, c) = logits.shape();
    let mut out = DMatrix::zeros(n, c);
    for i in 0..n {
        let max = (0..c).map(|j| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (logits[(i, j)] - max).exp();
            out[(i, j)] = e;
            z += e;
        }
        for j in 0..c {
            out[(i, j)] /= z;
        }
    }
    out
}

/// Row-wise log-softmax, stable for saturated logits.
pub(crate) fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, c) = logits.shape();
    let mut out = DMatrix::zeros(n, c);
    for i in 0..n {
        let max = (0..c).map(|j| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|j| (logits[(i, j)] - max).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[(i, j)] = logits[(i, j)] - lse;
        }
    }
    out
}

pub(crate) fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..m.ncols() {
                if m[(i, j)] > m[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Logits whose softmax is the smoothed one-hot `onehot * (1 - C eps) + eps`.
pub fn one_hot_logits(labels: &[usize], n_classes: usize) -> Result<DMatrix<f64>> {
    let eps = ONE_HOT_SMOOTHING;
    let oh = one_hot(labels, n_classes)?;
    Ok(oh.map(|v| (v * (1.0 - n_classes as f64 * eps) + eps).ln()))
}

/// Convex weights over the `K` input measures of a barycenter problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BarycentricCoordinates(Vec<f64>);

impl BarycentricCoordinates {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::validation("barycentric coordinates must be non-empty"));
        }
        if !validate_simplex(&lambda, SIMPLEX_TOL)? {
            return Err(Error::validation(format!(
                "barycentric coordinates {lambda:?} are not on the simplex"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for BarycentricCoordinates {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BarycentricCoordinates> for Vec<f64> {
    fn from(c: BarycentricCoordinates) -> Self {
        c.0
    }
}

/// A weighted point cloud: `n` rows of `d` features and a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: DMatrix<f64>,
    weights: DVector<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::validation("empty measure"));
        }
        if points.ncols() == 0 {
            return Err(Error::validation("measure with zero feature dimensions"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite point coordinates"));
        }
        if weights.len() != points.nrows() {
            return Err(Error::dims(format!(
                "{} weights for {} points",
                weights.len(),
                points.nrows()
            )));
        }
        if !validate_simplex(weights.as_slice(), 1e-9)? {
            return Err(Error::validation("measure weights are not on the simplex"));
        }
        Ok(Self { points, weights })
    }

    /// Uniform weights `1/n`.
    pub fn uniform(points: DMatrix<f64>) -> Result<Self> {
        let n = points.nrows().max(1);
        let w = DVector::from_element(points.nrows(), 1.0 / n as f64);
        Self::new(points, w)
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= 1e-15)
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.points, self.weights)
    }

    /// Per-feature mean and standard deviation under the measure's weights.
    pub fn moments(&self) -> (DVector<f64>, DVector<f64>) {
        weighted_moments(&self.points, &self.weights)
    }

    /// Keep at most `max_points` rows, chosen uniformly without replacement
    /// and renormalizing the weights.
    pub fn subsample(&self, max_points: usize, rng: &mut Rng) -> Self {
        if self.len() <= max_points {
            return self.clone();
        }
        let idx = choose_without_replacement(self.len(), max_points, rng);
        let points = select_rows(&self.points, &idx);
        let mut w = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.weights[i]));
        let s = w.sum();
        w /= s;
        Self { points, weights: w }
    }
}

pub(crate) fn weighted_moments(points: &DMatrix<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let d = points.ncols();
    let mut mean = DVector::zeros(d);
    for i in 0..points.nrows() {
        for k in 0..d {
            mean[k] += w[i] * points[(i, k)];
        }
    }
    let mut var = DVector::zeros(d);
    for i in 0..points.nrows() {
        for k in 0..d {
            let c = points[(i, k)] - mean[k];
            var[k] += w[i] * c * c;
        }
    }
    (mean, var.map(f64::sqrt))
}

pub(crate) fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// `k` distinct indices from `0..n` in sampled order (partial Fisher-Yates).
pub(crate) fn choose_without_replacement(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// How label logits of a fresh barycenter are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelInit {
    /// All logits zero, i.e. uniform soft labels.
    #[default]
    Uniform,
    /// Independent standard normal logits.
    Random,
}

impl LabelInit {
    pub fn logits(self, n: usize, n_classes: usize, rng: &mut Rng) -> DMatrix<f64> {
        match self {
            LabelInit::Uniform => DMatrix::zeros(n, n_classes),
            LabelInit::Random => DMatrix::from_fn(n, n_classes, |_, _| rng.sample(StandardNormal)),
        }
    }
}

/// An empirical measure whose particles also carry label logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmpiricalMeasure {
    base: EmpiricalMeasure,
    label_logits: DMatrix<f64>,
}

impl LabeledEmpiricalMeasure {
    pub fn new(base: EmpiricalMeasure, label_logits: DMatrix<f64>) -> Result<Self> {
        if label_logits.nrows() != base.len() {
            return Err(Error::dims(format!(
                "{} label rows for {} points",
                label_logits.nrows(),
                base.len()
            )));
        }
        if label_logits.ncols() == 0 {
            return Err(Error::validation("labeled measure needs at least one class"));
        }
        if label_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite label logits"));
        }
        Ok(Self { base, label_logits })
    }

    /// Labeled measure from hard labels, stored as smoothed one-hot logits.
    pub fn from_hard_labels(base: EmpiricalMeasure, labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != base.len() {
            return Err(Error::dims(format!("{} labels for {} points", labels.len(), base.len())));
        }
        let logits = one_hot_logits(labels, n_classes)?;
        Self::new(base, logits)
    }

    pub fn base(&self) -> &EmpiricalMeasure {
        &self.base
    }

    pub fn points(&self) -> &DMatrix<f64> {
        self.base.points()
    }

    pub fn weights(&self) -> &DVector<f64> {
        self.base.weights()
    }

    pub fn label_logits(&self) -> &DMatrix<f64> {
        &self.label_logits
    }

    pub fn n_classes(&self) -> usize {
        self.label_logits.ncols()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn soft_labels(&self) -> DMatrix<f64> {
        softmax_rows(&self.label_logits)
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        argmax_rows(&self.label_logits)
    }

    pub fn into_parts(self) -> (EmpiricalMeasure, DMatrix<f64>) {
        (self.base, self.label_logits)
    }
}

/// A mini-batch drawn from input measure `source_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub points: DMatrix<f64>,
    /// One-hot rows, present when the input carries labels.
    pub labels: Option<DMatrix<f64>>,
    pub source_index: usize,
}

impl MiniBatch {
    pub fn new(points: DMatrix<f64>, labels: Option<DMatrix<f64>>, source_index: usize) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::validation(format!("empty batch from input {source_index}")));
        }
        if let Some(l) = &labels {
            if l.nrows() != points.nrows() {
                return Err(Error::dims("batch labels and points disagree in length"));
            }
            for i in 0..l.nrows() {
                let row = l.row(i);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(Error::validation(format!("batch label row {i} is not one-hot")));
                }
            }
        }
        Ok(Self { points, labels, source_index })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// The batch as a uniform empirical measure.
    pub fn to_measure(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::uniform(self.points.clone())
    }
}
