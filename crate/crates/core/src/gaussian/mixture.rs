//! Labeled Gaussian mixtures, the mixture-Wasserstein distance and sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bures_w2_sq, GaussianComponent};
use crate::error::{Error, Result};
use crate::measures::validate_simplex;
use crate::ot::{solve_exact, CostMatrix, TransportPlan};
use crate::rng::{seeded, Rng};

const WEIGHT_TOL: f64 = 1e-9;

/// A Gaussian mixture whose components optionally carry soft class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGmm {
    weights: DVector<f64>,
    components: Vec<GaussianComponent>,
    labels: Option<DMatrix<f64>>,
}

impl LabeledGmm {
    pub fn new(
        weights: DVector<f64>,
        components: Vec<GaussianComponent>,
        labels: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::validation("mixture without components"));
        }
        if weights.len() != components.len() {
            return Err(Error::dims(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if !validate_simplex(weights.as_slice(), WEIGHT_TOL)? {
            return Err(Error::validation("mixture weights are not a probability vector"));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::dims("mixture components of different dimensions"));
        }
        if let Some(nu) = &labels {
            if nu.nrows() != components.len() || nu.ncols() == 0 {
                return Err(Error::dims(format!(
                    "label matrix {:?} for {} components",
                    nu.shape(),
                    components.len()
                )));
            }
            for i in 0..nu.nrows() {
                let row: Vec<f64> = nu.row(i).iter().copied().collect();
                if !validate_simplex(&row, WEIGHT_TOL)? {
                    return Err(Error::validation(format!("component {i} label is not a probability vector")));
                }
            }
        }
        Ok(Self { weights, components, labels })
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<GaussianComponent>, labels: Option<DMatrix<f64>>) -> Result<Self> {
        let n = components.len().max(1);
        Self::new(DVector::from_element(components.len(), 1.0 / n as f64), components, labels)
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn labels(&self) -> Option<&DMatrix<f64>> {
        self.labels.as_ref()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.ncols())
    }

    /// Index of the largest label entry per component.
    pub fn hard_labels(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(crate::measures::argmax_rows)
    }

    pub fn without_labels(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }

    pub fn into_parts(self) -> (DVector<f64>, Vec<GaussianComponent>, Option<DMatrix<f64>>) {
        (self.weights, self.components, self.labels)
    }

    /// Mean and per-dimension standard deviation of the mixture.
    pub fn moments(&self) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean += c.mean() * *w;
        }
        let mut var = DVector::zeros(d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let cov = c.covariance();
            for j in 0..d {
                var[j] += w * (cov[(j, j)] + (c.mean()[j] - mean[j]).powi(2));
            }
        }
        (mean, var.map(f64::sqrt))
    }

    pub fn to_document(&self) -> GmmDocument {
        GmmDocument {
            weights: self.weights.iter().copied().collect(),
            means: self.components.iter().map(|c| c.mean().iter().copied().collect()).collect(),
            cholesky_rows: self
                .components
                .iter()
                .map(|c| (0..c.dim()).map(|i| c.chol().row(i).iter().copied().collect()).collect())
                .collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| (0..l.nrows()).map(|i| l.row(i).iter().copied().collect()).collect()),
        }
    }

    pub fn from_document(doc: &GmmDocument) -> Result<Self> {
        let n = doc.weights.len();
        if doc.means.len() != n || doc.cholesky_rows.len() != n {
            return Err(Error::Parse(format!(
                "{} weights, {} means and {} Cholesky factors",
                n,
                doc.means.len(),
                doc.cholesky_rows.len()
            )));
        }
        let mut components = Vec::with_capacity(n);
        for (k, (mean, rows)) in doc.means.iter().zip(&doc.cholesky_rows).enumerate() {
            let d = mean.len();
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Parse(format!("component {k}: Cholesky factor is not {d}x{d}")));
            }
            let chol = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
            components.push(GaussianComponent::new(DVector::from_column_slice(mean), chol)?);
        }
        let labels = match &doc.labels {
            None => None,
            Some(rows) => {
                let c = rows.first().map_or(0, Vec::len);
                if rows.len() != n || rows.iter().any(|r| r.len() != c) {
                    return Err(Error::Parse("label rows are ragged or miscounted".into()));
                }
                Some(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
            }
        };
        Self::new(DVector::from_column_slice(&doc.weights), components, labels)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_document()).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GmmDocument = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// On-disk form of a [`LabeledGmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmDocument {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub cholesky_rows: Vec<Vec<Vec<f64>>>,
    pub labels: Option<Vec<Vec<f64>>>,
}

/// Distance between component label vectors; enters the cost squared.
#[derive(Debug, Clone, Copy, Default)]
pub enum LabelMetric {
    #[default]
    Euclidean,
    Custom(fn(&[f64], &[f64]) -> f64),
}

impl LabelMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            LabelMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            LabelMetric::Custom(f) => f(a, b),
        }
    }
}

/// Component cost `C_ij = W2(P_i, Q_j)^2 + beta * rho(nu_i, nu_j)^2`. The
/// label term is dropped when either mixture has no labels.
pub fn mw2_cost_matrix(p: &LabeledGmm, q: &LabeledGmm, beta: f64, rho: LabelMetric) -> Result<CostMatrix> {
    if p.dim() != q.dim() {
        return Err(Error::dims(format!("mixtures of dims {} and {}", p.dim(), q.dim())));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!("label weight must be finite and non-negative, got {beta}")));
    }
    let labels = match (p.labels(), q.labels()) {
        (Some(a), Some(b)) if beta > 0.0 => {
            if a.ncols() != b.ncols() {
                return Err(Error::dims(format!("{} vs {} label classes", a.ncols(), b.ncols())));
            }
            Some((a, b))
        }
        _ => None,
    };
    let (n, m) = (p.n_components(), q.n_components());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut c = bures_w2_sq(&p.components[i], &q.components[j])?;
                    if let Some((a, b)) = labels {
                        let ai: Vec<f64> = a.row(i).iter().copied().collect();
                        let bj: Vec<f64> = b.row(j).iter().copied().collect();
                        c += beta * rho.distance(&ai, &bj).powi(2);
                    }
                    Ok(c)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    CostMatrix::new(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Squared mixture-Wasserstein distance and the optimal component coupling.
pub fn mw2_sq(p: &LabeledGmm, q: &LabeledGmm, beta: f64, rho: LabelMetric) -> Result<(f64, TransportPlan)> {
    let cost = mw2_cost_matrix(p, q, beta, rho)?;
    let (plan, value) = solve_exact(p.weights(), q.weights(), &cost)?;
    Ok((value.max(0.0), plan))
}

/// `log N(z | mean, L L^T)`.
pub(crate) fn component_log_density(c: &GaussianComponent, z: &DVector<f64>) -> f64 {
    let d = c.dim() as f64;
    let diff = z - c.mean();
    let y = c
        .chol()
        .solve_lower_triangular(&diff)
        .expect("Cholesky diagonal is positive");
    let log_det: f64 = c.chol().diagonal().iter().map(|x| x.ln()).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * y.norm_squared()
}

/// Mixture log-density at `z` and the component responsibilities.
pub fn gmm_log_density(p: &LabeledGmm, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if z.len() != p.dim() {
        return Err(Error::dims(format!("point of dim {} for mixture of dim {}", z.len(), p.dim())));
    }
    let logs = DVector::from_iterator(
        p.n_components(),
        p.components.iter().zip(p.weights.iter()).map(|(c, w)| {
            if *w > 0.0 {
                w.ln() + component_log_density(c, z)
            } else {
                f64::NEG_INFINITY
            }
        }),
    );
    let max = logs.max();
    if !max.is_finite() {
        let n = p.n_components() as f64;
        return Ok((max, DVector::from_element(p.n_components(), 1.0 / n)));
    }
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let logp = max + sum.ln();
    Ok((logp, logs.map(|l| (l - logp).exp())))
}

/// Reparametrized draws `z = L_i eps + mu_i` with `i ~ pi`, `eps ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamSample {
    pub points: DMatrix<f64>,
    pub component_index: Vec<usize>,
    pub eps: DMatrix<f64>,
}

pub(crate) fn draw_component(weights: &DVector<f64>, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        last = i;
        acc += w;
        if u < acc {
            return i;
        }
    }
    last
}

pub(crate) fn sample_reparam_rng(p: &LabeledGmm, n: usize, rng: &mut Rng) -> ReparamSample {
    let d = p.dim();
    let mut points = DMatrix::zeros(n, d);
    let mut eps = DMatrix::zeros(n, d);
    let mut component_index = Vec::with_capacity(n);
    for s in 0..n {
        let k = draw_component(&p.weights, rng);
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = p.components[k].chol() * &e + p.components[k].mean();
        points.row_mut(s).copy_from(&z.transpose());
        eps.row_mut(s).copy_from(&e.transpose());
        component_index.push(k);
    }
    ReparamSample { points, component_index, eps }
}

pub fn sample_reparam(p: &LabeledGmm, n: usize, seed: u64) -> ReparamSample {
    sample_reparam_rng(p, n, &mut seeded(seed))
}
