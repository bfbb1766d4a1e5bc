//! Expectation-maximization for (per-class) Gaussian mixtures.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mixture::component_log_density;
use super::{GaussianComponent, LabeledGmm};
use crate::error::{Error, Result};
use crate::measures::{one_hot, select_rows};
use crate::rng::{child_seed, seeded, Rng};

/// Relative covariance ridge added at every M-step.
pub const RIDGE: f64 = 1e-6;
const RIDGE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOptions {
    pub components_per_class: usize,
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
    pub diag_only: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { components_per_class: 1, max_iter: 200, tol: 1e-8, seed: 0, diag_only: false }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: LabeledGmm,
    /// Total log-likelihood per iteration, one trace per class (one trace
    /// when fitted without labels).
    pub log_likelihood: Vec<Vec<f64>>,
}

/// Fit a mixture with `components_per_class` components per class. Without
/// labels a single pooled mixture is fitted and carries no component labels.
pub fn em_fit(data: &DMatrix<f64>, labels: Option<&[usize]>, opts: &EmOptions) -> Result<EmFit> {
    let (n, d) = data.shape();
    if d == 0 {
        return Err(Error::validation("data with zero features"));
    }
    if opts.components_per_class == 0 {
        return Err(Error::validation("components_per_class must be at least 1"));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("non-finite data"));
    }
    let Some(labels) = labels else {
        if n < opts.components_per_class {
            return Err(Error::validation(format!("{n} rows for {} components", opts.components_per_class)));
        }
        let w = DVector::from_element(n, 1.0);
        let (weights, comps, ll) = fit_one(data, &w, opts, opts.seed)?;
        let gmm = LabeledGmm::new(weights, comps, None)?;
        return Ok(EmFit { gmm, log_likelihood: vec![ll] });
    };
    if labels.len() != n {
        return Err(Error::dims(format!("{} labels for {n} rows", labels.len())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut weights = Vec::new();
    let mut components = Vec::new();
    let mut comp_labels = Vec::new();
    let mut traces = Vec::new();
    for c in 0..n_classes {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::validation(format!("class {c} has no rows")));
        }
        if idx.len() < opts.components_per_class {
            return Err(Error::validation(format!(
                "class {c} has {} rows for {} components",
                idx.len(),
                opts.components_per_class
            )));
        }
        let rows = select_rows(data, &idx);
        let w = DVector::from_element(idx.len(), 1.0);
        let (pi, comps, ll) = fit_one(&rows, &w, opts, child_seed(opts.seed, c as u64))?;
        let class_mass = idx.len() as f64 / n as f64;
        weights.extend(pi.iter().map(|p| p * class_mass));
        comp_labels.extend(std::iter::repeat_n(c, comps.len()));
        components.extend(comps);
        traces.push(ll);
    }
    let total: f64 = weights.iter().sum();
    let weights = DVector::from_vec(weights) / total;
    let nu = one_hot(&comp_labels, n_classes)?;
    Ok(EmFit { gmm: LabeledGmm::new(weights, components, Some(nu))?, log_likelihood: traces })
}

/// Means seeded k-means++ style: first uniformly, then proportional to the
/// squared distance to the nearest chosen mean.
fn seed_means(x: &DMatrix<f64>, k: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
    let n = x.nrows();
    let row = |i: usize| x.row(i).transpose();
    let mut means = vec![row(rng.random_range(0..n))];
    let mut dist: Vec<f64> = (0..n).map(|i| (row(i) - &means[0]).norm_squared()).collect();
    while means.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, di) in dist.iter().enumerate() {
                acc += di;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let m = row(pick);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min((row(i) - &m).norm_squared());
        }
        means.push(m);
    }
    means
}

fn regularize(mut cov: DMatrix<f64>, diag_only: bool) -> DMatrix<f64> {
    let d = cov.nrows();
    if diag_only {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    let ridge = (RIDGE * cov.trace() / d as f64).max(RIDGE_FLOOR);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    (&cov + cov.transpose()) * 0.5
}

type Fit = (DVector<f64>, Vec<GaussianComponent>, Vec<f64>);

fn fit_one(x: &DMatrix<f64>, w: &DVector<f64>, opts: &EmOptions, seed: u64) -> Result<Fit> {
    let (n, d) = x.shape();
    let k = opts.components_per_class;
    let mut rng = seeded(seed);
    let wsum = w.sum();
    let mean_all = x.tr_mul(w) / wsum;
    let mut cov_all = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = x.row(i).transpose() - &mean_all;
        cov_all += &r * r.transpose() * w[i];
    }
    let cov_all = regularize(cov_all / wsum, opts.diag_only);
    let means = seed_means(x, k, &mut rng);
    let mut comps = means
        .into_iter()
        .map(|m| GaussianComponent::from_covariance(m, cov_all.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut pi = DVector::from_element(k, 1.0 / k as f64);
    let mut trace = Vec::new();
    let mut resp = DMatrix::zeros(n, k);
    for _ in 0..opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            let z = x.row(i).transpose();
            let logs: Vec<f64> = (0..k)
                .map(|j| if pi[j] > 0.0 { pi[j].ln() + component_log_density(&comps[j], &z) } else { f64::NEG_INFINITY })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            let lse = max + s.ln();
            ll += w[i] * lse;
            for j in 0..k {
                resp[(i, j)] = (logs[j] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::Numerical("EM log-likelihood is not finite".into()));
        }
        let done = trace.last().is_some_and(|prev: &f64| (ll - prev) / wsum < opts.tol);
        trace.push(ll);
        if done {
            break;
        }
        // M-step
        for j in 0..k {
            let rw = resp.column(j).component_mul(w);
            let nj = rw.sum();
            if nj <= 1e-12 * wsum {
                // dead component: keep its shape, drop its weight
                pi[j] = 0.0;
                continue;
            }
            pi[j] = nj / wsum;
            let mu = x.tr_mul(&rw) / nj;
            let mut cov = DMatrix::zeros(d, d);
            for i in 0..n {
                if rw[i] == 0.0 {
                    continue;
                }
                let r = x.row(i).transpose() - &mu;
                cov += &r * r.transpose() * rw[i];
            }
            comps[j] = GaussianComponent::from_covariance(mu, regularize(cov / nj, opts.diag_only))?;
        }
        let s = pi.sum();
        pi /= s;
    }
    if opts.diag_only {
        for c in comps.iter_mut() {
            let l = DMatrix::from_diagonal(&c.chol().diagonal());
            *c = GaussianComponent::new(c.mean().clone(), l)?;
        }
    }
    Ok((pi, comps, trace))
}
