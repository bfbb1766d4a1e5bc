//! Regularizing energies added to the barycenter objective: label entropy,
//! hinge repulsion between classes, a transport potential towards a target
//! cloud and the Monte-Carlo internal energy of a mixture.

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{lower_triangle, LabeledGmm};
use crate::measures::{log_softmax_rows, EmpiricalMeasure, LabeledEmpiricalMeasure};
use crate::ot::{barycentric_map, joint_cost, OtSolver};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepulsionMetric {
    #[default]
    Euclidean,
    Cosine,
}

/// Weights and settings of the energies. All weights default to 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalSpec {
    pub entropy_weight: f64,
    pub repulsion_weight: f64,
    pub repulsion_margin: f64,
    pub repulsion_metric: RepulsionMetric,
    pub target_weight: f64,
    /// Unlabeled cloud the target potential pulls towards; supplied at run
    /// time rather than through the config file.
    #[serde(skip)]
    pub target_measure: Option<EmpiricalMeasure>,
    pub internal_weight: f64,
}

impl FunctionalSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("entropy_weight", self.entropy_weight),
            ("repulsion_weight", self.repulsion_weight),
            ("repulsion_margin", self.repulsion_margin),
            ("target_weight", self.target_weight),
            ("internal_weight", self.internal_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::validation(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        if self.target_weight > 0.0 && self.target_measure.is_none() {
            return Err(Error::validation("target_weight > 0 needs a target measure"));
        }
        Ok(())
    }

    /// True when every energy is switched off.
    pub fn is_zero(&self) -> bool {
        self.entropy_weight == 0.0
            && self.repulsion_weight == 0.0
            && self.target_weight == 0.0
            && self.internal_weight == 0.0
    }
}

/// Mean Shannon entropy of the softmax label rows and its gradient with
/// respect to the logits. Minimizing it sharpens labels.
pub fn entropy_potential(label_logits: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let (n, c) = label_logits.shape();
    if n == 0 {
        return (0.0, DMatrix::zeros(0, c));
    }
    let logp = log_softmax_rows(label_logits);
    let mut grad = DMatrix::zeros(n, c);
    let mut total = 0.0;
    for i in 0..n {
        let h: f64 = -(0..c).map(|k| logp[(i, k)].exp() * logp[(i, k)]).sum::<f64>();
        total += h;
        for k in 0..c {
            let p = logp[(i, k)].exp();
            grad[(i, k)] = -p * (logp[(i, k)] + h) / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// `(1/n^2) sum_{i != j, y_i != y_j} max(0, margin - d(x_i, x_j))` and its
/// gradient. The hinge kink and coincident points get a zero subgradient.
pub fn hinge_repulsion(
    points: &DMatrix<f64>,
    hard_labels: &[usize],
    margin: f64,
    metric: RepulsionMetric,
) -> Result<(f64, DMatrix<f64>)> {
    let (n, d) = points.shape();
    if hard_labels.len() != n {
        return Err(Error::dims(format!("{} labels for {n} points", hard_labels.len())));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::validation(format!("margin must be finite and non-negative, got {margin}")));
    }
    let rows: Vec<DVector<f64>> = (0..n).map(|i| points.row(i).transpose()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.norm()).collect();
    if metric == RepulsionMetric::Cosine && norms.iter().any(|&x| x == 0.0) {
        return Err(Error::validation("cosine distance is undefined for a zero vector"));
    }
    let scale = 1.0 / (n as f64 * n as f64);
    // each unordered pair appears twice in the double sum
    let per_row: Vec<(f64, DVector<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut value = 0.0;
            let mut g = DVector::zeros(d);
            for j in 0..n {
                if j == i || hard_labels[i] == hard_labels[j] {
                    continue;
                }
                let (dist, ddist) = match metric {
                    RepulsionMetric::Euclidean => {
                        let diff = &rows[i] - &rows[j];
                        let dist = diff.norm();
                        let dd = if dist > 0.0 { diff / dist } else { DVector::zeros(d) };
                        (dist, dd)
                    }
                    RepulsionMetric::Cosine => {
                        let cos = rows[i].dot(&rows[j]) / (norms[i] * norms[j]);
                        let dcos = &rows[j] / (norms[i] * norms[j]) - &rows[i] * (cos / (norms[i] * norms[i]));
                        (1.0 - cos, -dcos)
                    }
                };
                let slack = margin - dist;
                if slack > 0.0 {
                    value += slack;
                    g -= ddist * 2.0;
                }
            }
            (value, g)
        })
        .collect();
    let mut grad = DMatrix::zeros(n, d);
    let mut value = 0.0;
    for (i, (v, g)) in per_row.into_iter().enumerate() {
        value += v;
        grad.row_mut(i).copy_from(&(g * scale).transpose());
    }
    Ok((value * scale, grad))
}

/// Value and gradients of a potential on a labeled particle measure.
#[derive(Debug, Clone)]
pub struct PotentialValue {
    pub value: f64,
    pub grad_points: DMatrix<f64>,
    pub grad_logits: DMatrix<f64>,
}

/// Squared W2 from the particle features to an unlabeled target cloud, with
/// the gradient at a fixed optimal plan: `2 a_i (x_i - T(x_i))`.
pub fn target_potential(
    p: &LabeledEmpiricalMeasure,
    target: &EmpiricalMeasure,
    solver: OtSolver,
) -> Result<PotentialValue> {
    if target.is_empty() {
        return Err(Error::validation("empty target measure"));
    }
    let cost = joint_cost(p.points(), target.points(), None, None, 0.0)?;
    let (plan, value) = solver.solve(p.weights(), target.weights(), &cost)?;
    let mapped = barycentric_map(&plan, target.points())?;
    let mut grad_points = p.points() - mapped;
    for (i, mut row) in grad_points.row_iter_mut().enumerate() {
        row *= 2.0 * p.weights()[i];
    }
    Ok(PotentialValue {
        value,
        grad_points,
        grad_logits: DMatrix::zeros(p.len(), p.n_classes()),
    })
}

/// Monte-Carlo estimate of `int P log P` for a mixture and its gradients.
#[derive(Debug, Clone)]
pub struct InternalEnergy {
    pub value: f64,
    pub grad_mu: Vec<DVector<f64>>,
    pub grad_chol: Vec<DMatrix<f64>>,
    /// Gradient with respect to logits `alpha` with `pi = softmax(alpha)`.
    pub grad_weight_logits: DVector<f64>,
}

/// Stratified reparametrized estimator of the negative entropy
/// `sum_k pi_k E_eps[log P(mu_k + L_k eps)]`, using `ceil(S / n)` shared
/// draws per component. For a fixed seed the estimate is a smooth function of
/// the parameters and the returned gradients are its exact derivatives,
/// through both the sample path and the density.
pub fn internal_energy_mc(p: &LabeledGmm, n_samples: usize, seed: u64) -> Result<InternalEnergy> {
    if n_samples == 0 {
        return Err(Error::validation("internal energy needs at least one sample"));
    }
    let k = p.n_components();
    let d = p.dim();
    let per = n_samples.div_ceil(k);
    let mut rng = seeded(seed);
    let eps = DMatrix::from_fn(per, d, |_, _| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal));
    let comps = p.components();
    let pi = p.weights();
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let log_det: Vec<f64> = comps.iter().map(|c| c.chol().diagonal().iter().map(|x| x.ln()).sum()).collect();

    struct Partial {
        value: f64,
        mu: Vec<DVector<f64>>,
        chol: Vec<DMatrix<f64>>,
        pi: DVector<f64>,
    }
    let zero = || Partial {
        value: 0.0,
        mu: vec![DVector::zeros(d); k],
        chol: vec![DMatrix::zeros(d, d); k],
        pi: DVector::zeros(k),
    };
    let parts: Vec<Partial> = (0..k)
        .into_par_iter()
        .map(|a| {
            let mut acc = zero();
            if pi[a] == 0.0 {
                // zero-weight strata still drive the weight gradient
                for s in 0..per {
                    let z = comps[a].chol() * eps.row(s).transpose() + comps[a].mean();
                    acc.pi[a] += log_mixture(&z, p, &log_det, log_norm).0 / per as f64;
                }
                return acc;
            }
            let w = pi[a] / per as f64;
            for s in 0..per {
                let e = eps.row(s).transpose();
                let z = comps[a].chol() * &e + comps[a].mean();
                let (logp, log_comp, ys) = log_mixture(&z, p, &log_det, log_norm);
                acc.value += w * logp;
                acc.pi[a] += logp / per as f64;
                // gradient of log P at z with respect to z
                let mut dz = DVector::zeros(d);
                for j in 0..k {
                    let r = (pi[j].ln() + log_comp[j] - logp).exp();
                    if r == 0.0 || !r.is_finite() {
                        continue;
                    }
                    let linv_t_y = comps[j]
                        .chol()
                        .transpose()
                        .solve_upper_triangular(&ys[j])
                        .expect("Cholesky diagonal is positive");
                    dz -= &linv_t_y * r;
                    // density term: parameters of component j at fixed z
                    acc.mu[j] += &linv_t_y * (w * r);
                    let mut dl = &linv_t_y * ys[j].transpose();
                    for t in 0..d {
                        dl[(t, t)] -= 1.0 / comps[j].chol()[(t, t)];
                    }
                    acc.chol[j] += lower_triangle(&dl) * (w * r);
                    // weight term inside the log: N_j(z) / P(z)
                    acc.pi[j] += pi[a] / per as f64 * (log_comp[j] - logp).exp();
                }
                // path term through z = L_a eps + mu_a
                acc.mu[a] += &dz * w;
                acc.chol[a] += lower_triangle(&(&dz * e.transpose())) * w;
            }
            acc
        })
        .collect();
    let mut total = zero();
    for part in parts {
        total.value += part.value;
        total.pi += part.pi;
        for j in 0..k {
            total.mu[j] += &part.mu[j];
            total.chol[j] += &part.chol[j];
        }
    }
    let mean_g = pi.dot(&total.pi);
    let grad_weight_logits = DVector::from_fn(k, |c, _| pi[c] * (total.pi[c] - mean_g));
    Ok(InternalEnergy { value: total.value, grad_mu: total.mu, grad_chol: total.chol, grad_weight_logits })
}

/// `log P(z)`, per-component `log N_j(z)` and whitened residuals
/// `y_j = L_j^{-1} (z - mu_j)`.
fn log_mixture(z: &DVector<f64>, p: &LabeledGmm, log_det: &[f64], log_norm: f64) -> (f64, Vec<f64>, Vec<DVector<f64>>) {
    let comps = p.components();
    let mut ys = Vec::with_capacity(comps.len());
    let mut log_comp = Vec::with_capacity(comps.len());
    for (j, c) in comps.iter().enumerate() {
        let y = c
            .chol()
            .solve_lower_triangular(&(z - c.mean()))
            .expect("Cholesky diagonal is positive");
        log_comp.push(log_norm - log_det[j] - 0.5 * y.norm_squared());
        ys.push(y);
    }
    let terms: Vec<f64> = log_comp
        .iter()
        .zip(p.weights().iter())
        .map(|(l, w)| if *w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logp = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    (logp, log_comp, ys)
}
