//! Gradient flow of a labeled Gaussian mixture towards the barycenter of
//! input mixtures under the mixture-Wasserstein distance.
//!
//! The flowed parameters are component means, Cholesky factors, label logits
//! (`nu = softmax`) and optionally weight logits (`pi = softmax`). Each step
//! solves the component couplings at the current parameters, then descends
//! the objective with the couplings held fixed. Gradients of the means,
//! factors and label logits of component `i` are divided by `pi_i`, so a step
//! of 0.5 on the transport term moves each component onto the average of
//! its transport targets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_empirical::TraceRecord;
use crate::functionals::{entropy_potential, hinge_repulsion, internal_energy_mc, target_potential, FunctionalSpec};
use crate::gaussian::{
    bures_w2_grad, bures_w2_sq, cross_sqrt, em_fit, mw2_cost_matrix, sample_reparam_rng, sqrt_and_inv_sqrt, EmOptions,
    GaussianComponent, LabelMetric, LabeledGmm,
};
use crate::measures::{softmax_rows, BarycentricCoordinates, EmpiricalMeasure, LabelInit, LabeledEmpiricalMeasure};
use crate::ot::{solve_exact_dual, ExactSolution, OtSolver, TransportPlan};
use crate::rng::{child_seed, seeded};

/// Smallest Cholesky diagonal entry kept after a step.
pub const CHOL_FLOOR: f64 = 1e-6;
/// Floor applied to probabilities before taking logits.
const PROB_FLOOR: f64 = 1e-12;

/// How the flowed mixture is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmInit {
    /// EM fit on a pooled sample from all inputs.
    #[default]
    Em,
    /// Means at random pooled samples, covariance the pooled per-dimension
    /// variance, random label logits.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmFlowConfig {
    pub n_components: usize,
    pub step_size: f64,
    /// Weight `beta` of the label term in the component cost.
    pub label_weight: f64,
    /// Monte-Carlo samples for sample-based energies.
    pub mc_samples: usize,
    pub n_iter: usize,
    pub coordinates: Option<BarycentricCoordinates>,
    pub functional: FunctionalSpec,
    /// Keep covariances diagonal.
    pub diag_only: bool,
    /// Flow the component weights through softmax logits.
    pub flow_weights: bool,
    pub seed: u64,
    pub init: GmmInit,
    /// Samples drawn from each input for the initial fit.
    pub init_samples: usize,
}

impl Default for GmmFlowConfig {
    fn default() -> Self {
        Self {
            n_components: 1,
            step_size: 0.25,
            label_weight: 0.0,
            mc_samples: 256,
            n_iter: 200,
            coordinates: None,
            functional: FunctionalSpec::default(),
            diag_only: false,
            flow_weights: false,
            seed: 0,
            init: GmmInit::Em,
            init_samples: 256,
        }
    }
}

impl GmmFlowConfig {
    pub fn validate(&self, n_inputs: usize) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::validation("n_components must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::validation(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.label_weight >= 0.0 && self.label_weight.is_finite()) {
            return Err(Error::validation(format!("label_weight must be non-negative, got {}", self.label_weight)));
        }
        if self.mc_samples == 0 {
            return Err(Error::validation("mc_samples must be at least 1"));
        }
        if self.init_samples == 0 {
            return Err(Error::validation("init_samples must be at least 1"));
        }
        if n_inputs == 0 {
            return Err(Error::validation("at least one input mixture is required"));
        }
        if let Some(c) = &self.coordinates {
            if c.len() != n_inputs {
                return Err(Error::dims(format!("{} coordinates for {n_inputs} inputs", c.len())));
            }
        }
        self.functional.validate()
    }

    pub fn lambda(&self, k: usize) -> Vec<f64> {
        match &self.coordinates {
            Some(c) => c.as_slice().to_vec(),
            None => BarycentricCoordinates::uniform(k).as_slice().to_vec(),
        }
    }
}

/// Size of the flowed parameters after a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamNorms {
    pub iter: usize,
    /// Frobenius norm of the stacked means.
    pub mean_norm: f64,
    /// Frobenius norm of the stacked Cholesky factors.
    pub chol_norm: f64,
}

impl ParamNorms {
    fn of(iter: usize, p: &LabeledGmm) -> Self {
        let mean_norm = p.components().iter().map(|c| c.mean().norm_squared()).sum::<f64>().sqrt();
        let chol_norm = p.components().iter().map(|c| c.chol().norm_squared()).sum::<f64>().sqrt();
        Self { iter, mean_norm, chol_norm }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFlowState {
    pub gmm: LabeledGmm,
    pub iter: usize,
    /// One record per completed step, evaluated at the parameters the step
    /// started from.
    pub trace: Vec<TraceRecord>,
    /// Parameter norms after each step.
    pub norms: Vec<ParamNorms>,
    /// Cholesky diagonal entries clamped to [`CHOL_FLOOR`] so far.
    pub clamped: usize,
}

impl GmmFlowState {
    pub fn new(gmm: LabeledGmm) -> Self {
        Self { gmm, iter: 0, trace: Vec::new(), norms: Vec::new(), clamped: 0 }
    }
}

/// Gradient of `sum_k lambda_k sum_ij omega_k,ij [W2(P_i, Q_kj)^2 + beta |nu_i - nu_kj|^2]`
/// at fixed couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGradient {
    pub value: f64,
    pub mean: Vec<DVector<f64>>,
    pub chol: Vec<DMatrix<f64>>,
    /// With respect to label logits, when the state carries labels.
    pub label_logits: Option<DMatrix<f64>>,
}

/// Transport-term gradient of `p` at fixed couplings `plans[k]` to `inputs[k]`.
pub fn mw2_gradient(
    p: &LabeledGmm,
    inputs: &[LabeledGmm],
    plans: &[TransportPlan],
    lambda: &[f64],
    beta: f64,
) -> Result<GmmGradient> {
    if plans.len() != inputs.len() || lambda.len() != inputs.len() {
        return Err(Error::dims(format!("{} inputs, {} plans, {} coordinates", inputs.len(), plans.len(), lambda.len())));
    }
    let (n, d) = (p.n_components(), p.dim());
    let nu = p.labels().filter(|_| beta > 0.0);
    let c = nu.map_or(0, |l| l.ncols());
    let mut grad = GmmGradient {
        value: 0.0,
        mean: vec![DVector::zeros(d); n],
        chol: vec![DMatrix::zeros(d, d); n],
        label_logits: p.labels().map(|l| DMatrix::zeros(n, l.ncols())),
    };
    for ((q, plan), lam) in inputs.iter().zip(plans).zip(lambda) {
        let w = &plan.coupling;
        if w.shape() != (n, q.n_components()) {
            return Err(Error::dims(format!("plan of shape {:?} for {n}x{} components", w.shape(), q.n_components())));
        }
        let q_nu = match nu {
            Some(_) => Some(q.labels().ok_or_else(|| Error::validation("a positive label weight needs labeled inputs"))?),
            None => None,
        };
        for i in 0..n {
            for j in 0..q.n_components() {
                let mass = lam * w[(i, j)];
                if mass == 0.0 {
                    continue;
                }
                let (pi, qj) = (&p.components()[i], &q.components()[j]);
                grad.value += mass * bures_w2_sq(pi, qj)?;
                let g = bures_w2_grad(pi, qj)?;
                grad.mean[i] += g.mean * mass;
                grad.chol[i] += g.chol * mass;
                if let (Some(a), Some(b)) = (nu, q_nu) {
                    let r = DVector::from_fn(c, |t, _| a[(i, t)] - b[(j, t)]);
                    grad.value += mass * beta * r.norm_squared();
                    // softmax Jacobian (diag(nu) - nu nu^T) applied to 2 beta r
                    let nr: f64 = (0..c).map(|t| a[(i, t)] * r[t]).sum();
                    let gl = grad.label_logits.as_mut().expect("labels present");
                    for t in 0..c {
                        gl[(i, t)] += 2.0 * beta * mass * a[(i, t)] * (r[t] - nr);
                    }
                }
            }
        }
    }
    Ok(grad)
}

fn check_inputs(inputs: &[LabeledGmm], cfg: &GmmFlowConfig) -> Result<(usize, Option<usize>)> {
    cfg.validate(inputs.len())?;
    let d = inputs[0].dim();
    if inputs.iter().any(|q| q.dim() != d) {
        return Err(Error::dims("input mixtures of different dimensions"));
    }
    let c = inputs[0].n_classes();
    if inputs.iter().any(|q| q.n_classes() != c) {
        if cfg.label_weight > 0.0 {
            return Err(Error::validation("a positive label weight needs every input labeled with the same classes"));
        }
        return Ok((d, None));
    }
    if cfg.label_weight > 0.0 && c.is_none() {
        return Err(Error::validation("a positive label weight needs labeled inputs"));
    }
    Ok((d, c))
}

fn logits_of(p: &DMatrix<f64>) -> DMatrix<f64> {
    p.map(|x| x.max(PROB_FLOOR).ln())
}

/// One step: component couplings at the current parameters, then a
/// preconditioned gradient step with the couplings fixed.
pub fn gmm_flow_step(state: &GmmFlowState, inputs: &[LabeledGmm], cfg: &GmmFlowConfig) -> Result<GmmFlowState> {
    let (d, classes) = check_inputs(inputs, cfg)?;
    let p = &state.gmm;
    if p.dim() != d {
        return Err(Error::dims(format!("state of dim {} for inputs of dim {d}", p.dim())));
    }
    let beta = cfg.label_weight;
    if beta > 0.0 && p.n_classes() != classes {
        return Err(Error::dims("state and inputs carry different label classes"));
    }
    let n = p.n_components();
    let lambda = cfg.lambda(inputs.len());
    let pi = p.weights().clone();

    let solutions: Vec<ExactSolution> = inputs
        .iter()
        .map(|q| {
            let cost = mw2_cost_matrix(p, q, beta, LabelMetric::Euclidean)?;
            solve_exact_dual(&pi, q.weights(), &cost)
        })
        .collect::<Result<_>>()?;
    let plans: Vec<TransportPlan> = solutions.iter().map(|s| s.plan.clone()).collect();
    let mut grad = mw2_gradient(p, inputs, &plans, &lambda, beta)?;
    let b_hat: f64 = solutions.iter().zip(&lambda).map(|(s, l)| l * s.cost.max(0.0)).sum();
    // envelope: the optimal value moves with the row marginal through the row duals
    let mut grad_pi = DVector::zeros(n);
    for (s, l) in solutions.iter().zip(&lambda) {
        grad_pi += &s.u * *l;
    }

    let spec = &cfg.functional;
    let step_seed = child_seed(cfg.seed, state.iter as u64 + 1);
    let (mut g, mut v, mut u) = (0.0, 0.0, 0.0);
    if spec.internal_weight > 0.0 {
        let e = internal_energy_mc(p, cfg.mc_samples, step_seed)?;
        let w = spec.internal_weight;
        g += w * e.value;
        for i in 0..n {
            grad.mean[i] += &e.grad_mu[i] * w;
            grad.chol[i] += &e.grad_chol[i] * w;
        }
        // the logit gradient sums to zero, so dividing by pi recovers a weight gradient
        grad_pi += DVector::from_fn(n, |i, _| if pi[i] > 0.0 { w * e.grad_weight_logits[i] / pi[i] } else { 0.0 });
    }
    if spec.entropy_weight > 0.0 {
        if let (Some(labels), Some(gl)) = (p.labels(), grad.label_logits.as_mut()) {
            // pi-weighted entropy of the component labels
            let logits = logits_of(labels);
            for i in 0..n {
                let (h, gh) = entropy_potential(&logits.rows(i, 1).into_owned());
                v += spec.entropy_weight * pi[i] * h;
                for t in 0..labels.ncols() {
                    gl[(i, t)] += spec.entropy_weight * pi[i] * gh[(0, t)];
                }
                grad_pi[i] += spec.entropy_weight * h;
            }
        }
    }
    if spec.target_weight > 0.0 {
        let target = spec.target_measure.as_ref().expect("validated");
        let draw = sample_reparam_rng(p, cfg.mc_samples, &mut seeded(child_seed(step_seed, 1)));
        let cloud = LabeledEmpiricalMeasure::new(
            EmpiricalMeasure::uniform(draw.points.clone())?,
            DMatrix::zeros(draw.points.nrows(), 1),
        )?;
        let t = target_potential(&cloud, target, OtSolver::Auto)?;
        v += spec.target_weight * t.value;
        for (s, &comp) in draw.component_index.iter().enumerate() {
            let gz = t.grad_points.row(s).transpose() * spec.target_weight;
            grad.chol[comp] += &gz * draw.eps.row(s);
            grad.mean[comp] += gz;
        }
    }
    if spec.repulsion_weight > 0.0 {
        if let Some(hard) = p.hard_labels() {
            let means = DMatrix::from_fn(n, d, |i, t| p.components()[i].mean()[t]);
            let (r, gr) = hinge_repulsion(&means, &hard, spec.repulsion_margin, spec.repulsion_metric)?;
            u += spec.repulsion_weight * r;
            for i in 0..n {
                grad.mean[i] += gr.row(i).transpose() * spec.repulsion_weight;
            }
        }
    }

    let alpha = cfg.step_size;
    let mut clamped = 0;
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        let comp = &p.components()[i];
        let scale = if pi[i] > 0.0 { alpha / pi[i] } else { 0.0 };
        let mean = comp.mean() - &grad.mean[i] * scale;
        let mut chol = comp.chol() - &grad.chol[i] * scale;
        for r in 0..d {
            for s in 0..d {
                if s > r || (cfg.diag_only && s != r) {
                    chol[(r, s)] = 0.0;
                }
            }
            if !(chol[(r, r)] >= CHOL_FLOOR) {
                if chol[(r, r)].is_nan() {
                    return Err(Error::Numerical(format!("Cholesky factor diverged at iteration {}", state.iter)));
                }
                chol[(r, r)] = CHOL_FLOOR;
                clamped += 1;
            }
        }
        if mean.iter().chain(chol.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("mixture parameters diverged at iteration {}", state.iter)));
        }
        components.push(GaussianComponent::new(mean, chol)?);
    }
    if clamped > 0 {
        log::debug!("iteration {}: clamped {clamped} Cholesky diagonal entries to {CHOL_FLOOR:e}", state.iter);
    }

    let labels = match (p.labels(), &grad.label_logits) {
        (Some(l), Some(gl)) => {
            let mut logits = logits_of(l);
            for i in 0..n {
                if pi[i] > 0.0 {
                    let s = alpha / pi[i];
                    for t in 0..l.ncols() {
                        logits[(i, t)] -= s * gl[(i, t)];
                    }
                }
            }
            Some(softmax_rows(&logits))
        }
        (l, _) => l.cloned(),
    };

    let weights = if cfg.flow_weights {
        let mean_g = pi.dot(&grad_pi);
        let logits = DVector::from_fn(n, |i, _| pi[i].max(PROB_FLOOR).ln() - alpha * pi[i] * (grad_pi[i] - mean_g));
        let m = logits.max();
        let e = logits.map(|x| (x - m).exp());
        &e / e.sum()
    } else {
        pi
    };

    let gmm = LabeledGmm::new(weights, components, labels)?;
    let mut trace = state.trace.clone();
    trace.push(TraceRecord { iter: state.iter, b_hat, g, v, u, f: b_hat + g + v + u });
    let mut norms = state.norms.clone();
    norms.push(ParamNorms::of(state.iter, &gmm));
    Ok(GmmFlowState { gmm, iter: state.iter + 1, trace, norms, clamped: state.clamped + clamped })
}

/// Result of a mixture flow run.
#[derive(Debug, Clone)]
pub struct GmmFlowOutput {
    pub gmm: LabeledGmm,
    pub trace: Vec<TraceRecord>,
    pub norms: Vec<ParamNorms>,
}

/// Initial mixture drawn from the inputs as configured.
pub fn initial_mixture(inputs: &[LabeledGmm], cfg: &GmmFlowConfig) -> Result<LabeledGmm> {
    let (d, classes) = check_inputs(inputs, cfg)?;
    let mut rng = seeded(cfg.seed);
    let m = cfg.init_samples;
    let mut pooled = DMatrix::zeros(m * inputs.len(), d);
    let mut labels = Vec::with_capacity(m * inputs.len());
    for (k, q) in inputs.iter().enumerate() {
        let draw = sample_reparam_rng(q, m, &mut rng);
        pooled.rows_mut(k * m, m).copy_from(&draw.points);
        if let Some(hard) = q.hard_labels() {
            labels.extend(draw.component_index.iter().map(|&i| hard[i]));
        }
    }
    let n = cfg.n_components;
    match cfg.init {
        GmmInit::Em => {
            let mut opts = EmOptions { seed: cfg.seed, diag_only: cfg.diag_only, ..EmOptions::default() };
            let fit = match classes {
                Some(c) => {
                    if n % c != 0 {
                        return Err(Error::validation(format!(
                            "{n} components cannot be split evenly over {c} classes"
                        )));
                    }
                    opts.components_per_class = n / c;
                    em_fit(&pooled, Some(&labels), &opts)?
                }
                None => {
                    opts.components_per_class = n;
                    em_fit(&pooled, None, &opts)?
                }
            };
            Ok(fit.gmm)
        }
        GmmInit::Random => {
            let (_, std) = EmpiricalMeasure::uniform(pooled.clone())?.moments();
            let rows = crate::measures::choose_without_replacement(pooled.nrows(), n.min(pooled.nrows()), &mut rng);
            let components = (0..n)
                .map(|i| {
                    let mean = pooled.row(rows[i % rows.len()]).transpose();
                    let chol = DMatrix::from_diagonal(&std.map(|s| if s > 0.0 { s } else { 1.0 }));
                    GaussianComponent::new(mean, chol)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = classes.map(|c| softmax_rows(&LabelInit::Random.logits(n, c, &mut rng)));
            LabeledGmm::uniform(components, labels)
        }
    }
}

/// Run the mixture flow for `n_iter` steps from `init`, or from
/// [`initial_mixture`] when absent.
pub fn run_gmm_flow(inputs: &[LabeledGmm], cfg: &GmmFlowConfig, init: Option<LabeledGmm>) -> Result<GmmFlowOutput> {
    let (d, _) = check_inputs(inputs, cfg)?;
    let start = match init {
        Some(g) => {
            if g.dim() != d {
                return Err(Error::dims(format!("initial mixture of dim {} for inputs of dim {d}", g.dim())));
            }
            g
        }
        None => initial_mixture(inputs, cfg)?,
    };
    let mut state = GmmFlowState::new(start);
    for it in 0..cfg.n_iter {
        state = gmm_flow_step(&state, inputs, cfg)?;
        if it % 50 == 0 {
            log::debug!("iteration {it}: B_hat {:.6e}", state.trace[it].b_hat);
        }
    }
    if state.clamped > 0 {
        log::warn!("clamped {} Cholesky diagonal entries to {CHOL_FLOOR:e} over {} steps", state.clamped, cfg.n_iter);
    }
    Ok(GmmFlowOutput { gmm: state.gmm, trace: state.trace, norms: state.norms })
}

/// Barycenter of Gaussians from the fixed-point map
/// `S <- S^{-1/2} (sum_k lambda_k (S^{1/2} S_k S^{1/2})^{1/2})^2 S^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBarycenter {
    pub gaussian: GaussianComponent,
    pub iterations: usize,
}

/// Iterate until the W2 distance between successive covariances drops below
/// `tol`, starting from the `lambda`-average of the covariances.
pub fn fixed_point_gaussian_barycenter(
    gaussians: &[GaussianComponent],
    lambda: &BarycentricCoordinates,
    tol: f64,
    max_iter: usize,
) -> Result<GaussianBarycenter> {
    if gaussians.is_empty() {
        return Err(Error::validation("no Gaussians given"));
    }
    if lambda.len() != gaussians.len() {
        return Err(Error::dims(format!("{} coordinates for {} Gaussians", lambda.len(), gaussians.len())));
    }
    let d = gaussians[0].dim();
    if gaussians.iter().any(|g| g.dim() != d) {
        return Err(Error::dims("Gaussians of different dimensions"));
    }
    let lam = lambda.as_slice();
    let mut mean = DVector::zeros(d);
    let mut s = DMatrix::zeros(d, d);
    let covs: Vec<DMatrix<f64>> = gaussians.iter().map(|g| g.covariance()).collect();
    for ((g, cov), l) in gaussians.iter().zip(&covs).zip(lam) {
        mean += g.mean() * *l;
        s += cov * *l;
    }
    let zero = DVector::zeros(d);
    for it in 1..=max_iter {
        let (root, inv_root) = sqrt_and_inv_sqrt(&s)?;
        let mut m = DMatrix::zeros(d, d);
        for (cov, l) in covs.iter().zip(lam) {
            m += cross_sqrt(&root, cov)? * *l;
        }
        let next = &inv_root * &m * &m * &inv_root;
        let next = (&next + next.transpose()) * 0.5;
        let change = bures_w2_sq(
            &GaussianComponent::from_covariance(zero.clone(), s.clone())?,
            &GaussianComponent::from_covariance(zero.clone(), next.clone())?,
        )?
        .max(0.0)
        .sqrt();
        s = next;
        if change < tol {
            return Ok(GaussianBarycenter { gaussian: GaussianComponent::from_covariance(mean, s)?, iterations: it });
        }
    }
    Err(Error::NotConverged { solver: "Gaussian fixed-point barycenter", iterations: max_iter })
}
