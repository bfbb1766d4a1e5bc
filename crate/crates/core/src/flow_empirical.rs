//! Particle gradient flow for (labeled) empirical barycenters.
//!
//! Each step solves one transport plan per input mini-batch at the current
//! particles, then moves particles and label logits along the negative
//! gradient of the barycenter objective plus the configured energies, with
//! the plans held fixed. The step size is given in the interpolation form
//! `alpha'`: with no energies a step is `z <- (1 - alpha') z + alpha' sum_k
//! lambda_k T_k(z)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{entropy_potential, hinge_repulsion, target_potential, FunctionalSpec};
use crate::gaussian::{GaussianComponent, LabeledGmm};
use crate::measures::{
    choose_without_replacement, one_hot, select_rows, softmax_rows, BarycentricCoordinates, EmpiricalMeasure,
    LabelInit, LabeledEmpiricalMeasure, MiniBatch,
};
use crate::ot::{barycentric_map, joint_cost, OtSolver, TransportPlan};
use crate::rng::{seeded, Rng};

/// Anything the flows can draw i.i.d. mini-batches from.
pub trait Sampler: Sync {
    fn dim(&self) -> usize;
    /// Number of classes when samples carry labels.
    fn n_classes(&self) -> Option<usize>;
    fn sample(&self, m: usize, source_index: usize, rng: &mut Rng) -> Result<MiniBatch>;
}

fn sample_rows(w: &DVector<f64>, uniform: bool, m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = w.len();
    if uniform {
        if m >= n {
            return Ok((0..n).collect());
        }
        return Ok(choose_without_replacement(n, m, rng));
    }
    let dist = WeightedIndex::new(w.iter().copied()).map_err(|e| Error::validation(e.to_string()))?;
    Ok((0..m).map(|_| dist.sample(rng)).collect())
}

impl Sampler for EmpiricalMeasure {
    fn dim(&self) -> usize {
        EmpiricalMeasure::dim(self)
    }

    fn n_classes(&self) -> Option<usize> {
        None
    }

    fn sample(&self, m: usize, source_index: usize, rng: &mut Rng) -> Result<MiniBatch> {
        let idx = sample_rows(self.weights(), self.is_uniform(), m, rng)?;
        MiniBatch::new(select_rows(self.points(), &idx), None, source_index)
    }
}

impl Sampler for LabeledEmpiricalMeasure {
    fn dim(&self) -> usize {
        LabeledEmpiricalMeasure::dim(self)
    }

    fn n_classes(&self) -> Option<usize> {
        Some(LabeledEmpiricalMeasure::n_classes(self))
    }

    fn sample(&self, m: usize, source_index: usize, rng: &mut Rng) -> Result<MiniBatch> {
        let idx = sample_rows(self.weights(), self.base().is_uniform(), m, rng)?;
        let hard = self.hard_labels();
        let labels: Vec<usize> = idx.iter().map(|&i| hard[i]).collect();
        let onehot = one_hot(&labels, LabeledEmpiricalMeasure::n_classes(self))?;
        MiniBatch::new(select_rows(self.points(), &idx), Some(onehot), source_index)
    }
}

impl Sampler for GaussianComponent {
    fn dim(&self) -> usize {
        GaussianComponent::dim(self)
    }

    fn n_classes(&self) -> Option<usize> {
        None
    }

    fn sample(&self, m: usize, source_index: usize, rng: &mut Rng) -> Result<MiniBatch> {
        let d = GaussianComponent::dim(self);
        let eps = DMatrix::from_fn(m, d, |_, _| rand::Rng::sample::<f64, _>(rng, StandardNormal));
        let mut x = eps * self.chol().transpose();
        for mut row in x.row_iter_mut() {
            row += self.mean().transpose();
        }
        MiniBatch::new(x, None, source_index)
    }
}

impl Sampler for LabeledGmm {
    fn dim(&self) -> usize {
        LabeledGmm::dim(self)
    }

    fn n_classes(&self) -> Option<usize> {
        LabeledGmm::n_classes(self)
    }

    fn sample(&self, m: usize, source_index: usize, rng: &mut Rng) -> Result<MiniBatch> {
        let s = crate::gaussian::sample_reparam_rng(self, m, rng);
        let labels = match self.hard_labels() {
            Some(hard) => {
                let rows: Vec<usize> = s.component_index.iter().map(|&k| hard[k]).collect();
                Some(one_hot(&rows, self.n_classes().unwrap_or(1))?)
            }
            None => None,
        };
        MiniBatch::new(s.points, labels, source_index)
    }
}

/// How the particles are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowInit {
    /// Zero-mean Gaussian scaled to the per-dimension std of the first batch.
    #[default]
    Gaussian,
    /// Points drawn from the first input.
    Subsample,
    /// Supplied by the caller through [`run_flow_from`].
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmpiricalFlowConfig {
    /// Number of barycenter particles; 0 means the batch size.
    pub n_particles: usize,
    /// Interpolation step `alpha'` in (0, 1].
    pub step_size: f64,
    /// Weight `beta` of the label term in the transport cost.
    pub label_weight: f64,
    pub batch_size: usize,
    pub n_iter: usize,
    /// Barycentric coordinates; uniform when absent.
    pub coordinates: Option<BarycentricCoordinates>,
    pub functional: FunctionalSpec,
    pub init: FlowInit,
    pub label_init: LabelInit,
    pub seed: u64,
    pub solver: OtSolver,
}

impl Default for EmpiricalFlowConfig {
    fn default() -> Self {
        Self {
            n_particles: 0,
            step_size: 0.5,
            label_weight: 0.0,
            batch_size: 128,
            n_iter: 300,
            coordinates: None,
            functional: FunctionalSpec::default(),
            init: FlowInit::Gaussian,
            label_init: LabelInit::Uniform,
            seed: 0,
            solver: OtSolver::Auto,
        }
    }
}

impl EmpiricalFlowConfig {
    pub fn validate(&self, n_inputs: usize) -> Result<()> {
        self.validate_step(n_inputs, false)
    }

    fn validate_step(&self, n_inputs: usize, allow_zero_step: bool) -> Result<()> {
        let positive = self.step_size > 0.0 || (allow_zero_step && self.step_size == 0.0);
        if !(positive && self.step_size.is_finite()) {
            return Err(Error::validation(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.label_weight >= 0.0 && self.label_weight.is_finite()) {
            return Err(Error::validation(format!("label_weight must be non-negative, got {}", self.label_weight)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if n_inputs == 0 {
            return Err(Error::validation("at least one input measure is required"));
        }
        if let Some(c) = &self.coordinates {
            if c.len() != n_inputs {
                return Err(Error::dims(format!("{} coordinates for {n_inputs} inputs", c.len())));
            }
        }
        if self.functional.internal_weight > 0.0 {
            return Err(Error::validation("internal energy needs a density; use the mixture flow"));
        }
        self.functional.validate()
    }

    pub fn particles(&self) -> usize {
        if self.n_particles == 0 {
            self.batch_size
        } else {
            self.n_particles
        }
    }

    pub fn lambda(&self, k: usize) -> Vec<f64> {
        match &self.coordinates {
            Some(c) => c.as_slice().to_vec(),
            None => BarycentricCoordinates::uniform(k).as_slice().to_vec(),
        }
    }
}

/// Objective values recorded for one step. `v` and `u` are weighted
/// potential and interaction energies, `g` the weighted internal energy, and
/// `f = b_hat + g + v + u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub b_hat: f64,
    pub g: f64,
    pub v: f64,
    pub u: f64,
    pub f: f64,
}

/// Trace as CSV with header `iter,B_hat,G,V,U,F`.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("iter,B_hat,G,V,U,F\n");
    for r in trace {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", r.iter, r.b_hat, r.g, r.v, r.u, r.f)
            .expect("writing to a string");
    }
    out
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub measure: LabeledEmpiricalMeasure,
    /// Completed steps.
    pub iter: usize,
    /// One record per completed step, evaluated at the particles the step
    /// started from.
    pub trace: Vec<TraceRecord>,
}

impl FlowState {
    pub fn new(measure: LabeledEmpiricalMeasure) -> Self {
        Self { measure, iter: 0, trace: Vec::new() }
    }
}

/// Plans between the particles and each batch under the joint cost.
fn batch_plans(
    z: &DMatrix<f64>,
    soft: Option<&DMatrix<f64>>,
    batches: &[MiniBatch],
    beta: f64,
    solver: OtSolver,
) -> Result<Vec<(TransportPlan, f64)>> {
    let n = z.nrows();
    let a = DVector::from_element(n, 1.0 / n as f64);
    batches
        .par_iter()
        .map(|batch| {
            let labels = match soft {
                Some(s) => {
                    let l = batch.labels.as_ref().ok_or_else(|| {
                        Error::validation(format!("batch from input {} has no labels", batch.source_index))
                    })?;
                    Some((s, l))
                }
                None => None,
            };
            let cost = joint_cost(z, &batch.points, labels.map(|l| l.0), labels.map(|l| l.1), beta)?;
            let b = DVector::from_element(batch.len(), 1.0 / batch.len() as f64);
            solver.solve(&a, &b, &cost)
        })
        .collect()
}

/// One block-coordinate step: plans at the current particles, then a
/// gradient step on particles and label logits with the plans fixed.
pub fn flow_step(state: &FlowState, batches: &[MiniBatch], cfg: &EmpiricalFlowConfig) -> Result<FlowState> {
    let k = batches.len();
    cfg.validate(k)?;
    let lambda = cfg.lambda(k);
    let measure = &state.measure;
    let (n, d) = (measure.len(), measure.dim());
    let c = measure.n_classes();
    if batches.iter().any(|b| b.is_empty()) {
        return Err(Error::validation("empty mini-batch"));
    }
    if let Some(b) = batches.iter().find(|b| b.points.ncols() != d) {
        return Err(Error::dims(format!("batch of dim {} for particles of dim {d}", b.points.ncols())));
    }
    let beta = cfg.label_weight;
    let labeled = beta > 0.0;
    let soft = softmax_rows(measure.label_logits());
    if labeled {
        for b in batches {
            match &b.labels {
                Some(l) if l.ncols() == c => {}
                Some(l) => return Err(Error::dims(format!("batch has {} classes, particles {c}", l.ncols()))),
                None => return Err(Error::validation(format!("batch from input {} has no labels", b.source_index))),
            }
        }
    }
    let z = measure.points();
    let plans = batch_plans(z, labeled.then_some(&soft), batches, beta, cfg.solver)?;

    // interpolation step alpha' on the barycenter term, raw step alpha' n / 2
    let alpha = cfg.step_size * n as f64 / 2.0;
    let mut b_hat = 0.0;
    let mut grad_z = DMatrix::zeros(n, d);
    let mut grad_l = DMatrix::zeros(n, c);
    for ((plan, cost), (batch, lam)) in plans.iter().zip(batches.iter().zip(&lambda)) {
        b_hat += lam * cost;
        let mapped = barycentric_map(plan, &batch.points)?;
        let rows = plan.coupling.column_sum();
        for i in 0..n {
            let w = 2.0 * lam * rows[i];
            for t in 0..d {
                grad_z[(i, t)] += w * (z[(i, t)] - mapped[(i, t)]);
            }
        }
        if labeled {
            let mapped_labels = barycentric_map(plan, batch.labels.as_ref().expect("checked above"))?;
            for i in 0..n {
                let w = 2.0 * beta * lam * rows[i];
                let r = DVector::from_fn(c, |j, _| soft[(i, j)] - mapped_labels[(i, j)]);
                // softmax Jacobian (diag(p) - p p^T) applied to r
                let pr: f64 = (0..c).map(|j| soft[(i, j)] * r[j]).sum();
                for j in 0..c {
                    grad_l[(i, j)] += w * soft[(i, j)] * (r[j] - pr);
                }
            }
        }
    }

    let spec = &cfg.functional;
    let (mut v, mut u) = (0.0, 0.0);
    if spec.entropy_weight > 0.0 {
        let (h, gh) = entropy_potential(measure.label_logits());
        v += spec.entropy_weight * h;
        grad_l += gh * spec.entropy_weight;
    }
    if spec.target_weight > 0.0 {
        let target = spec.target_measure.as_ref().expect("validated");
        let t = target_potential(measure, target, cfg.solver)?;
        v += spec.target_weight * t.value;
        grad_z += t.grad_points * spec.target_weight;
        grad_l += t.grad_logits * spec.target_weight;
    }
    if spec.repulsion_weight > 0.0 {
        let (r, gr) = hinge_repulsion(z, &measure.hard_labels(), spec.repulsion_margin, spec.repulsion_metric)?;
        u += spec.repulsion_weight * r;
        grad_z += gr * spec.repulsion_weight;
    }

    let new_z = z - grad_z * alpha;
    let new_l = measure.label_logits() - grad_l * alpha;
    if new_z.iter().chain(new_l.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("particles diverged at iteration {}", state.iter)));
    }
    let base = EmpiricalMeasure::new(new_z, measure.weights().clone())?;
    let mut trace = state.trace.clone();
    trace.push(TraceRecord { iter: state.iter, b_hat, g: 0.0, v, u, f: b_hat + v + u });
    Ok(FlowState { measure: LabeledEmpiricalMeasure::new(base, new_l)?, iter: state.iter + 1, trace })
}

fn draw_batches(inputs: &[&dyn Sampler], m: usize, rng: &mut Rng) -> Result<Vec<MiniBatch>> {
    inputs.iter().enumerate().map(|(k, s)| s.sample(m, k, rng)).collect()
}

fn check_inputs(inputs: &[&dyn Sampler], cfg: &EmpiricalFlowConfig) -> Result<(usize, usize)> {
    check_inputs_with(inputs, cfg, false)
}

fn check_inputs_with(inputs: &[&dyn Sampler], cfg: &EmpiricalFlowConfig, allow_zero_step: bool) -> Result<(usize, usize)> {
    cfg.validate_step(inputs.len(), allow_zero_step)?;
    let d = inputs[0].dim();
    if inputs.iter().any(|s| s.dim() != d) {
        return Err(Error::dims("inputs of different dimensions"));
    }
    let classes: Vec<Option<usize>> = inputs.iter().map(|s| s.n_classes()).collect();
    let c = classes.iter().flatten().copied().max().unwrap_or(1);
    if cfg.label_weight > 0.0 && classes.iter().any(|k| *k != Some(c)) {
        return Err(Error::validation("a positive label weight needs every input labeled with the same classes"));
    }
    Ok((d, c))
}

/// Result of a flow run.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub measure: LabeledEmpiricalMeasure,
    pub trace: Vec<TraceRecord>,
}

/// Run `n_iter` steps with fresh batches each iteration.
pub fn run_flow(inputs: &[&dyn Sampler], cfg: &EmpiricalFlowConfig) -> Result<FlowOutput> {
    let (d, c) = check_inputs(inputs, cfg)?;
    let mut rng = seeded(cfg.seed);
    let n = cfg.particles();
    let first = draw_batches(inputs, cfg.batch_size, &mut rng)?;
    let points = match cfg.init {
        FlowInit::Gaussian => {
            let b = &first[0].points;
            let std = DVector::from_fn(d, |t, _| {
                let col = b.column(t);
                let mean = col.mean();
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            });
            DMatrix::from_fn(n, d, |_, t| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) * std[t])
        }
        FlowInit::Subsample => inputs[0].sample(n, 0, &mut rng)?.points,
        FlowInit::Explicit => {
            return Err(Error::validation("explicit initialization requires run_flow_from"));
        }
    };
    if points.nrows() != n {
        return Err(Error::validation(format!("first input provides only {} of {n} particles", points.nrows())));
    }
    let logits = cfg.label_init.logits(n, c, &mut rng);
    let init = LabeledEmpiricalMeasure::new(EmpiricalMeasure::uniform(points)?, logits)?;
    iterate(inputs, cfg, init, first, &mut rng)
}

/// Run the flow from a caller-supplied initial measure.
pub fn run_flow_from(
    inputs: &[&dyn Sampler],
    cfg: &EmpiricalFlowConfig,
    init: LabeledEmpiricalMeasure,
) -> Result<FlowOutput> {
    let (d, c) = check_inputs(inputs, cfg)?;
    if init.dim() != d || init.n_classes() != c {
        return Err(Error::dims(format!(
            "initial measure has dim {} and {} classes, inputs {d} and {c}",
            init.dim(),
            init.n_classes()
        )));
    }
    let mut rng = seeded(cfg.seed);
    let first = draw_batches(inputs, cfg.batch_size, &mut rng)?;
    iterate(inputs, cfg, init, first, &mut rng)
}

fn iterate(
    inputs: &[&dyn Sampler],
    cfg: &EmpiricalFlowConfig,
    init: LabeledEmpiricalMeasure,
    first: Vec<MiniBatch>,
    rng: &mut Rng,
) -> Result<FlowOutput> {
    let mut state = FlowState::new(init);
    let mut batches = first;
    for it in 0..cfg.n_iter {
        if it > 0 {
            batches = draw_batches(inputs, cfg.batch_size, rng)?;
        }
        state = flow_step(&state, &batches, cfg)?;
        if it % 50 == 0 {
            log::debug!("iteration {it}: B_hat {:.6e}", state.trace[it].b_hat);
        }
    }
    Ok(FlowOutput { measure: state.measure, trace: state.trace })
}

/// Full-batch fixed-point iteration on complete datasets: particles move to
/// `(1 - alpha') z + alpha' sum_k lambda_k T_k(z)` and, when labeled, soft
/// labels to the same combination of the transported input labels.
pub fn fixed_point_baseline(inputs: &[LabeledEmpiricalMeasure], cfg: &EmpiricalFlowConfig) -> Result<LabeledEmpiricalMeasure> {
    let samplers: Vec<&dyn Sampler> = inputs.iter().map(|m| m as &dyn Sampler).collect();
    let (d, c) = check_inputs_with(&samplers, cfg, true)?;
    let mut rng = seeded(cfg.seed);
    let n = cfg.particles();
    let points = match cfg.init {
        FlowInit::Gaussian => {
            let (_, std) = inputs[0].base().moments();
            DMatrix::from_fn(n, d, |_, t| {
                let s = if std[t] > 0.0 { std[t] } else { 1.0 };
                rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) * s
            })
        }
        FlowInit::Subsample => inputs[0].sample(n, 0, &mut rng)?.points,
        FlowInit::Explicit => return Err(Error::validation("explicit initialization requires a measure")),
    };
    let logits = cfg.label_init.logits(points.nrows(), c, &mut rng);
    let init = LabeledEmpiricalMeasure::new(EmpiricalMeasure::uniform(points)?, logits)?;
    fixed_point_from(inputs, cfg, init)
}

/// [`fixed_point_baseline`] from a given initial measure.
pub fn fixed_point_from(
    inputs: &[LabeledEmpiricalMeasure],
    cfg: &EmpiricalFlowConfig,
    init: LabeledEmpiricalMeasure,
) -> Result<LabeledEmpiricalMeasure> {
    let samplers: Vec<&dyn Sampler> = inputs.iter().map(|m| m as &dyn Sampler).collect();
    check_inputs_with(&samplers, cfg, true)?;
    let k = inputs.len();
    let lambda = cfg.lambda(k);
    let alpha = cfg.step_size;
    let beta = cfg.label_weight;
    let labeled = beta > 0.0;
    let n = init.len();
    let a = DVector::from_element(n, 1.0 / n as f64);
    let mut z = init.points().clone();
    let mut soft = init.soft_labels();
    let mut logits = init.label_logits().clone();
    let targets: Vec<DMatrix<f64>> = inputs.iter().map(|m| one_hot(&m.hard_labels(), m.n_classes())).collect::<Result<_>>()?;
    for _ in 0..cfg.n_iter {
        let maps: Vec<(DMatrix<f64>, DMatrix<f64>)> = inputs
            .par_iter()
            .zip(&targets)
            .map(|(m, y)| {
                let cost = if labeled {
                    joint_cost(&z, m.points(), Some(&soft), Some(y), beta)?
                } else {
                    joint_cost(&z, m.points(), None, None, 0.0)?
                };
                let (plan, _) = cfg.solver.solve(&a, m.weights(), &cost)?;
                Ok((barycentric_map(&plan, m.points())?, barycentric_map(&plan, y)?))
            })
            .collect::<Result<_>>()?;
        let mut next_z = &z * (1.0 - alpha);
        let mut next_y = &soft * (1.0 - alpha);
        for ((tz, ty), lam) in maps.iter().zip(&lambda) {
            next_z += tz * (alpha * lam);
            next_y += ty * (alpha * lam);
        }
        z = next_z;
        if labeled {
            soft = next_y;
            logits = soft.map(|p| p.max(1e-12).ln());
        }
    }
    LabeledEmpiricalMeasure::new(EmpiricalMeasure::uniform(z)?, logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn particles(x: &[f64]) -> LabeledEmpiricalMeasure {
        LabeledEmpiricalMeasure::new(
            EmpiricalMeasure::uniform(DMatrix::from_column_slice(x.len(), 1, x)).unwrap(),
            DMatrix::zeros(x.len(), 1),
        )
        .unwrap()
    }

    fn batch(x: &[f64], k: usize) -> MiniBatch {
        MiniBatch::new(DMatrix::from_column_slice(x.len(), 1, x), None, k).unwrap()
    }

    fn cfg(step: f64) -> EmpiricalFlowConfig {
        EmpiricalFlowConfig { step_size: step, solver: OtSolver::Exact, ..Default::default() }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let state = FlowState::new(particles(&[0.0, 1.0, 3.0]));
        let next = flow_step(&state, &[batch(&[3.0, 0.0, 1.0], 0)], &cfg(0.5)).unwrap();
        assert_eq!(next.measure.points(), state.measure.points());
        assert_eq!(next.trace.len(), 1);
        assert_eq!(next.trace[0].b_hat, 0.0);
    }

    #[test]
    fn full_step_jumps_to_the_batch() {
        let state = FlowState::new(particles(&[0.0]));
        let next = flow_step(&state, &[batch(&[4.0], 0)], &cfg(1.0)).unwrap();
        assert_eq!(next.measure.points()[(0, 0)], 4.0);
        assert_eq!(next.trace[0].b_hat, 16.0);
    }

    #[test]
    fn two_inputs_average() {
        let state = FlowState::new(particles(&[0.0]));
        let next = flow_step(&state, &[batch(&[0.0], 0), batch(&[4.0], 1)], &cfg(1.0)).unwrap();
        assert_eq!(next.measure.points()[(0, 0)], 2.0);
    }

    #[test]
    fn labeled_step_needs_labels() {
        let state = FlowState::new(particles(&[0.0]));
        let c = EmpiricalFlowConfig { label_weight: 1.0, ..cfg(0.5) };
        assert!(flow_step(&state, &[batch(&[1.0], 0)], &c).is_err());
    }

    #[test]
    fn label_logits_follow_the_plan() {
        let base = EmpiricalMeasure::uniform(DMatrix::from_column_slice(2, 1, &[0.0, 5.0])).unwrap();
        let state = FlowState::new(LabeledEmpiricalMeasure::new(base, DMatrix::zeros(2, 2)).unwrap());
        let b = MiniBatch::new(
            DMatrix::from_column_slice(2, 1, &[0.0, 5.0]),
            Some(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])),
            0,
        )
        .unwrap();
        let c = EmpiricalFlowConfig { label_weight: 1.0, ..cfg(0.5) };
        let mut s = state;
        for _ in 0..50 {
            s = flow_step(&s, std::slice::from_ref(&b), &c).unwrap();
        }
        assert_eq!(s.measure.hard_labels(), vec![0, 1]);
    }

    #[test]
    fn trace_csv_layout() {
        let rec = TraceRecord { iter: 0, b_hat: 1.0, g: 0.0, v: 0.5, u: 0.0, f: 1.5 };
        let csv = trace_csv(&[rec]);
        assert!(csv.starts_with("iter,B_hat,G,V,U,F\n0,1.0000000000000000e0,"));
    }

    #[test]
    fn zero_step_keeps_init() {
        let init = particles(&[0.3, -1.0]);
        let inputs = vec![LabeledEmpiricalMeasure::from_hard_labels(
            EmpiricalMeasure::uniform(DMatrix::from_column_slice(2, 1, &[5.0, 6.0])).unwrap(),
            &[0, 0],
            1,
        )
        .unwrap()];
        let mut c = cfg(0.5);
        c.step_size = 0.0;
        c.n_iter = 5;
        let out = fixed_point_from(&inputs, &c, init.clone()).unwrap();
        assert_eq!(out.points(), init.points());
    }
}
