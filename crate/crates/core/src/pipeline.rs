//! Multi-source domain adaptation through a labeled barycenter, and
//! diagnostics of flow convergence.
//!
//! Adaptation computes a labeled barycenter of the sources, transports it
//! onto the unlabeled target features with a feature-only exact plan, and
//! classifies target points by their nearest transported barycenter particle.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::TargetDomain;
use crate::error::{Error, Result};
use crate::flow_empirical::{fixed_point_baseline, run_flow, EmpiricalFlowConfig, Sampler, TraceRecord};
use crate::flow_gmm::{run_gmm_flow, GmmFlowConfig};
use crate::gaussian::{em_fit, sample_reparam, EmOptions, LabeledGmm};
use crate::measures::{argmax_rows, one_hot, EmpiricalMeasure, LabeledEmpiricalMeasure};
use crate::ot::{barycentric_map, joint_cost, solve_exact, w2_empirical};
use crate::rng::{child_seed, seeded};

/// Version of the JSON reports written by this module.
pub const SCHEMA_VERSION: u32 = 1;

/// Largest support used for alignment plans and reference distances.
pub const MAX_ALIGN_POINTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarycenterKind {
    /// Mini-batch particle flow.
    #[default]
    Empirical,
    /// Mixture flow on per-source EM fits, sampled to particles.
    Gmm,
    /// Full-batch fixed-point iteration.
    DiscreteBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdaConfig {
    pub kind: BarycenterKind,
    /// Settings of the particle flow and of the fixed-point baseline.
    pub flow: EmpiricalFlowConfig,
    pub gmm: GmmFlowConfig,
    /// Particles drawn from the flowed mixture.
    pub gmm_particles: usize,
    /// EM components per class when fitting the sources.
    pub gmm_components_per_class: usize,
    pub seed: u64,
}

impl Default for MsdaConfig {
    fn default() -> Self {
        Self {
            kind: BarycenterKind::Empirical,
            flow: EmpiricalFlowConfig { n_particles: 256, batch_size: 128, n_iter: 100, ..Default::default() },
            gmm: GmmFlowConfig { n_iter: 100, ..Default::default() },
            gmm_particles: 256,
            gmm_components_per_class: 1,
            seed: 0,
        }
    }
}

/// Wall time of each adaptation stage in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub barycenter_ms: f64,
    pub alignment_ms: f64,
    pub classification_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdaReport {
    pub schema_version: u32,
    pub barycenter_kind: BarycenterKind,
    pub accuracy_source_only: f64,
    pub accuracy_adapted: f64,
    pub config: MsdaConfig,
    /// Left out of the JSON so reports are identical across runs.
    #[serde(skip)]
    pub timings: StageTimings,
}

impl MsdaReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Predict each query row's label as the label of its nearest training row;
/// ties go to the lowest training index.
pub fn nearest_neighbor_predict(train: &DMatrix<f64>, labels: &[usize], query: &DMatrix<f64>) -> Result<Vec<usize>> {
    if train.nrows() == 0 || train.nrows() != labels.len() {
        return Err(Error::dims(format!("{} training rows with {} labels", train.nrows(), labels.len())));
    }
    if train.ncols() != query.ncols() {
        return Err(Error::dims(format!("training dim {} vs query dim {}", train.ncols(), query.ncols())));
    }
    Ok((0..query.nrows())
        .map(|i| {
            let q = query.row(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..train.nrows() {
                let dist = (train.row(j) - q).norm_squared();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            labels[best.1]
        })
        .collect())
}

/// Soft labels of `points` propagated from labeled sources through
/// feature-only exact plans, combined with weights `lambda`.
pub fn propagate_labels(
    points: &DMatrix<f64>,
    sources: &[LabeledEmpiricalMeasure],
    lambda: &[f64],
    seed: u64,
) -> Result<DMatrix<f64>> {
    let c = sources.iter().map(|s| s.n_classes()).max().unwrap_or(1);
    let n = points.nrows();
    let a = DVector::from_element(n, 1.0 / n as f64);
    let mut soft = DMatrix::zeros(n, c);
    for (k, (s, lam)) in sources.iter().zip(lambda).enumerate() {
        let mut rng = seeded(child_seed(seed, k as u64));
        let idx = subsample_indices(s.len(), &mut rng);
        let x = DMatrix::from_fn(idx.len(), s.dim(), |i, t| s.points()[(idx[i], t)]);
        let hard = s.hard_labels();
        let y = one_hot(&idx.iter().map(|&i| hard[i]).collect::<Vec<_>>(), c)?;
        let w = DVector::from_iterator(idx.len(), idx.iter().map(|&i| s.weights()[i]));
        let b = &w / w.sum();
        let (plan, _) = solve_exact(&a, &b, &joint_cost(points, &x, None, None, 0.0)?)?;
        soft += barycentric_map(&plan, &y)? * *lam;
    }
    Ok(soft)
}

fn subsample_indices(n: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    if n <= MAX_ALIGN_POINTS {
        (0..n).collect()
    } else {
        let mut idx = crate::measures::choose_without_replacement(n, MAX_ALIGN_POINTS, rng);
        idx.sort_unstable();
        idx
    }
}

/// Labeled barycenter particles and their hard labels.
fn barycenter(sources: &[LabeledEmpiricalMeasure], target: &EmpiricalMeasure, cfg: &MsdaConfig) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let k = sources.len();
    let c = sources[0].n_classes();
    match cfg.kind {
        BarycenterKind::Empirical | BarycenterKind::DiscreteBaseline => {
            let mut flow = cfg.flow.clone();
            flow.seed = child_seed(cfg.seed, 1);
            if flow.functional.target_weight > 0.0 {
                flow.functional.target_measure = Some(target.clone());
            }
            let measure = if cfg.kind == BarycenterKind::Empirical {
                let samplers: Vec<&dyn Sampler> = sources.iter().map(|s| s as &dyn Sampler).collect();
                run_flow(&samplers, &flow)?.measure
            } else {
                fixed_point_baseline(sources, &flow)?
            };
            let labels = if flow.label_weight > 0.0 {
                measure.hard_labels()
            } else {
                let soft = propagate_labels(measure.points(), sources, &flow.lambda(k), child_seed(cfg.seed, 2))?;
                argmax_rows(&soft)
            };
            Ok((measure.points().clone(), labels))
        }
        BarycenterKind::Gmm => {
            let fits = sources
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let opts = EmOptions {
                        components_per_class: cfg.gmm_components_per_class,
                        seed: child_seed(cfg.seed, 10 + i as u64),
                        diag_only: cfg.gmm.diag_only,
                        ..EmOptions::default()
                    };
                    Ok(em_fit(s.points(), Some(&s.hard_labels()), &opts)?.gmm)
                })
                .collect::<Result<Vec<LabeledGmm>>>()?;
            let mut gmm_cfg = cfg.gmm.clone();
            gmm_cfg.seed = child_seed(cfg.seed, 1);
            gmm_cfg.n_components = cfg.gmm_components_per_class * c;
            if gmm_cfg.functional.target_weight > 0.0 {
                gmm_cfg.functional.target_measure = Some(target.clone());
            }
            let out = run_gmm_flow(&fits, &gmm_cfg, None)?;
            let draw = sample_reparam(&out.gmm, cfg.gmm_particles, child_seed(cfg.seed, 3));
            let hard = out.gmm.hard_labels().ok_or_else(|| Error::validation("flowed mixture lost its labels"))?;
            let labels = draw.component_index.iter().map(|&i| hard[i]).collect();
            Ok((draw.points, labels))
        }
    }
}

/// Adapt labeled `sources` to the target features and report target
/// accuracy of the 1-NN classifier before and after adaptation.
pub fn msda_adapt(sources: &[LabeledEmpiricalMeasure], target: &TargetDomain, cfg: &MsdaConfig) -> Result<MsdaReport> {
    if sources.is_empty() {
        return Err(Error::validation("at least one source domain is required"));
    }
    let d = target.features.dim();
    if sources.iter().any(|s| s.dim() != d) {
        return Err(Error::dims("sources and target of different dimensions"));
    }
    let c = sources[0].n_classes();
    if sources.iter().any(|s| s.n_classes() != c) {
        return Err(Error::dims("sources with different label classes"));
    }
    let features = &target.features;

    let pooled_rows: usize = sources.iter().map(|s| s.len()).sum();
    let mut pooled = DMatrix::zeros(pooled_rows, d);
    let mut pooled_labels = Vec::with_capacity(pooled_rows);
    let mut row = 0;
    for s in sources {
        pooled.rows_mut(row, s.len()).copy_from(s.points());
        pooled_labels.extend(s.hard_labels());
        row += s.len();
    }
    let source_only = nearest_neighbor_predict(&pooled, &pooled_labels, features.points())?;
    let accuracy_source_only = target.labels.accuracy(&source_only)?;

    let t0 = Instant::now();
    let (particles, labels) = barycenter(sources, features, cfg)?;
    let barycenter_ms = t0.elapsed().as_secs_f64() * 1e3;

    // the alignment stage sees target features only
    let t1 = Instant::now();
    let mut rng = seeded(child_seed(cfg.seed, 4));
    let aligned_target = features.subsample(MAX_ALIGN_POINTS, &mut rng);
    let n = particles.nrows();
    let a = DVector::from_element(n, 1.0 / n as f64);
    let cost = joint_cost(&particles, aligned_target.points(), None, None, 0.0)?;
    let (plan, _) = solve_exact(&a, aligned_target.weights(), &cost)?;
    let transported = barycentric_map(&plan, aligned_target.points())?;
    let alignment_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let adapted = nearest_neighbor_predict(&transported, &labels, features.points())?;
    let accuracy_adapted = target.labels.accuracy(&adapted)?;
    let classification_ms = t2.elapsed().as_secs_f64() * 1e3;

    Ok(MsdaReport {
        schema_version: SCHEMA_VERSION,
        barycenter_kind: cfg.kind,
        accuracy_source_only,
        accuracy_adapted,
        config: cfg.clone(),
        timings: StageTimings { barycenter_ms, alignment_ms, classification_ms },
    })
}

/// Least-squares fit of `log(B_hat - plateau)` against the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub b_hat: Vec<f64>,
    pub decay_rate: f64,
    pub plateau: f64,
    pub r_squared: f64,
    /// Iterations `[0, window_end)` used by the fit.
    pub window_end: usize,
}

impl ConvergenceReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Shortest trace accepted by [`convergence_report`].
pub const MIN_TRACE_LEN: usize = 50;
const RESIDUAL_FLOOR: f64 = 1e-12;
const MIN_WINDOW: usize = 3;

pub fn convergence_report(trace: &[TraceRecord]) -> Result<ConvergenceReport> {
    convergence_report_values(&trace.iter().map(|r| r.b_hat).collect::<Vec<_>>())
}

/// The plateau is the mean of the last 20% of the trace. The decay window
/// runs from the start until the residual first falls to
/// `max(3 sigma_tail, 0.01 r_0)`, where `sigma_tail` is the standard deviation
/// of the last 20% and `r_0` the initial residual, and spans at least three
/// points.
pub fn convergence_report_values(b_hat: &[f64]) -> Result<ConvergenceReport> {
    let n = b_hat.len();
    if n < MIN_TRACE_LEN {
        return Err(Error::validation(format!("trace of length {n} is shorter than {MIN_TRACE_LEN}")));
    }
    if b_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("trace has non-finite values"));
    }
    let tail = &b_hat[n - n / 5..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    let sigma = (tail.iter().map(|x| (x - plateau).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    let r0 = b_hat[0] - plateau;
    let threshold = (3.0 * sigma).max(0.01 * r0);
    let mut end = b_hat.iter().position(|x| x - plateau <= threshold).unwrap_or(n);
    end = end.clamp(MIN_WINDOW, n);

    let ys: Vec<f64> = b_hat[..end].iter().map(|x| (x - plateau).max(RESIDUAL_FLOOR).ln()).collect();
    let xs: Vec<f64> = (0..end).map(|t| t as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / end as f64, ys.iter().sum::<f64>() / end as f64);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if syy <= 0.0 {
        1.0
    } else {
        let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
        1.0 - sse / syy
    };
    Ok(ConvergenceReport {
        schema_version: SCHEMA_VERSION,
        b_hat: b_hat.to_vec(),
        decay_rate: (-slope).max(0.0),
        plateau: plateau.max(0.0),
        r_squared,
        window_end: end,
    })
}

/// Exact W2 between the two measures after subsampling each to at most
/// [`MAX_ALIGN_POINTS`] points.
pub fn w2_to_reference(result: &EmpiricalMeasure, reference: &EmpiricalMeasure, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let a = result.subsample(MAX_ALIGN_POINTS, &mut rng);
    let b = reference.subsample(MAX_ALIGN_POINTS, &mut rng);
    w2_empirical(&a, &b)
}
