//! Discrete optimal transport: ground costs, exact and entropic solvers,
//! barycentric maps and the empirical 2-Wasserstein distance.
//!
//! Costs are always squared distances (`p = 2`). The exact solver is a
//! network simplex; the entropic solver is Sinkhorn with a log-domain
//! fallback. [`OtSolver::Auto`] picks exact below [`EXACT_MAX_ENTRIES`] cost
//! entries and entropic with `epsilon = 0.05 * median(C)` above.

mod column_generation;
mod network_simplex;
mod sinkhorn;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{EmpiricalMeasure, LabeledEmpiricalMeasure};

/// Largest `n * m` for which [`OtSolver::Auto`] uses the exact solver.
pub const EXACT_MAX_ENTRIES: usize = 250_000;
/// Relative entropic regularization used when none is given.
pub const DEFAULT_EPSILON_FACTOR: f64 = 0.05;
/// Mass mismatch above which marginals are rejected.
pub const MARGINAL_TOL: f64 = 1e-9;

/// Squared ground costs between two point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::validation("cost entries must be finite and nonnegative"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.values.iter().copied().collect();
        if v.is_empty() {
            return 0.0;
        }
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    }

    fn row_major(&self) -> Vec<f64> {
        let (n, m) = self.values.shape();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }
}

/// A coupling together with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: DMatrix<f64>,
    pub row_marginal: DVector<f64>,
    pub col_marginal: DVector<f64>,
}

impl TransportPlan {
    /// Largest absolute deviation of the coupling's sums from the marginals.
    pub fn marginal_violation(&self) -> f64 {
        let rows = (0..self.coupling.nrows())
            .map(|i| (self.coupling.row(i).sum() - self.row_marginal[i]).abs())
            .fold(0.0, f64::max);
        let cols = (0..self.coupling.ncols())
            .map(|j| (self.coupling.column(j).sum() - self.col_marginal[j]).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    /// `<coupling, C>`.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.coupling.component_mul(cost.values()).sum()
    }
}

/// Squared joint feature-label cost `|x - y|^2 + beta |lx - ly|^2`.
///
/// Labels must be given on both sides or neither; without labels this is the
/// squared Euclidean cost.
pub fn joint_cost(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    labels_x: Option<&DMatrix<f64>>,
    labels_y: Option<&DMatrix<f64>>,
    beta: f64,
) -> Result<CostMatrix> {
    if x.ncols() != y.ncols() {
        return Err(Error::dims(format!("feature dims {} vs {}", x.ncols(), y.ncols())));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!("label weight beta must be >= 0, got {beta}")));
    }
    let labels = match (labels_x, labels_y) {
        (None, None) => None,
        (Some(a), Some(b)) => {
            if a.ncols() != b.ncols() {
                return Err(Error::dims(format!("label dims {} vs {}", a.ncols(), b.ncols())));
            }
            if a.nrows() != x.nrows() || b.nrows() != y.nrows() {
                return Err(Error::dims("label rows must match point rows"));
            }
            Some((a, b))
        }
        _ => return Err(Error::validation("labels must be given for both point sets or neither")),
    };
    let (n, m, d) = (x.nrows(), y.nrows(), x.ncols());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..d {
                        let t = x[(i, k)] - y[(j, k)];
                        s += t * t;
                    }
                    if let Some((lx, ly)) = labels {
                        if beta > 0.0 {
                            let mut l = 0.0;
                            for c in 0..lx.ncols() {
                                let t = lx[(i, c)] - ly[(j, c)];
                                l += t * t;
                            }
                            s += beta * l;
                        }
                    }
                    s
                })
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
    CostMatrix::new(values)
}

fn check_marginals(a: &DVector<f64>, b: &DVector<f64>, cost: &CostMatrix) -> Result<()> {
    if cost.shape() != (a.len(), b.len()) {
        return Err(Error::dims(format!(
            "cost is {:?} but marginals have lengths {} and {}",
            cost.shape(),
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("empty marginal"));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::validation("marginals must be finite and nonnegative"));
    }
    let (sa, sb) = (a.sum(), b.sum());
    if (sa - sb).abs() > MARGINAL_TOL {
        return Err(Error::InfeasibleMarginals { source_mass: sa, target_mass: sb });
    }
    Ok(())
}

/// Exact solution with the dual potentials of the transport LP.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub plan: TransportPlan,
    pub cost: f64,
    /// Row potentials; `u_i + v_j <= C_ij` with equality on the support.
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub pivots: usize,
}

/// Exact optimal transport by network simplex.
pub fn solve_exact(a: &DVector<f64>, b: &DVector<f64>, cost: &CostMatrix) -> Result<(TransportPlan, f64)> {
    let sol = solve_exact_dual(a, b, cost)?;
    Ok((sol.plan, sol.cost))
}

pub fn solve_exact_dual(a: &DVector<f64>, b: &DVector<f64>, cost: &CostMatrix) -> Result<ExactSolution> {
    check_marginals(a, b, cost)?;
    let (n, m) = cost.shape();
    let sol = network_simplex::solve(a.as_slice(), b.as_slice(), &cost.row_major())?;
    let coupling = DMatrix::from_fn(n, m, |i, j| sol.flow[i * m + j]);
    Ok(ExactSolution {
        plan: TransportPlan { coupling, row_marginal: a.clone(), col_marginal: b.clone() },
        cost: sol.cost,
        u: DVector::from_vec(sol.u),
        v: DVector::from_vec(sol.v),
        pivots: sol.pivots,
    })
}

/// Result of an entropic solve.
#[derive(Debug, Clone)]
pub struct EntropicSolution {
    pub plan: TransportPlan,
    /// `<plan, C>` without the entropy term.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of absolute row and column marginal deviations.
    pub marginal_error: f64,
    /// True when the kernel underflowed and log-domain iterations were used.
    pub log_domain: bool,
}

/// Sinkhorn transport with regularization `epsilon`.
pub fn solve_entropic(
    a: &DVector<f64>,
    b: &DVector<f64>,
    cost: &CostMatrix,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<EntropicSolution> {
    check_marginals(a, b, cost)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::validation(format!("epsilon must be positive, got {epsilon}")));
    }
    let out = sinkhorn::sinkhorn(a, b, cost.values(), epsilon, max_iter.max(1), tol);
    if out.plan.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("Sinkhorn produced a non-finite plan".into()));
    }
    let plan = TransportPlan { coupling: out.plan, row_marginal: a.clone(), col_marginal: b.clone() };
    let c = plan.cost(cost);
    Ok(EntropicSolution {
        plan,
        cost: c,
        iterations: out.iterations,
        converged: out.marginal_error <= tol,
        marginal_error: out.marginal_error,
        log_domain: out.log_domain,
    })
}

/// Which solver computes transport plans inside the flows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OtSolver {
    /// Exact up to [`EXACT_MAX_ENTRIES`] entries, entropic above.
    #[default]
    Auto,
    Exact,
    /// Sinkhorn; `epsilon` defaults to `0.05 * median(C)`.
    Entropic { epsilon: Option<f64> },
}

impl OtSolver {
    /// Short name recorded in run reports.
    pub fn describe(&self, n: usize, m: usize) -> String {
        match self.resolve(n, m) {
            OtSolver::Exact => "exact".into(),
            OtSolver::Entropic { epsilon: Some(e) } => format!("entropic(eps={e})"),
            _ => "entropic(eps=0.05*median)".into(),
        }
    }

    fn resolve(self, n: usize, m: usize) -> OtSolver {
        match self {
            OtSolver::Auto if n * m <= EXACT_MAX_ENTRIES => OtSolver::Exact,
            OtSolver::Auto => OtSolver::Entropic { epsilon: None },
            other => other,
        }
    }

    pub fn solve(&self, a: &DVector<f64>, b: &DVector<f64>, cost: &CostMatrix) -> Result<(TransportPlan, f64)> {
        match self.resolve(a.len(), b.len()) {
            OtSolver::Exact => solve_exact(a, b, cost),
            OtSolver::Entropic { epsilon } => {
                let eps = epsilon.unwrap_or_else(|| (DEFAULT_EPSILON_FACTOR * cost.median()).max(1e-12));
                let sol = solve_entropic(a, b, cost, eps, 2000, 1e-9)?;
                if !sol.converged {
                    log::debug!("Sinkhorn stopped with marginal error {:.3e}", sol.marginal_error);
                }
                Ok((sol.plan, sol.cost))
            }
            OtSolver::Auto => unreachable!("resolved above"),
        }
    }
}

/// Map each source point to the plan-weighted mean of the targets it sends mass to.
pub fn barycentric_map(plan: &TransportPlan, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = plan.coupling.shape();
    if y.nrows() != m {
        return Err(Error::dims(format!("plan has {m} columns but {} target points", y.nrows())));
    }
    let mut out = DMatrix::zeros(n, y.ncols());
    for i in 0..n {
        let mass = plan.coupling.row(i).sum();
        if mass <= 0.0 {
            return Err(Error::validation(format!("plan row {i} carries no mass")));
        }
        for j in 0..m {
            let g = plan.coupling[(i, j)];
            if g != 0.0 {
                for k in 0..y.ncols() {
                    out[(i, k)] += g * y[(j, k)];
                }
            }
        }
        for k in 0..y.ncols() {
            out[(i, k)] /= mass;
        }
    }
    Ok(out)
}

/// Row-major copy of `x`, with `sqrt(beta)`-scaled label columns appended.
fn joint_rows(x: &DMatrix<f64>, labels: Option<&DMatrix<f64>>, beta: f64) -> Vec<f64> {
    let scale = beta.sqrt();
    let mut out = Vec::new();
    for i in 0..x.nrows() {
        out.extend(x.row(i).iter());
        if let Some(l) = labels {
            out.extend(l.row(i).iter().map(|v| v * scale));
        }
    }
    out
}

/// Nearest counterparts per point in the initial arc set.
const SEED_NEIGHBORS: usize = 8;

/// Candidate arcs for column generation: each point is pushed through the
/// moment-matched affine map between the clouds and paired with its nearest
/// counterparts on the other side.
fn seed_arcs(xr: &[f64], yr: &[f64], w: usize, a: &DVector<f64>, b: &DVector<f64>) -> Result<Vec<(usize, usize)>> {
    let to_matrix = |r: &[f64]| DMatrix::from_row_slice(r.len() / w, w, r);
    let (x, y) = (to_matrix(xr), to_matrix(yr));
    let moments = |p: &DMatrix<f64>, wt: &DVector<f64>| {
        let mean = p.tr_mul(wt) / wt.sum();
        let mut cov = DMatrix::zeros(w, w);
        for (i, row) in p.row_iter().enumerate() {
            let r = row.transpose() - &mean;
            cov += &r * r.transpose() * wt[i];
        }
        let mut cov = cov / wt.sum();
        let ridge = (1e-9 * cov.trace() / w as f64).max(1e-12);
        for k in 0..w {
            cov[(k, k)] += ridge;
        }
        (mean, cov)
    };
    let (mx, sx) = moments(&x, a);
    let (my, sy) = moments(&y, b);
    let forward = crate::gaussian::bures_map(&sx, &sy)?;
    let backward = crate::gaussian::bures_map(&sy, &sx)?;
    let push_through = |p: &DMatrix<f64>, from: &DVector<f64>, to: &DVector<f64>, map: &DMatrix<f64>| {
        let mut out = Vec::with_capacity(p.len());
        for row in p.row_iter() {
            let z = map * (row.transpose() - from) + to;
            out.extend(z.iter());
        }
        out
    };
    let tx = push_through(&x, &mx, &my, &forward);
    let ty = push_through(&y, &my, &mx, &backward);
    let dist = |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).map(|(s, t)| (s - t) * (s - t)).sum() };
    let (n, m) = (x.nrows(), y.nrows());
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pi = &tx[i * w..(i + 1) * w];
            column_generation::smallest_k((0..m).map(|j| (j, dist(pi, &yr[j * w..(j + 1) * w]))), SEED_NEIGHBORS.min(m))
        })
        .collect();
    let cols: Vec<Vec<usize>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let qj = &ty[j * w..(j + 1) * w];
            column_generation::smallest_k((0..n).map(|i| (i, dist(qj, &xr[i * w..(i + 1) * w]))), SEED_NEIGHBORS.min(n))
        })
        .collect();
    let mut seeds = northwest_along_axis(&tx, yr, w, &sy, a, b);
    for (i, js) in rows.iter().enumerate() {
        seeds.extend(js.iter().map(|&j| (i, j)));
    }
    for (j, is) in cols.iter().enumerate() {
        seeds.extend(is.iter().map(|&i| (i, j)));
    }
    Ok(seeds)
}

/// Feasible arcs from the north-west corner rule after sorting both clouds
/// along the principal axis of the target, so the restricted problem never
/// starts infeasible.
fn northwest_along_axis(
    tx: &[f64],
    yr: &[f64],
    w: usize,
    sy: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
) -> Vec<(usize, usize)> {
    let eig = nalgebra::SymmetricEigen::new(sy.clone());
    let axis = eig.eigenvectors.column(eig.eigenvalues.imax()).clone_owned();
    let order = |r: &[f64]| {
        let proj: Vec<f64> = r.chunks(w).map(|z| z.iter().zip(axis.iter()).map(|(p, q)| p * q).sum()).collect();
        let mut idx: Vec<usize> = (0..proj.len()).collect();
        idx.sort_by(|&i, &j| proj[i].total_cmp(&proj[j]).then(i.cmp(&j)));
        idx
    };
    let (rows, cols) = (order(tx), order(yr));
    let mut arcs = Vec::with_capacity(rows.len() + cols.len());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[rows[0]], b[cols[0]]);
    loop {
        arcs.push((rows[i], cols[j]));
        if i + 1 == rows.len() && j + 1 == cols.len() {
            break;
        }
        let row_done = ra <= rb && i + 1 < rows.len() || j + 1 == cols.len();
        if row_done {
            rb -= ra;
            i += 1;
            ra = a[rows[i]];
        } else {
            ra -= rb;
            j += 1;
            rb = b[cols[j]];
        }
    }
    arcs
}

/// Optimal cost under the joint metric. Small problems use the dense exact
/// solver; larger ones are solved exactly by column generation without
/// storing the cost matrix.
fn exact_joint_cost(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    labels: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    beta: f64,
) -> Result<f64> {
    let (n, m) = (p.len(), q.len());
    if n * m <= EXACT_MAX_ENTRIES {
        let cost = joint_cost(p.points(), q.points(), labels.map(|l| l.0), labels.map(|l| l.1), beta)?;
        return Ok(solve_exact(p.weights(), q.weights(), &cost)?.1);
    }
    if p.dim() != q.dim() {
        return Err(Error::dims(format!("measures of dims {} and {}", p.dim(), q.dim())));
    }
    let xr = joint_rows(p.points(), labels.map(|l| l.0), beta);
    let yr = joint_rows(q.points(), labels.map(|l| l.1), beta);
    let w = xr.len() / n;
    let cost = |i: usize, j: usize| -> f64 {
        xr[i * w..(i + 1) * w].iter().zip(&yr[j * w..(j + 1) * w]).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    // |x - y|^2 <= (|x - c| + |y - c|)^2 for any centre c
    let radius = |r: &[f64]| -> f64 {
        r.chunks(w).map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
    };
    let max_cost = (radius(&xr) + radius(&yr)).powi(2);
    let seeds = seed_arcs(&xr, &yr, w, p.weights(), q.weights())?;
    let sol = column_generation::solve_implicit(p.weights().as_slice(), q.weights().as_slice(), cost, seeds, max_cost)?;
    log::debug!("column generation: {} arcs after {} rounds", sol.arcs.len(), sol.rounds);
    Ok(sol.cost)
}

/// Exact 2-Wasserstein distance between feature clouds.
pub fn w2_empirical(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    Ok(exact_joint_cost(p, q, None, 0.0)?.max(0.0).sqrt())
}

/// Exact 2-Wasserstein distance under the joint feature-label metric, using
/// the soft labels of both measures.
pub fn w2_labeled(p: &LabeledEmpiricalMeasure, q: &LabeledEmpiricalMeasure, beta: f64) -> Result<f64> {
    if p.n_classes() != q.n_classes() {
        return Err(Error::dims(format!("{} vs {} classes", p.n_classes(), q.n_classes())));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!("label weight must be finite and non-negative, got {beta}")));
    }
    let (lp, lq) = (p.soft_labels(), q.soft_labels());
    Ok(exact_joint_cost(p.base(), q.base(), Some((&lp, &lq)), beta)?.max(0.0).sqrt())
}
