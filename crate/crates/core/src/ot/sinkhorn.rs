//! Entropy-regularized transport by Sinkhorn scaling.
//!
//! The kernel-domain iteration is tried first; if the Gibbs kernel underflows
//! or a scaling vector stops being finite, the solve restarts in the log
//! domain, which works with dual potentials and log-sum-exp reductions.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct SinkhornOutput {
    pub plan: DMatrix<f64>,
    pub iterations: usize,
    pub marginal_error: f64,
    pub log_domain: bool,
}

pub(crate) fn sinkhorn(
    a: &DVector<f64>,
    b: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> SinkhornOutput {
    match kernel_domain(a, b, cost, epsilon, max_iter, tol) {
        Some(out) => out,
        None => log_domain(a, b, cost, epsilon, max_iter, tol),
    }
}

fn marginal_error(plan: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let rows: f64 = (0..plan.nrows()).map(|i| (plan.row(i).sum() - a[i]).abs()).sum();
    let cols: f64 = (0..plan.ncols()).map(|j| (plan.column(j).sum() - b[j]).abs()).sum();
    rows + cols
}

fn kernel_domain(
    a: &DVector<f64>,
    b: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Option<SinkhornOutput> {
    let k = cost.map(|c| (-c / epsilon).exp());
    // every row and column needs some kernel mass to be solvable here
    let tiny = 1e-290;
    if (0..k.nrows()).any(|i| a[i] > 0.0 && k.row(i).sum() < tiny)
        || (0..k.ncols()).any(|j| b[j] > 0.0 && k.column(j).sum() < tiny)
    {
        return None;
    }
    let mut u = DVector::from_element(a.len(), 1.0);
    let mut v = DVector::from_element(b.len(), 1.0);
    let mut iterations = 0;
    while iterations < max_iter {
        let kv = &k * &v;
        u = a.zip_map(&kv, |ai, x| if ai == 0.0 { 0.0 } else { ai / x });
        let ktu = k.tr_mul(&u);
        v = b.zip_map(&ktu, |bj, x| if bj == 0.0 { 0.0 } else { bj / x });
        iterations += 1;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return None;
        }
        if iterations % 10 == 0 || iterations == max_iter {
            // columns are exact after the v update; check the rows
            let kv = &k * &v;
            let err: f64 = (0..a.len()).map(|i| (u[i] * kv[i] - a[i]).abs()).sum();
            if err <= tol {
                break;
            }
        }
    }
    let plan = DMatrix::from_fn(a.len(), b.len(), |i, j| u[i] * k[(i, j)] * v[j]);
    if plan.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(SinkhornOutput { marginal_error: marginal_error(&plan, a, b), plan, iterations, log_domain: false })
}

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_domain(
    a: &DVector<f64>,
    b: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> SinkhornOutput {
    let (n, m) = cost.shape();
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let plan_of = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(n, m, |i, j| {
            let x = (f[i] + g[j] - cost[(i, j)]) / epsilon;
            if x.is_finite() { x.exp() } else { 0.0 }
        })
    };
    while iterations < max_iter {
        for i in 0..n {
            f[i] = if a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                let lse = logsumexp((0..m).map(|j| (g[j] - cost[(i, j)]) / epsilon));
                epsilon * (log_a[i] - lse)
            };
        }
        for j in 0..m {
            g[j] = if b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                let lse = logsumexp((0..n).map(|i| (f[i] - cost[(i, j)]) / epsilon));
                epsilon * (log_b[j] - lse)
            };
        }
        iterations += 1;
        if iterations % 10 == 0 || iterations == max_iter {
            let mut err = 0.0;
            for i in 0..n {
                if a[i] == 0.0 {
                    continue;
                }
                let lse = logsumexp((0..m).map(|j| (f[i] + g[j] - cost[(i, j)]) / epsilon));
                err += (lse.exp() - a[i]).abs();
            }
            if err <= tol {
                break;
            }
        }
    }
    let plan = plan_of(&f, &g);
    SinkhornOutput { marginal_error: marginal_error(&plan, a, b), plan, iterations, log_domain: true }
}
