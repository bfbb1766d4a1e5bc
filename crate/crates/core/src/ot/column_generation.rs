//! Exact transport for problems too large to store the cost matrix.
//!
//! The LP is solved on a sparse arc set supplied by the caller. The duals of that restricted problem price every pair,
//! evaluated on the fly, and negatively priced arcs are added until none
//! remain, at which point the restricted optimum is optimal for the full
//! problem.

use std::collections::HashSet;

use rayon::prelude::*;

use super::network_simplex;
use crate::error::{Error, Result};

/// Most negative arcs added per row in one pricing round.
const ADD_PER_ROW: usize = 8;
const MAX_ROUNDS: usize = 100;
const PRICE_TOL: f64 = 1e-11;

pub(crate) struct ImplicitSolution {
    pub arcs: Vec<(u32, u32)>,
    pub cost: f64,
    pub rounds: usize,
}

/// Indices of the `k` smallest scores, ascending.
pub(crate) fn smallest_k(scores: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, c) in scores {
        if best.len() < k || c < best[best.len() - 1].0 {
            let pos = best.partition_point(|&(b, _)| b <= c);
            best.insert(pos, (c, j));
            best.truncate(k);
        }
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Solve with `seeds` as the initial arc set; `max_cost` must bound every
/// entry of the full cost matrix from above.
pub(crate) fn solve_implicit<F>(
    a: &[f64],
    b: &[f64],
    cost: F,
    seeds: impl IntoIterator<Item = (usize, usize)>,
    max_cost: f64,
) -> Result<ImplicitSolution>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let (n, m) = (a.len(), b.len());
    if n > u32::MAX as usize || m > u32::MAX as usize {
        return Err(Error::validation("transport problem too large"));
    }
    if !max_cost.is_finite() {
        return Err(Error::validation("cost is not finite"));
    }
    let mut present: HashSet<(u32, u32)> = HashSet::new();
    let mut arcs = Vec::new();
    let mut push = |arcs: &mut Vec<(u32, u32)>, i: usize, j: usize| {
        if present.insert((i as u32, j as u32)) {
            arcs.push((i as u32, j as u32));
        }
    };
    for (i, j) in seeds {
        push(&mut arcs, i, j);
    }

    let costs: Vec<f64> = arcs.par_iter().map(|&(i, j)| cost(i as usize, j as usize)).collect();
    let mut problem = network_simplex::SparseProblem::new(a, b, arcs.clone(), costs, max_cost);
    for round in 1..=MAX_ROUNDS {
        let sol = problem.solve()?;
        let (u, v) = (&sol.u, &sol.v);
        let additions: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let negative = (0..m).filter_map(|j| {
                    let c = cost(i, j);
                    let rc = c - u[i] - v[j];
                    let scale = c.abs().max(u[i].abs()).max(v[j].abs()).max(1.0);
                    (rc < -PRICE_TOL * scale).then_some((j, rc))
                });
                smallest_k(negative, ADD_PER_ROW)
            })
            .collect();
        let before = arcs.len();
        for (i, js) in additions.iter().enumerate() {
            for &j in js {
                push(&mut arcs, i, j);
            }
        }
        if arcs.len() == before {
            if sol.infeasibility > 1e-9 {
                return Err(Error::Numerical(format!(
                    "restricted transport left {:.3e} mass unrouted",
                    sol.infeasibility
                )));
            }
            let total = sol.flow.iter().zip(problem.costs()).map(|(f, c)| f * c).sum();
            return Ok(ImplicitSolution { arcs, cost: total, rounds: round });
        }
        let new = &arcs[before..];
        let new_costs: Vec<f64> = new.par_iter().map(|&(i, j)| cost(i as usize, j as usize)).collect();
        problem.add_arcs(new, &new_costs);
        log::debug!("column generation round {round}: {} arcs", arcs.len());
    }
    Err(Error::NotConverged { solver: "column generation", iterations: MAX_ROUNDS })
}
