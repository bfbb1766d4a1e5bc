//! Network simplex for the uncapacitated transportation problem.
//!
//! Follows the primal network simplex of LEMON with a strongly feasible
//! spanning tree, block-search pricing and the thread/successor-count tree
//! representation. Nodes `0..n` are sources, `n..n+m` sinks and `n+m` is the
//! artificial root. Flows and potentials are `f64`; pricing uses a threshold
//! relative to the magnitude of the quantities involved.

use std::borrow::Cow;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;
const PRICING_EPS: f64 = 2.2e-15;
/// Recompute all potentials from the tree every this many pivots.
const POTENTIAL_REFRESH: usize = 256;

pub(crate) struct Solution {
    /// Row-major `n x m` flows.
    pub flow: Vec<f64>,
    pub cost: f64,
    /// Row and column dual potentials with `u_i + v_j <= c_ij`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pivots: usize,
}

struct Simplex<'a> {
    n: usize,
    m: usize,
    node_num: usize,
    arc_num: usize,
    costs: Cow<'a, [f64]>,
    /// Explicit `(row, column)` endpoints; `None` means the dense `n x m` grid.
    arcs: Option<Vec<(u32, u32)>>,
    art_cost: f64,

    flow: Vec<f64>,
    state: Vec<i8>,
    pi: Vec<f64>,

    parent: Vec<usize>,
    pred: Vec<usize>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pred_dir: Vec<i8>,
    dirty_revs: Vec<usize>,

    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: f64,

    next_arc: usize,
    block_size: usize,
}

impl<'a> Simplex<'a> {
    #[inline]
    fn real_ends(&self, e: usize) -> (usize, usize) {
        match &self.arcs {
            Some(arcs) => (arcs[e].0 as usize, self.n + arcs[e].1 as usize),
            None => (e / self.m, self.n + e % self.m),
        }
    }

    #[inline]
    fn source(&self, e: usize) -> usize {
        if e < self.arc_num {
            self.real_ends(e).0
        } else {
            let u = e - self.arc_num;
            if self.pred_dir_art(u) {
                u
            } else {
                self.node_num
            }
        }
    }

    #[inline]
    fn target(&self, e: usize) -> usize {
        if e < self.arc_num {
            self.real_ends(e).1
        } else {
            let u = e - self.arc_num;
            if self.pred_dir_art(u) {
                self.node_num
            } else {
                u
            }
        }
    }

    /// Artificial arc of node `u` points towards the root (source side).
    #[inline]
    fn pred_dir_art(&self, u: usize) -> bool {
        u < self.n
    }

    #[inline]
    fn cost(&self, e: usize) -> f64 {
        if e < self.arc_num {
            self.costs[e]
        } else if self.pred_dir_art(e - self.arc_num) {
            0.0
        } else {
            self.art_cost
        }
    }

    fn new(a: &[f64], b: &[f64], costs: Cow<'a, [f64]>, arcs: Option<Vec<(u32, u32)>>, max_cost: f64) -> Self {
        let n = a.len();
        let m = b.len();
        let node_num = n + m;
        let arc_num = costs.len();
        let all_arc_num = arc_num + node_num;
        let root = node_num;
        let art_cost = (max_cost + 1.0) * node_num as f64;

        let mut s = Simplex {
            n,
            m,
            node_num,
            arc_num,
            costs,
            arcs,
            art_cost,
            flow: vec![0.0; all_arc_num],
            state: vec![STATE_LOWER; all_arc_num],
            pi: vec![0.0; node_num + 1],
            parent: vec![NONE; node_num + 1],
            pred: vec![NONE; node_num + 1],
            thread: vec![0; node_num + 1],
            rev_thread: vec![0; node_num + 1],
            succ_num: vec![1; node_num + 1],
            last_succ: vec![0; node_num + 1],
            pred_dir: vec![DIR_UP; node_num + 1],
            dirty_revs: Vec::new(),
            in_arc: NONE,
            join: NONE,
            u_in: NONE,
            v_in: NONE,
            u_out: NONE,
            delta: 0.0,
            next_arc: 0,
            block_size: ((arc_num as f64).sqrt().ceil() as usize).max(10),
        };

        s.thread[root] = 0;
        s.rev_thread[0] = root;
        s.succ_num[root] = node_num + 1;
        s.last_succ[root] = root - 1;

        for u in 0..node_num {
            let e = arc_num + u;
            s.parent[u] = root;
            s.pred[u] = e;
            s.thread[u] = u + 1;
            s.rev_thread[u + 1] = u;
            s.succ_num[u] = 1;
            s.last_succ[u] = u;
            s.state[e] = STATE_TREE;
            if u < n {
                s.pred_dir[u] = DIR_UP;
                s.pi[u] = 0.0;
                s.flow[e] = a[u];
            } else {
                s.pred_dir[u] = DIR_DOWN;
                s.pi[u] = art_cost;
                s.flow[e] = b[u - n];
            }
        }
        s
    }

    /// Append nonbasic real arcs, keeping the current basis. The artificial
    /// arcs, which live after the real ones, are shifted up.
    fn add_arcs(&mut self, arcs: &[(u32, u32)], costs: &[f64]) {
        let k = arcs.len();
        if k == 0 {
            return;
        }
        let old = self.arc_num;
        self.arcs.as_mut().expect("arcs can only be added to a sparse problem").extend_from_slice(arcs);
        self.costs.to_mut().extend_from_slice(costs);
        self.flow.splice(old..old, std::iter::repeat_n(0.0, k));
        self.state.splice(old..old, std::iter::repeat_n(STATE_LOWER, k));
        for p in self.pred.iter_mut() {
            if *p != NONE && *p >= old {
                *p += k;
            }
        }
        self.arc_num += k;
        self.next_arc = 0;
        self.block_size = ((self.arc_num as f64).sqrt().ceil() as usize).max(10);
    }

    fn find_entering_arc(&mut self) -> bool {
        let mut min = 0.0;
        let mut best = NONE;
        let mut cnt = self.block_size;
        let mut e = self.next_arc;
        for _ in 0..self.arc_num {
            let (i, j) = self.real_ends(e);
            let c = self.costs[e];
            let pi_s = self.pi[i];
            let pi_t = self.pi[j];
            let rc = self.state[e] as f64 * (c + pi_s - pi_t);
            if rc < min {
                let scale = pi_s.abs().max(pi_t.abs()).max(c.abs());
                if rc < -PRICING_EPS * scale {
                    min = rc;
                    best = e;
                }
            }
            e += 1;
            if e == self.arc_num {
                e = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if best != NONE {
                    break;
                }
                cnt = self.block_size;
            }
        }
        if best == NONE {
            return false;
        }
        self.in_arc = best;
        self.next_arc = e;
        true
    }

    fn find_join_node(&mut self) {
        let mut u = self.source(self.in_arc);
        let mut v = self.target(self.in_arc);
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    /// Returns false when the cycle has no blocking arc.
    fn find_leaving_arc(&mut self) -> bool {
        // entering arcs are always at their lower bound
        let first = self.source(self.in_arc);
        let second = self.target(self.in_arc);
        self.delta = f64::INFINITY;
        let mut result = 0;

        let mut u = first;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_UP { self.flow[e] } else { f64::INFINITY };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_DOWN { self.flow[e] } else { f64::INFINITY };
            if d <= self.delta && d.is_finite() {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u];
        }

        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self) {
        let val = self.delta;
        if val > 0.0 {
            self.flow[self.in_arc] += val;
            let mut u = self.source(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] -= self.pred_dir[u] as f64 * val;
                u = self.parent[u];
            }
            let mut u = self.target(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] += self.pred_dir[u] as f64 * val;
                u = self.parent[u];
            }
        }
        self.state[self.in_arc] = STATE_TREE;
        let out = self.pred[self.u_out];
        self.state[out] = STATE_LOWER;
        self.flow[out] = 0.0;
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let join = self.join;
        let in_arc = self.in_arc;

        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source(in_arc) { DIR_UP } else { DIR_DOWN };

            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };

            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);

                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;

                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;

                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;

            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }

            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }

            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source(in_arc) { DIR_UP } else { DIR_DOWN };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }

        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }

        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let u_in = self.u_in;
        let sigma = self.pi[self.v_in] - self.pi[u_in] - self.pred_dir[u_in] as f64 * self.cost(self.in_arc);
        let end = self.thread[self.last_succ[u_in]];
        let mut u = u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    fn refresh_potentials(&mut self) {
        let root = self.node_num;
        self.pi[root] = 0.0;
        let mut u = self.thread[root];
        while u != root {
            let p = self.parent[u];
            let c = self.cost(self.pred[u]);
            self.pi[u] = if self.pred_dir[u] == DIR_UP { self.pi[p] - c } else { self.pi[p] + c };
            u = self.thread[u];
        }
    }

    fn run(&mut self, max_pivots: usize) -> Result<usize> {
        let mut pivots = 0;
        while self.find_entering_arc() {
            self.find_join_node();
            if !self.find_leaving_arc() {
                return Err(Error::Numerical("transport LP reported unbounded".into()));
            }
            self.change_flow();
            self.update_tree_structure();
            self.update_potential();
            pivots += 1;
            if pivots % POTENTIAL_REFRESH == 0 {
                self.refresh_potentials();
            }
            if pivots >= max_pivots {
                return Err(Error::NotConverged { solver: "network simplex", iterations: pivots });
            }
        }
        Ok(pivots)
    }
}

/// Solve `min <P, C>` over couplings of `a` and `b`; `costs` is row-major `n x m`.
///
/// Marginals must be nonnegative with (numerically) equal mass; the caller
/// validates that.
pub(crate) fn solve(a: &[f64], b: &[f64], costs: &[f64]) -> Result<Solution> {
    let n = a.len();
    let m = b.len();
    debug_assert_eq!(costs.len(), n * m);
    let max_cost = costs.iter().cloned().fold(0.0, f64::max);
    let mut s = Simplex::new(a, b, Cow::Borrowed(costs), None, max_cost);
    let max_pivots = 200 * (s.arc_num + s.node_num) + 100_000;
    let pivots = s.run(max_pivots)?;
    s.refresh_potentials();

    let mut flow = s.flow[..s.arc_num].to_vec();
    for f in flow.iter_mut() {
        if *f < 0.0 {
            *f = 0.0;
        }
    }
    let cost = flow.iter().zip(costs).map(|(f, c)| f * c).sum();
    let mut u: Vec<f64> = (0..n).map(|i| -s.pi[i]).collect();
    let mut v: Vec<f64> = (0..m).map(|j| s.pi[n + j]).collect();
    // shift so the row potentials are centered; u_i + v_j is unchanged
    let shift = u.iter().sum::<f64>() / n as f64;
    u.iter_mut().for_each(|x| *x -= shift);
    v.iter_mut().for_each(|x| *x += shift);
    Ok(Solution { flow, cost, u, v, pivots })
}

pub(crate) struct SparseSolution {
    /// Flow per listed arc, in insertion order.
    pub flow: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Mass still routed through the artificial root.
    pub infeasibility: f64,
}

/// Transportation problem restricted to a growing arc set. Supply that the
/// arcs cannot carry stays on artificial arcs priced from `max_cost`, an
/// upper bound on every cost of the full problem, so the duals remain
/// usable for pricing the missing arcs. Re-solving after [`add_arcs`]
/// continues from the previous basis.
///
/// [`add_arcs`]: SparseProblem::add_arcs
pub(crate) struct SparseProblem {
    simplex: Simplex<'static>,
}

impl SparseProblem {
    pub fn new(a: &[f64], b: &[f64], arcs: Vec<(u32, u32)>, costs: Vec<f64>, max_cost: f64) -> Self {
        debug_assert_eq!(arcs.len(), costs.len());
        Self { simplex: Simplex::new(a, b, Cow::Owned(costs), Some(arcs), max_cost) }
    }

    pub fn add_arcs(&mut self, arcs: &[(u32, u32)], costs: &[f64]) {
        self.simplex.add_arcs(arcs, costs);
    }

    pub fn costs(&self) -> &[f64] {
        &self.simplex.costs
    }

    pub fn solve(&mut self) -> Result<SparseSolution> {
        let s = &mut self.simplex;
        let max_pivots = 200 * (s.arc_num + s.node_num) + 100_000;
        s.run(max_pivots)?;
        s.refresh_potentials();
        let (n, m, arc_num) = (s.n, s.m, s.arc_num);
        let infeasibility = (n..n + m).map(|u| s.flow[arc_num + u].max(0.0)).sum();
        let flow = s.flow[..arc_num].iter().map(|f| f.max(0.0)).collect();
        let u = (0..n).map(|i| -s.pi[i]).collect();
        let v = (0..m).map(|j| s.pi[n + j]).collect();
        Ok(SparseSolution { flow, u, v, infeasibility })
    }
}
