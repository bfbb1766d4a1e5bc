//! Exact solver checked against independent oracles: permutation
//! enumeration, sorted 1-D matching, LP duality and the triangle inequality.

use baryflow::measures::EmpiricalMeasure;
use baryflow::ot::{joint_cost, solve_exact, solve_exact_dual, w2_empirical, EXACT_MAX_ENTRIES};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0))
}

#[test]
fn matches_permutation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..400 {
        let n = 1 + trial % 4;
        let d = 1 + trial % 3;
        let x = random_points(&mut rng, n, d);
        let y = random_points(&mut rng, n, d);
        let c = joint_cost(&x, &y, None, None, 0.0).unwrap();
        let w = DVector::from_element(n, 1.0 / n as f64);
        let (plan, cost) = solve_exact(&w, &w, &c).unwrap();
        let brute = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| c.values()[(i, j)]).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        assert!((cost - brute).abs() <= 1e-9, "trial {trial}: {cost} vs {brute}");
        assert!(plan.marginal_violation() <= 1e-12);
    }
}

#[test]
fn one_dimensional_quantile_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let mut a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..8.0)).collect();
        let p = EmpiricalMeasure::uniform(DMatrix::from_column_slice(n, 1, &a)).unwrap();
        let q = EmpiricalMeasure::uniform(DMatrix::from_column_slice(n, 1, &b)).unwrap();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let sorted = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt();
        let w = w2_empirical(&p, &q).unwrap();
        assert!((w - sorted).abs() <= 1e-10, "{w} vs {sorted}");
    }
}

#[test]
fn general_marginals_satisfy_duality() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..30 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(1..40);
        let x = random_points(&mut rng, n, 3);
        let y = random_points(&mut rng, m, 3);
        let mut a = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        let mut b = DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
        a /= a.sum();
        b /= b.sum();
        let c = joint_cost(&x, &y, None, None, 0.0).unwrap();
        let sol = solve_exact_dual(&a, &b, &c).unwrap();
        assert!(sol.plan.marginal_violation() <= 1e-12);
        assert!(sol.plan.coupling.iter().all(|&g| g >= 0.0));
        let dual = a.dot(&sol.u) + b.dot(&sol.v);
        assert!((dual - sol.cost).abs() <= 1e-9 * sol.cost.max(1.0));
        for i in 0..n {
            for j in 0..m {
                let slack = c.values()[(i, j)] - sol.u[i] - sol.v[j];
                assert!(slack >= -1e-9);
                if sol.plan.coupling[(i, j)] > 1e-12 {
                    assert!(slack.abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn triangle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let ms: Vec<EmpiricalMeasure> = (0..3)
            .map(|_| {
                let n = rng.random_range(1..12);
                EmpiricalMeasure::uniform(random_points(&mut rng, n, 2)).unwrap()
            })
            .collect();
        let ab = w2_empirical(&ms[0], &ms[1]).unwrap();
        let bc = w2_empirical(&ms[1], &ms[2]).unwrap();
        let ac = w2_empirical(&ms[0], &ms[2]).unwrap();
        assert!(ac <= ab + bc + 1e-7);
        assert!((w2_empirical(&ms[1], &ms[0]).unwrap() - ab).abs() < 1e-9);
    }
}

#[test]
fn batch_scale_problem_is_fast_and_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_points(&mut rng, 256, 2);
    let y = random_points(&mut rng, 128, 2);
    let c = joint_cost(&x, &y, None, None, 0.0).unwrap();
    let a = DVector::from_element(256, 1.0 / 256.0);
    let b = DVector::from_element(128, 1.0 / 128.0);
    let t = std::time::Instant::now();
    let sol = solve_exact_dual(&a, &b, &c).unwrap();
    let ms = t.elapsed().as_secs_f64() * 1e3;
    assert!(sol.plan.marginal_violation() <= 1e-12);
    let dual = a.dot(&sol.u) + b.dot(&sol.v);
    assert!((dual - sol.cost).abs() <= 1e-9);
    eprintln!("256x128 exact solve: {ms:.1} ms, {} pivots", sol.pivots);
}

#[test]
fn large_problems_match_dense_solver() {
    // force the column-generation path by exceeding the dense threshold and
    // compare against a dense solve of the same problem
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 520;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let y = DMatrix::from_fn(n, 2, |_, j| rng.random_range(-1.0..3.0) * (1.0 + j as f64));
    let wx = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    let wx = &wx / wx.sum();
    let p = EmpiricalMeasure::new(x.clone(), wx.clone()).unwrap();
    let q = EmpiricalMeasure::uniform(y.clone()).unwrap();
    assert!(n * n > EXACT_MAX_ENTRIES);
    let w = w2_empirical(&p, &q).unwrap();
    let cost = joint_cost(&x, &y, None, None, 0.0).unwrap();
    let (_, dense) = solve_exact(&wx, q.weights(), &cost).unwrap();
    assert!((w * w - dense).abs() < 1e-9 * dense.max(1.0), "{} vs {dense}", w * w);
}
