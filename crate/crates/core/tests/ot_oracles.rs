use ndarray::{array, Array2};
use otnn::data::{make_uniform_measure, DiscreteMeasure};
use otnn::ot::{
    brute_force_balanced, gibbs_kernel, marginal_violation, ot_objective, sinkhorn_balanced, sinkhorn_unbalanced,
    CostMatrix, OTParams, TransportPlan,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize, scale: f64) -> CostMatrix {
    CostMatrix::new(Array2::from_shape_fn((n, m), |_| rng.random::<f64>() * scale)).unwrap()
}

/// The unbalanced objective written out longhand for a 2x2 plan.
fn objective_2x2(g: [f64; 4], c: &[f64; 4], a: &[f64; 2], b: &[f64; 2], eps: f64, lambda: f64) -> f64 {
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let kl = |p: f64, q: f64| xlnx(p) - p * q.ln() - p + q;
    let rows = [g[0] + g[1], g[2] + g[3]];
    let cols = [g[0] + g[2], g[1] + g[3]];
    let transport: f64 = g.iter().zip(c).map(|(x, y)| x * y).sum();
    let entropy: f64 = g.iter().map(|&x| xlnx(x)).sum();
    transport + eps * entropy + lambda * (kl(rows[0], a[0]) + kl(rows[1], a[1]) + kl(cols[0], b[0]) + kl(cols[1], b[1]))
}

/// Coarse-to-fine grid search over `[0, 1]^4`; the objective is convex so
/// each refinement stays around the incumbent. Final resolution is 1e-4.
fn grid_argmin_2x2(f: impl Fn([f64; 4]) -> f64) -> [f64; 4] {
    let mut best = [0.0; 4];
    let mut best_val = f64::INFINITY;
    let coarse: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    for &x0 in &coarse {
        for &x1 in &coarse {
            for &x2 in &coarse {
                for &x3 in &coarse {
                    let v = f([x0, x1, x2, x3]);
                    if v < best_val {
                        best_val = v;
                        best = [x0, x1, x2, x3];
                    }
                }
            }
        }
    }
    let mut step = 0.05;
    while step > 1e-4 * 1.01 {
        step /= 5.0;
        let center = best;
        for d0 in -6..=6 {
            for d1 in -6..=6 {
                for d2 in -6..=6 {
                    for d3 in -6..=6 {
                        let g = [
                            center[0] + d0 as f64 * step,
                            center[1] + d1 as f64 * step,
                            center[2] + d2 as f64 * step,
                            center[3] + d3 as f64 * step,
                        ];
                        if g.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                            continue;
                        }
                        let v = f(g);
                        if v < best_val {
                            best_val = v;
                            best = g;
                        }
                    }
                }
            }
        }
    }
    best
}

fn tight(eps: f64, lambda: f64) -> OTParams {
    OTParams {
        epsilon: eps,
        lambda,
        tol: 1e-12,
        max_iter: 100_000,
    }
}

fn plan_2x2(p: &TransportPlan) -> [f64; 4] {
    [p.plan[[0, 0]], p.plan[[0, 1]], p.plan[[1, 0]], p.plan[[1, 1]]]
}

#[test]
fn unbalanced_zero_cost_matches_grid_search() {
    let a = [0.5, 0.5];
    let (eps, lambda) = (0.2, 0.5);
    let c = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
    let m = make_uniform_measure(2).unwrap();
    let solved = plan_2x2(&sinkhorn_unbalanced(&c, &m, &m, &tight(eps, lambda)).unwrap());
    let oracle = grid_argmin_2x2(|g| objective_2x2(g, &[0.0; 4], &a, &a, eps, lambda));
    for (s, o) in solved.iter().zip(&oracle) {
        assert!((s - o).abs() < 1e-3, "solver {solved:?} vs grid {oracle:?}");
    }
}

#[test]
fn unbalanced_asymmetric_instance_matches_grid_search() {
    let a = [0.3, 0.7];
    let b = [0.6, 0.4];
    let cost = [0.1, 0.9, 0.5, 0.2];
    let (eps, lambda) = (0.1, 1.0);
    let c = CostMatrix::new(array![[0.1, 0.9], [0.5, 0.2]]).unwrap();
    let (ma, mb) = (
        DiscreteMeasure::new(a.to_vec()).unwrap(),
        DiscreteMeasure::new(b.to_vec()).unwrap(),
    );
    let solved = plan_2x2(&sinkhorn_unbalanced(&c, &ma, &mb, &tight(eps, lambda)).unwrap());
    let oracle = grid_argmin_2x2(|g| objective_2x2(g, &cost, &a, &b, eps, lambda));
    for (s, o) in solved.iter().zip(&oracle) {
        assert!((s - o).abs() < 1e-3, "solver {solved:?} vs grid {oracle:?}");
    }
}

#[test]
fn tiny_lambda_puts_no_mass_on_a_huge_cost() {
    let a = [0.5, 0.5];
    let cost = [0.0, 1.0, 1.0, 1e3];
    let (eps, lambda) = (0.2, 1e-6);
    let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 1e3]]).unwrap();
    let m = make_uniform_measure(2).unwrap();
    let solved = sinkhorn_unbalanced(&c, &m, &m, &tight(eps, lambda)).unwrap();
    assert!(solved.plan[[1, 1]] <= 1e-6);
    let oracle = grid_argmin_2x2(|g| objective_2x2(g, &cost, &a, &a, eps, lambda));
    assert!(oracle[3] <= 1e-6);
}

#[test]
fn unbalanced_solution_beats_random_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let c = random_cost(&mut rng, 4, 4, 1.0);
        let m = make_uniform_measure(4).unwrap();
        let p = tight(0.2, 0.5);
        let g = sinkhorn_unbalanced(&c, &m, &m, &p).unwrap();
        assert!(g.converged);
        let best = ot_objective(&g, &c, &m, &m, &p).unwrap();
        for _ in 0..100 {
            let mut q = g.clone();
            for x in q.plan.iter_mut() {
                *x = (*x + (rng.random::<f64>() - 0.5) * 0.02).max(0.0);
            }
            assert!(ot_objective(&q, &c, &m, &m, &p).unwrap() >= best - 1e-12);
        }
    }
}

#[test]
fn balanced_solution_beats_marginal_preserving_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let c = random_cost(&mut rng, 4, 4, 1.0);
        let m = make_uniform_measure(4).unwrap();
        let p = tight(0.2, 0.5);
        let g = sinkhorn_balanced(&c, &m, &m, &p).unwrap();
        assert!(g.converged);
        // Exact marginals, so only transport and entropy terms move.
        let value = |plan: &TransportPlan| ot_objective(plan, &c, &m, &m, &p).unwrap();
        let best = value(&g);
        for _ in 0..100 {
            let mut q = g.clone();
            let (i, k) = (rng.random_range(0..4), rng.random_range(0..4));
            let (j, l) = (rng.random_range(0..4), rng.random_range(0..4));
            if i == k || j == l {
                continue;
            }
            let room = q.plan[[i, l]].min(q.plan[[k, j]]);
            let delta = rng.random::<f64>() * room;
            q.plan[[i, j]] += delta;
            q.plan[[k, l]] += delta;
            q.plan[[i, l]] -= delta;
            q.plan[[k, j]] -= delta;
            assert!(value(&q) >= best - 1e-12);
        }
    }
}

#[test]
fn marginal_violation_shrinks_as_lambda_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let c = random_cost(&mut rng, 5, 5, 1.0);
        let m = make_uniform_measure(5).unwrap();
        let mut last = f64::INFINITY;
        for lambda in [0.1, 1.0, 10.0, 100.0, 1e5] {
            let g = sinkhorn_unbalanced(&c, &m, &m, &tight(0.2, lambda)).unwrap();
            let v = marginal_violation(&g, &m, &m);
            assert!(v <= last + 1e-12, "lambda {lambda}: {v} > {last}");
            last = v;
        }
    }
}

#[test]
fn entropic_cost_tracks_the_exact_optimum_up_to_four_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for n in 2..=4 {
        for _ in 0..20 {
            let c = random_cost(&mut rng, n, n, 1.0);
            let m = make_uniform_measure(n).unwrap();
            let exact = brute_force_balanced(&c).unwrap().transport_cost(&c);
            let g = sinkhorn_balanced(&c, &m, &m, &OTParams::default().with_epsilon(0.005)).unwrap();
            let entropic = g.transport_cost(&c);
            // An unconverged plan is slightly infeasible and may undercut the
            // optimum by at most the mass it misplaces times the largest cost.
            let slack = 2.0 * marginal_violation(&g, &m, &m) * c.max();
            assert!(
                entropic >= exact - slack - 1e-12,
                "n {n}: entropic {entropic} < exact {exact}"
            );
            assert!(entropic <= exact * 1.02, "n {n}: entropic {entropic} vs exact {exact}");
        }
    }
}

#[test]
fn brute_force_matches_exhaustive_enumeration_on_four_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let perms: Vec<[usize; 4]> = {
        let mut out = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        let mut seen = [false; 4];
                        p.iter().for_each(|&x| seen[x] = true);
                        if seen.iter().all(|&s| s) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    };
    for _ in 0..50 {
        let c = random_cost(&mut rng, 4, 4, 1.0);
        let best = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| c.entries()[[i, j]]).sum::<f64>() / 4.0)
            .fold(f64::INFINITY, f64::min);
        let got = brute_force_balanced(&c).unwrap().transport_cost(&c);
        assert!((got - best).abs() < 1e-15);
    }
}

#[test]
fn small_epsilon_with_large_costs_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for eps in [1e-3, 5e-3, 0.01] {
        let c = random_cost(&mut rng, 6, 6, 100.0);
        let m = make_uniform_measure(6).unwrap();
        let p = OTParams::default().with_epsilon(eps);
        for g in [
            sinkhorn_balanced(&c, &m, &m, &p).unwrap(),
            sinkhorn_unbalanced(&c, &m, &m, &p).unwrap(),
        ] {
            assert!(g.plan.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }
}

#[test]
fn unbalanced_plans_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..8), rng.random_range(1..8));
        let c = random_cost(&mut rng, n, m, 5.0);
        let (a, b) = (make_uniform_measure(n).unwrap(), make_uniform_measure(m).unwrap());
        let eps = [0.01, 0.2, 1.0][rng.random_range(0..3)];
        let g = sinkhorn_unbalanced(&c, &a, &b, &OTParams::default().with_epsilon(eps)).unwrap();
        assert!(g.plan.iter().all(|&x| x >= 0.0));
    }
}

proptest! {
    #[test]
    fn gibbs_kernel_is_strictly_decreasing(c1 in 0.0f64..50.0, gap in 1e-6f64..10.0, eps in 0.01f64..5.0) {
        let (near, far) = (gibbs_kernel(c1, eps), gibbs_kernel(c1 + gap, eps));
        prop_assert!(far <= near);
        // exp underflows past c / eps of about 708; strictness only holds for normal floats.
        if far.is_normal() {
            prop_assert!(far < near);
        }
    }
}
