mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use mjls::example::samuelson;
use mjls::finite_horizon::{cost_to_go, riccati_update, solve_finite_horizon, FiniteHorizonOptions};
use mjls::infinite_horizon::{
    relative_residual, solve_vertex_care, stabilizing_solution, CareOptions, InfiniteHorizonOptions,
    StabilizingSolution,
};
use mjls::linalg::{min_sym_eigenvalue, spectral_norm, spectral_radius};
use mjls::simulate::{simulate, simulate_many, AdversaryChoice, AdversaryPolicy, Controller, SimulationOptions};
use mjls::stability::{jsr_bounds, jsr_bounds_of, lift_closed_loop, lift_open_loop, JsrOptions};
use mjls::{InitialCondition, ModeInfo, Problem, TerminalWeights, TpmPolytope};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn problem_json_round_trip(seed in any::<u64>(), n_modes in 1usize..4, nx in 1usize..4, n_vertices in 1usize..4) {
        let mut rng = common::rng(seed);
        let model = common::model(&mut rng, n_modes, nx, 1.0);
        let polytope = common::polytope(&mut rng, n_modes, n_vertices);
        let problem = Problem {
            terminal: Some(common::terminal(&mut rng, n_modes, nx)),
            initial: Some(InitialCondition {
                x0: common::uniform_vector(&mut rng, nx, 3.0),
                mode: ModeInfo::Known(rng.gen_range(0..n_modes)),
            }),
            model,
            polytope,
        };
        let back = Problem::from_json_str(&problem.to_json_string()).unwrap();
        prop_assert_eq!(back, problem);
    }

    #[test]
    fn lifted_radius_is_squared_radius(seed in any::<u64>(), nx in 1usize..4) {
        let mut rng = common::rng(seed);
        let model = common::model(&mut rng, 1, nx, 1.5);
        let poly = TpmPolytope::new(vec![DMatrix::identity(1, 1)]).unwrap();
        let family = lift_open_loop(&model, &poly);
        let lifted = spectral_radius(&family.matrices[0]).unwrap();
        let rho = spectral_radius(&model.mode(0).a).unwrap();
        prop_assert!((lifted - rho * rho).abs() <= 1e-9 * (1.0 + rho * rho), "{} vs {}", lifted, rho * rho);
    }

    #[test]
    fn zero_gains_give_open_loop(seed in any::<u64>(), n_modes in 1usize..4, nx in 1usize..3, n_vertices in 1usize..4) {
        let mut rng = common::rng(seed);
        let model = common::model(&mut rng, n_modes, nx, 1.0);
        let poly = common::polytope(&mut rng, n_modes, n_vertices);
        let gains = vec![DMatrix::zeros(1, nx); n_modes];
        let closed = lift_closed_loop(&model, &poly, &gains).unwrap();
        let open = lift_open_loop(&model, &poly);
        prop_assert_eq!(closed.matrices, open.matrices);
    }

    #[test]
    fn vertex_order_does_not_change_bounds(seed in any::<u64>(), n_modes in 1usize..3, n_vertices in 2usize..4) {
        let mut rng = common::rng(seed);
        let model = common::model(&mut rng, n_modes, 2, 0.9);
        let poly = common::polytope(&mut rng, n_modes, n_vertices);
        let reversed = TpmPolytope::new(poly.vertices().iter().rev().cloned().collect()).unwrap();
        let opts = JsrOptions { max_depth: 6, ..JsrOptions::default() };
        let a = jsr_bounds(&lift_open_loop(&model, &poly), &opts).unwrap();
        let b = jsr_bounds(&lift_open_loop(&model, &reversed), &opts).unwrap();
        prop_assert!((a.lower - b.lower).abs() <= 1e-9 * (1.0 + a.lower));
        prop_assert!((a.upper - b.upper).abs() <= 1e-9 * (1.0 + a.upper), "{} vs {}", a.upper, b.upper);
    }

    #[test]
    fn deeper_search_tightens_bounds(seed in any::<u64>(), n in 1usize..4, count in 1usize..4) {
        let mut rng = common::rng(seed);
        let family: Vec<DMatrix<f64>> = (0..count).map(|_| common::uniform_matrix(&mut rng, n, n, 1.0)).collect();
        let mut prev: Option<(f64, f64)> = None;
        for depth in 1..=6 {
            let opts = JsrOptions { max_depth: depth, gap: 1e-6, ..JsrOptions::default() };
            let c = jsr_bounds_of(&family, &opts).unwrap();
            prop_assert!(c.lower <= c.upper + 1e-12);
            if let Some((lo, up)) = prev {
                prop_assert!(c.lower >= lo - 1e-12, "lower fell from {} to {}", lo, c.lower);
                prop_assert!(c.upper <= up + 1e-12, "upper rose from {} to {}", up, c.upper);
            }
            prev = Some((c.lower, c.upper));
        }
    }

    #[test]
    fn bounds_bracket_every_vertex_radius(seed in any::<u64>(), n_modes in 1usize..3, n_vertices in 1usize..4) {
        let mut rng = common::rng(seed);
        let model = common::model(&mut rng, n_modes, 2, 1.0);
        let poly = common::polytope(&mut rng, n_modes, n_vertices);
        let family = lift_open_loop(&model, &poly);
        let c = jsr_bounds(&family, &JsrOptions { max_depth: 5, ..JsrOptions::default() }).unwrap();
        for m in &family.matrices {
            let r = spectral_radius(m).unwrap();
            prop_assert!(r <= c.lower * (1.0 + 1e-9) + 1e-12, "radius {} above lower {}", r, c.lower);
            prop_assert!(c.lower <= c.upper * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cost_is_quadratic_in_state(seed in any::<u64>(), alpha in -5.0f64..5.0, horizon in 1usize..5) {
        let mut rng = common::rng(seed);
        let n_modes = rng.gen_range(1..=3);
        let nx = rng.gen_range(1..=2);
        let model = common::model(&mut rng, n_modes, nx, 1.1);
        let poly = common::polytope(&mut rng, n_modes, 2);
        let z = common::terminal(&mut rng, n_modes, nx);
        let sol = solve_finite_horizon(&model, &poly, &z, horizon, &FiniteHorizonOptions::default()).unwrap();
        let x = common::uniform_vector(&mut rng, nx, 2.0);
        let mode = ModeInfo::Known(rng.gen_range(0..n_modes));
        let base = cost_to_go(sol.set_at(0), &x, &mode).unwrap().value;
        let scaled = cost_to_go(sol.set_at(0), &(&x * alpha), &mode).unwrap().value;
        prop_assert!(common::rel_close(scaled, alpha * alpha * base, 1e-10) || (scaled - alpha * alpha * base).abs() < 1e-12);
    }

    #[test]
    fn pruning_preserves_cost_to_go(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n_modes = rng.gen_range(1..=3);
        let nx = rng.gen_range(1..=2);
        let n_vertices = rng.gen_range(1..=3);
        let horizon = rng.gen_range(1..=6);
        let model = common::model(&mut rng, n_modes, nx, 1.2);
        let poly = common::polytope(&mut rng, n_modes, n_vertices);
        let z = common::terminal(&mut rng, n_modes, nx);
        let pruned = solve_finite_horizon(&model, &poly, &z, horizon, &FiniteHorizonOptions::default()).unwrap();
        let full = solve_finite_horizon(&model, &poly, &z, horizon, &FiniteHorizonOptions { prune: false, ..Default::default() }).unwrap();
        for _ in 0..10 {
            let x = common::uniform_vector(&mut rng, nx, 2.0);
            let mode = ModeInfo::Distribution(DVector::from_vec(common::stochastic_row(&mut rng, n_modes)));
            let a = cost_to_go(pruned.set_at(0), &x, &mode).unwrap().value;
            let b = cost_to_go(full.set_at(0), &x, &mode).unwrap().value;
            prop_assert!(common::rel_close(a, b, 1e-8), "{} vs {}", a, b);
        }
    }

    #[test]
    fn care_is_a_monotone_fixed_point(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n_modes = rng.gen_range(1..=3);
        let nx = rng.gen_range(1..=2);
        let model = common::model(&mut rng, n_modes, nx, 0.6);
        let poly = common::polytope(&mut rng, n_modes, 1);
        let tpm = poly.vertex(0);
        let sol = solve_vertex_care(&model, tpm, 1, &CareOptions::default()).unwrap();
        let again = riccati_update(&model, tpm, &sol.x).unwrap();
        prop_assert!(relative_residual(&sol.x, &again.x) <= 1e-10);

        let mut x = vec![DMatrix::zeros(nx, nx); n_modes];
        for _ in 0..sol.iterations.min(200) {
            let next = riccati_update(&model, tpm, &x).unwrap().x;
            for (a, b) in next.iter().zip(&x) {
                prop_assert!(min_sym_eigenvalue(&(a - b)) >= -1e-9 * (1.0 + spectral_norm(a)));
            }
            x = next;
        }
        for (xi, si) in x.iter().zip(&sol.x) {
            prop_assert!(min_sym_eigenvalue(&(si - xi)) >= -1e-8 * (1.0 + spectral_norm(si)));
        }
    }

    #[test]
    fn care_solution_is_stationary_under_recursion(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n_modes = rng.gen_range(1..=3);
        let nx = rng.gen_range(1..=2);
        let model = common::model(&mut rng, n_modes, nx, 0.6);
        let poly = common::polytope(&mut rng, n_modes, 1);
        let sol = solve_vertex_care(&model, poly.vertex(0), 1, &CareOptions::default()).unwrap();
        let z = TerminalWeights(sol.x.clone());
        let fin = solve_finite_horizon(&model, &poly, &z, 5, &FiniteHorizonOptions::default()).unwrap();
        for k in 0..5 {
            let set = fin.set_at(k);
            prop_assert_eq!(set.len(), 1);
            prop_assert!(relative_residual(&sol.x, &set.branches[0].x) <= 1e-9);
        }
    }

    #[test]
    fn simulation_is_reproducible(seed in any::<u64>(), run_seed in any::<u64>(), kind in 0usize..3) {
        let mut rng = common::rng(seed);
        let n_modes = rng.gen_range(1..=3);
        let nx = rng.gen_range(1..=2);
        let n_vertices = rng.gen_range(1..=3);
        let model = common::model(&mut rng, n_modes, nx, 1.0);
        let poly = common::polytope(&mut rng, n_modes, n_vertices);
        let z = common::terminal(&mut rng, n_modes, nx);
        let sol = solve_finite_horizon(&model, &poly, &z, 6, &FiniteHorizonOptions::default()).unwrap();
        let adversary = match kind {
            0 => AdversaryPolicy::GreedyWorstCase,
            1 => AdversaryPolicy::RandomMixture { seed: run_seed ^ 0x5a5a },
            _ => AdversaryPolicy::FixedVertex { vertex: rng.gen_range(0..n_vertices) },
        };
        let x0 = common::uniform_vector(&mut rng, nx, 2.0);
        let theta0 = rng.gen_range(0..n_modes);
        let opts = SimulationOptions::new(6);
        let run = || simulate(&model, &poly, &Controller::Finite(&sol), &adversary, &x0, theta0, &opts, run_seed).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.dynamics_hold(&model));
        let stage: f64 = a.steps.iter().map(|s| s.stage_cost).sum();
        prop_assert!(common::rel_close(a.total_cost, stage + a.terminal_cost, 1e-12));
    }
}

fn chi_square_critical_999(df: usize) -> f64 {
    // upper 0.1% points
    [10.828, 13.816, 16.266, 18.467, 20.515][df - 1]
}

#[test]
fn fixed_vertex_transitions_follow_the_vertex() {
    let problem = samuelson();
    let n = problem.model.n_modes();
    let gains = vec![DMatrix::zeros(1, 2); n];
    let controller = Controller::FixedGains(&gains);
    let x0 = DVector::from_vec(vec![1e-3, 0.0]);
    for vertex in 0..problem.polytope.n_vertices() {
        let tpm = problem.polytope.vertex(vertex);
        let runs = simulate_many(
            &problem.model,
            &problem.polytope,
            &controller,
            &AdversaryPolicy::FixedVertex { vertex },
            &x0,
            &ModeInfo::Distribution(DVector::from_element(n, 1.0 / n as f64)),
            &SimulationOptions::new(20),
            500,
            2024 + vertex as u64,
        )
        .unwrap();
        let mut counts = vec![vec![0usize; n]; n];
        for t in &runs {
            let modes: Vec<usize> = t.steps.iter().map(|s| s.theta).chain([t.final_mode]).collect();
            for w in modes.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
            assert!(t.steps.iter().all(|s| s.choice == AdversaryChoice::Vertex(vertex)));
        }
        for i in 0..n {
            let total: usize = counts[i].iter().sum();
            if total == 0 {
                continue;
            }
            let support: Vec<usize> = (0..n).filter(|&j| tpm[(i, j)] > 0.0).collect();
            for j in 0..n {
                if tpm[(i, j)] == 0.0 {
                    assert_eq!(counts[i][j], 0, "vertex {vertex}: impossible jump {i}->{j}");
                }
            }
            if support.len() < 2 {
                continue;
            }
            let stat: f64 = support
                .iter()
                .map(|&j| {
                    let expected = total as f64 * tpm[(i, j)];
                    let d = counts[i][j] as f64 - expected;
                    d * d / expected
                })
                .sum();
            let crit = chi_square_critical_999(support.len() - 1);
            assert!(stat < crit, "vertex {vertex} row {i}: chi-square {stat} >= {crit}");
        }
    }
}

#[test]
fn initial_mode_distribution_is_sampled() {
    let problem = samuelson();
    let sol: StabilizingSolution =
        stabilizing_solution(&problem.model, &problem.polytope, &InfiniteHorizonOptions::default()).unwrap();
    let p0 = [0.2, 0.5, 0.3];
    let runs = simulate_many(
        &problem.model,
        &problem.polytope,
        &Controller::Steady(&sol),
        &AdversaryPolicy::GreedyWorstCase,
        &DVector::from_vec(vec![1.0, 1.0]),
        &ModeInfo::Distribution(DVector::from_row_slice(&p0)),
        &SimulationOptions::new(1),
        6000,
        99,
    )
    .unwrap();
    let mut counts = [0usize; 3];
    for t in &runs {
        counts[t.steps[0].theta] += 1;
    }
    let stat: f64 = (0..3)
        .map(|i| {
            let e = 6000.0 * p0[i];
            let d = counts[i] as f64 - e;
            d * d / e
        })
        .sum();
    assert!(stat < chi_square_critical_999(2), "{counts:?}");
}
