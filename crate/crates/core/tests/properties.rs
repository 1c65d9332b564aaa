mod common;

use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use mcflp::decoupling::{decouple_network, lemma1_check, lemma2_reduce, reduce_to_single_channel};
use mcflp::greedy::{select_facilities, GreedyConfig};
use mcflp::instance::{coefficient_of_variation, from_json_str, generate, to_json_string, GeneratorSpec};
use mcflp::model::{evaluate_objective, validate, AllocationPlan, DEFAULT_FEASIBILITY_TOL};
use mcflp::oracles::{ExactOracle, MultiStageOracle, ValueOracle};
use mcflp::reference::{solve_exhaustive, DEFAULT_MAX_FACILITIES};
use mcflp::sinkhorn::{plan_objective, sinkhorn_solve, SinkhornParams, TransportProblem};
use mcflp::{Client, Edge, Facility, SupplyNetwork};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{all_subsets, quantum_slack, small_instance};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn random_problem(seed: u64, max_rows: usize, max_cols: usize) -> TransportProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (rng.random_range(1..=max_rows), rng.random_range(1..=max_cols));
    let profit = Array2::from_shape_fn((m, n), |_| {
        if rng.random::<f64>() < 0.25 {
            0.0
        } else {
            rng.random_range(1.0..20.0_f64).round()
        }
    });
    let supply = (0..m).map(|_| rng.random_range(0..25) as f64).collect();
    let demand = (0..n).map(|_| rng.random_range(0..15) as f64).collect();
    TransportProblem::new(supply, demand, profit)
}

/// The transport problem as a one-channel network, so the exact oracle
/// gives its linear-programming optimum.
fn as_network(problem: &TransportProblem) -> SupplyNetwork {
    let top = problem.profit.iter().copied().fold(0.0, f64::max) + 1.0;
    let facilities = problem
        .supply
        .iter()
        .enumerate()
        .map(|(i, &s)| Facility::new(format!("f{i}"), 0.0, s).with_channel("x", s))
        .collect();
    let clients = problem
        .demand
        .iter()
        .enumerate()
        .map(|(j, &d)| Client::new(format!("c{j:02}"), d))
        .collect();
    let edges = problem
        .profit
        .indexed_iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|((i, j), &p)| Edge::new(format!("f{i}"), format!("c{j:02}"), "x", top - p))
        .collect();
    SupplyNetwork::new(facilities, clients, edges, Some(top))
}

fn lp_optimum(problem: &TransportProblem) -> f64 {
    let net = as_network(problem);
    let all: Vec<usize> = (0..net.facilities.len()).collect();
    ExactOracle::new(&net).evaluate(&all).unwrap().g_value
}

fn g_all_subsets(net: &SupplyNetwork) -> Vec<f64> {
    let oracle = ExactOracle::new(net);
    all_subsets(net.facilities.len())
        .iter()
        .map(|s| oracle.evaluate(s).unwrap().g_value)
        .collect()
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn objective_ignores_edge_order(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let net = small_instance(seed, 4, 8, 3);
        let all: Vec<usize> = (0..4).collect();
        let plan = ExactOracle::new(&net).evaluate(&all).unwrap().plan.unwrap();
        let mut shuffled = net.clone();
        shuffled.edges.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let a = evaluate_objective(&net, &all, &plan, DEFAULT_FEASIBILITY_TOL).unwrap();
        let b = evaluate_objective(&shuffled, &all, &plan, DEFAULT_FEASIBILITY_TOL).unwrap();
        prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
        prop_assert_eq!(a.profit.to_bits(), b.profit.to_bits());
    }

    #[test]
    fn more_flow_on_a_profitable_edge_lowers_the_objective(seed in 0u64..10_000, pick in any::<prop::sample::Index>()) {
        let net = small_instance(seed, 3, 6, 2);
        let index = net.index();
        let e = &net.edges[pick.index(net.edges.len())];
        let i = net.facility_position(&e.facility).unwrap();
        let j = net.clients.iter().position(|c| c.id == e.client).unwrap();
        let c = index.channels.iter().position(|ch| *ch == e.channel).unwrap();
        let d = net.clients[j].demand;
        let fac = &net.facilities[i];
        prop_assume!(d > 0.0 && fac.channels[&e.channel] > 0.0);
        let x = (fac.channels[&e.channel] / d).min(fac.fcap / d).min(1.0) / 2.0;
        let mut low = AllocationPlan::new();
        low.set(i, j, c, x / 2.0);
        let mut high = AllocationPlan::new();
        high.set(i, j, c, x);
        let a = evaluate_objective(&net, &[i], &low, DEFAULT_FEASIBILITY_TOL).unwrap();
        let b = evaluate_objective(&net, &[i], &high, DEFAULT_FEASIBILITY_TOL).unwrap();
        prop_assert!(b.total < a.total, "{} !< {}", b.total, a.total);
    }

    #[test]
    fn converged_plans_respect_both_marginals(seed in 0u64..10_000, masked in any::<bool>(), mu in 0.2f64..5.0) {
        let mut problem = random_problem(seed, 7, 9);
        if masked {
            problem = problem.clone().with_mask(problem.profit.mapv(|p| p > 0.0));
        }
        let params = SinkhornParams::new(mu);
        let plan = sinkhorn_solve(&problem, &params).unwrap();
        prop_assume!(plan.converged);
        let slack = params.tol * plan.kappa.max(1.0);
        for (r, s) in plan.row_sums().iter().zip(&problem.supply) {
            prop_assert!(*r <= s + slack, "row {r} > {s}");
        }
        for (c, d) in plan.col_sums().iter().zip(&problem.demand) {
            prop_assert!(*c <= d + slack, "column {c} > {d}");
        }
        prop_assert!(plan.coupling.iter().all(|&v| v >= 0.0));
        if masked {
            for ((i, j), &v) in plan.coupling.indexed_iter() {
                prop_assert!(problem.allowed(i, j) || v == 0.0);
            }
        }
    }

    #[test]
    fn power_of_two_rescaling_is_bit_identical(seed in 0u64..10_000, shift in -6i32..6, mu in 0.5f64..4.0) {
        let problem = random_problem(seed, 6, 6);
        let lambda = 2f64.powi(shift);
        let scaled = TransportProblem::new(problem.supply.clone(), problem.demand.clone(), problem.profit.mapv(|p| p * lambda));
        let a = sinkhorn_solve(&problem, &SinkhornParams::new(mu)).unwrap();
        let b = sinkhorn_solve(&scaled, &SinkhornParams::new(mu * lambda)).unwrap();
        prop_assert_eq!(a.iterations, b.iterations);
        for (x, y) in a.coupling.iter().zip(b.coupling.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn log_and_standard_domains_agree(seed in 0u64..10_000, mu in 0.5f64..5.0) {
        let problem = random_problem(seed, 6, 8);
        let standard = SinkhornParams::new(mu).with_tol(1e-13).with_max_iters(50_000);
        let log = SinkhornParams { force_log_domain: true, ..standard };
        let a = sinkhorn_solve(&problem, &standard).unwrap();
        let b = sinkhorn_solve(&problem, &log).unwrap();
        prop_assume!(a.converged && b.converged);
        prop_assert!(!a.log_domain && b.log_domain || a.kappa == 0.0);
        let scale = problem.supply.iter().sum::<f64>().max(problem.demand.iter().sum()).max(1.0);
        for (x, y) in a.coupling.iter().zip(b.coupling.iter()) {
            prop_assert!((x - y).abs() <= 1e-9 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn reduced_weights_and_profits_are_averages(seed in 0u64..10_000) {
        let net = small_instance(seed, 5, 10, 3);
        let reduced = reduce_to_single_channel(&net);
        let index = net.index();
        for f in &reduced.facilities {
            prop_assert!((f.weights.values().sum::<f64>() - 1.0).abs() <= 1e-12);
            let i = net.facility_position(&f.id).unwrap();
            let channels: Vec<usize> = f.weights.keys().map(|ch| index.channels.iter().position(|c| c == ch).unwrap()).collect();
            for (pos, _) in reduced.facilities.iter().enumerate().filter(|(_, g)| g.id == f.id) {
                for j in 0..net.clients.len() {
                    let reach: Vec<Option<f64>> = channels
                        .iter()
                        .map(|&c| index.facilities[i].arc(j, c).map(|a| a.profit))
                        .collect();
                    if reach.iter().all(Option::is_some) {
                        let p: Vec<f64> = reach.into_iter().flatten().collect();
                        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let alpha = reduced.profit(pos, j);
                        prop_assert!(alpha >= lo - 1e-9 && alpha <= hi + 1e-9, "{alpha} outside [{lo}, {hi}]");
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn lifting_a_slack_facility_cap_keeps_g(seed in 0u64..10_000) {
        let net = small_instance(seed, 4, 7, 3);
        let mut lifted = net.clone();
        for f in &mut lifted.facilities {
            if lemma1_check(f) {
                f.fcap *= 4.0;
            }
        }
        let slack = 2.0 * ExactOracle::new(&net).quantum() * net.total_demand();
        for (a, b) in g_all_subsets(&net).iter().zip(g_all_subsets(&lifted)) {
            prop_assert!((a - b).abs() <= slack, "{a} vs {b}");
        }
    }

    #[test]
    fn each_capacity_reduction_keeps_g(seed in 0u64..10_000, which in 0usize..4) {
        let net = small_instance(seed, 4, 7, 3);
        let fragment = lemma2_reduce(&net, which);
        let mut reduced = net.clone();
        let fac = &mut reduced.facilities[which];
        fac.channels = fragment.channel_caps.clone();
        let id = fac.id.clone();
        reduced.edges.retain(|e| e.facility != id || fragment.channel_caps.contains_key(&e.channel));
        reduced.canonicalize();
        prop_assert!(validate(&reduced).is_empty());
        let slack = 2.0 * ExactOracle::new(&net).quantum() * net.total_demand();
        for (a, b) in g_all_subsets(&net).iter().zip(g_all_subsets(&reduced)) {
            prop_assert!((a - b).abs() <= slack, "{a} vs {b}");
        }
    }

    #[test]
    fn splitting_uncapped_facilities_keeps_g(seed in 0u64..10_000) {
        let mut net = small_instance(seed, 4, 7, 3);
        for f in &mut net.facilities {
            f.fcap = f.fcap.max(f.total_channel_capacity());
        }
        let report = decouple_network(&net);
        prop_assert!(report.reductions.is_empty() && report.coupled.is_empty());
        let before = ExactOracle::new(&net);
        let after = ExactOracle::new(&report.network);
        let slack = 2.0 * before.quantum() * net.total_demand();
        for set in all_subsets(4) {
            let ids: BTreeSet<&str> = set.iter().map(|&i| net.facilities[i].id.as_str()).collect();
            let mapped: Vec<usize> = report
                .network
                .facilities
                .iter()
                .enumerate()
                .filter(|(_, f)| ids.contains(report.original_facility(&f.id)))
                .map(|(k, _)| k)
                .collect();
            let a = before.evaluate(&set).unwrap().g_value;
            let b = after.evaluate(&mapped).unwrap().g_value;
            prop_assert!((a - b).abs() <= slack, "{set:?}: {a} vs {b}");
        }
    }

    #[test]
    fn multistage_plans_are_feasible_and_never_beat_exact(seed in 0u64..10_000) {
        let net = small_instance(seed, 5, 9, 3);
        let exact = ExactOracle::new(&net);
        let multi = MultiStageOracle::new(&net, None);
        let slack = quantum_slack(&net, exact.quantum()) + DEFAULT_FEASIBILITY_TOL * net.penalty * net.total_demand();
        for set in all_subsets(5) {
            let r = multi.evaluate(&set).unwrap();
            let plan = r.plan.unwrap();
            let eval = evaluate_objective(&net, &set, &plan, DEFAULT_FEASIBILITY_TOL).unwrap();
            prop_assert!((eval.profit - r.g_value).abs() <= 1e-6 * (1.0 + r.g_value));
            prop_assert!(r.g_value >= 0.0);
            let g = exact.evaluate(&set).unwrap().g_value;
            prop_assert!(r.g_value <= g + slack, "{set:?}: multistage {} > exact {g}", r.g_value);
        }
    }

    #[test]
    fn greedy_respects_budget_and_counts_calls(seed in 0u64..10_000, k in 0usize..7, run_seed in any::<u64>()) {
        let net = small_instance(seed, 6, 8, 3);
        let oracle = ExactOracle::new(&net);
        let (s, trace) = select_facilities(&net, &GreedyConfig::new(k, 0.2, run_seed), &oracle).unwrap();
        prop_assert!(s.len() <= k);
        prop_assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), s.len());
        let drawn: usize = trace.iterations.iter().map(|it| it.sample.len()).sum();
        prop_assert_eq!(oracle.counters().oracle_invocations, drawn as u64);
        let mut grown = 0;
        for it in &trace.iterations {
            prop_assert!(it.selected.len() == grown || it.selected.len() == grown + 1);
            grown = it.selected.len();
        }
    }

    #[test]
    fn exhaustive_optimum_bounds_every_subset(seed in 0u64..10_000, k in 1usize..5) {
        let net = small_instance(seed, 5, 8, 3);
        let exact = ExactOracle::new(&net);
        let best = solve_exhaustive(&net, k, DEFAULT_MAX_FACILITIES, &exact, true).unwrap();
        let (greedy, _) = select_facilities(&net, &GreedyConfig::new(k, 0.1, seed), &MultiStageOracle::new(&net, None)).unwrap();
        let mut sorted = greedy.clone();
        sorted.sort_unstable();
        let r = exact.evaluate(&sorted).unwrap();
        let greedy_j = evaluate_objective(&net, &sorted, r.plan.as_ref().unwrap(), DEFAULT_FEASIBILITY_TOL).unwrap().total;
        prop_assert!(best.objective <= greedy_j + 1e-9 * greedy_j.abs());
        let constant = net.penalty * net.total_demand();
        let mut direct_min = constant;
        for set in all_subsets(5).into_iter().filter(|s| s.len() <= k) {
            let r = exact.evaluate(&set).unwrap();
            let direct = evaluate_objective(&net, &set, r.plan.as_ref().unwrap(), DEFAULT_FEASIBILITY_TOL).unwrap().total;
            let rewritten = net.fixed_cost(&set) + constant - r.g_value;
            prop_assert!((direct - rewritten).abs() <= 1e-9 * direct.abs());
            prop_assert!(best.objective <= direct + 1e-9 * direct.abs());
            direct_min = direct_min.min(direct);
        }
        prop_assert!((best.objective - direct_min).abs() <= 1e-9 * direct_min.abs());
    }

    #[test]
    fn generated_instances_are_valid_and_reproducible(
        seed in any::<u64>(),
        m in 1usize..12,
        n in 1usize..30,
        channels in 1usize..4,
        density in 0.05f64..=1.0,
        ratio in 0.5f64..=1.5,
    ) {
        let spec = GeneratorSpec { edge_density: density, capacity_ratio: ratio, ..GeneratorSpec::new(m, n, channels, seed) };
        let net = generate(&spec).unwrap();
        prop_assert!(validate(&net).is_empty());
        prop_assert_eq!(&net, &generate(&spec).unwrap());
        let (back, report) = from_json_str(&to_json_string(&net)).unwrap();
        prop_assert!(!report.penalty_defaulted);
        prop_assert_eq!(back, net);
    }
}

#[test]
fn entropic_gap_shrinks_with_mu() {
    let grid = [1.0, 0.1, 0.01];
    let mut violations = 0;
    let instances = 40;
    for seed in 0..instances {
        let problem = random_problem(7000 + seed, 8, 8);
        let opt = lp_optimum(&problem);
        let gaps: Vec<f64> = grid
            .iter()
            .map(|&mu| {
                let plan = sinkhorn_solve(&problem, &SinkhornParams::new(mu).with_max_iters(50_000)).unwrap();
                opt - plan_objective(&problem, &plan)
            })
            .collect();
        let tol = 1e-6 * (1.0 + opt);
        if gaps.windows(2).any(|w| w[1] > w[0] + tol) {
            violations += 1;
        }
    }
    assert!(violations * 20 <= instances, "{violations} of {instances} instances broke the trend");
}

#[test]
fn modular_instance_matches_enumeration() {
    // Every facility owns its clients, so g is a sum of singletons.
    let mut facilities = Vec::new();
    let mut clients = Vec::new();
    let mut edges = Vec::new();
    let fixed = [3.0, 40.0, 12.0, 90.0, 1.0];
    for (i, &f) in fixed.iter().enumerate() {
        facilities.push(Facility::new(format!("f{i}"), f, 6.0).with_channel("x", 4.0).with_channel("y", 4.0));
        for t in 0..2 {
            let c = format!("c{i}{t}");
            clients.push(Client::new(c.clone(), 4.0));
            edges.push(Edge::new(format!("f{i}"), c.clone(), "x", 1.0 + t as f64 + i as f64));
            edges.push(Edge::new(format!("f{i}"), c, "y", 2.5 + i as f64));
        }
    }
    let net = SupplyNetwork::new(facilities, clients, edges, Some(10.0));
    let exact = ExactOracle::new(&net);
    let m = fixed.len();
    let (greedy, _) = select_facilities(&net, &GreedyConfig::new(m, 1e-9, 0), &exact).unwrap();
    let mut greedy = greedy;
    greedy.sort_unstable();
    let worth: Vec<usize> = (0..m)
        .filter(|&i| exact.evaluate(&[i]).unwrap().g_value > fixed[i])
        .collect();
    assert_eq!(greedy, worth);
    let best = solve_exhaustive(&net, m, DEFAULT_MAX_FACILITIES, &exact, false).unwrap();
    assert_eq!(best.selected, worth);
}

#[test]
fn generated_cov_tracks_the_spec() {
    let spec = GeneratorSpec::new(200, 400, 3, 11);
    let net = generate(&spec).unwrap();
    let fixed: Vec<f64> = net.facilities.iter().map(|f| f.fixed_cost).collect();
    let fcap: Vec<f64> = net.facilities.iter().map(|f| f.fcap).collect();
    let ccap: Vec<f64> = net.facilities.iter().flat_map(|f| f.channels.values().copied()).collect();
    for (name, values, target) in [
        ("fixed cost", fixed, spec.fixed_cost_cov),
        ("fcap", fcap, spec.fcap_cov),
        ("ccap", ccap, spec.ccap_cov),
    ] {
        let cov = coefficient_of_variation(&values);
        assert!((cov - target).abs() <= 0.2 * target, "{name}: CoV {cov} vs {target}");
    }
}

#[test]
fn generated_edge_count_follows_density() {
    for (density, seed) in [(0.89, 1), (0.3, 2), (1.0, 3)] {
        let spec = GeneratorSpec {
            edge_density: density,
            ..GeneratorSpec::new(30, 400, 3, seed)
        };
        let net = generate(&spec).unwrap();
        let expected = density * (30 * 400 * 3) as f64;
        let got = net.edges.len() as f64;
        assert!((got - expected).abs() <= 0.1 * expected, "density {density}: {got} edges vs {expected}");
    }
}

#[test]
fn exact_lp_of_a_tiny_transport_problem() {
    let problem = TransportProblem::new(vec![3.0, 4.0], vec![4.0, 2.0], ndarray::array![[5.0, 1.0], [2.0, 4.0]]);
    assert_abs_diff_eq!(lp_optimum(&problem), 3.0 * 5.0 + 2.0 * 4.0 + 1.0 * 2.0, epsilon = 1e-9);
}

#[test]
fn greedy_trace_is_identical_across_thread_pools() {
    let net = small_instance(77, 12, 20, 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let oracle = MultiStageOracle::new(&net, None);
            let (_, trace) = select_facilities(&net, &GreedyConfig::new(5, 0.05, 9), &oracle).unwrap();
            serde_json::to_string(&trace).unwrap()
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(7));
}
