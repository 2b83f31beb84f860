//! End-to-end acceptance checks, one numbered criterion per test. Each test
//! prints `criterion N: PASS` or `criterion N: FAIL` on its own line; the
//! tolerances and seeds are pinned here so the suite is deterministic.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dispatchsim_core::bandit::{LmUcbConfig, LmUcbState};
use dispatchsim_core::domain::Grid;
use dispatchsim_core::experiment::{build_policy, ExperimentConfig, PolicySpec};
use dispatchsim_core::matching::{prune, solve_assignment, WeightedEdge};
use dispatchsim_core::experiment::MyopicSpec;
use dispatchsim_core::policy::{CompletionModel, RlwConfig, V1d3Config};
use dispatchsim_core::sim::{
    dest_cum_from_weights, preset, run, CityPreset, RunOutput, Scenario, SimParams,
};
use dispatchsim_core::value::{
    expected_td_target, Discount, DispatchSample, UpdateRule, ValueStore, ValueTable,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One-sided critical value of Student's t at p = 0.05 with 19 degrees of
/// freedom, for the 20-seed paired comparisons.
const T_CRIT_ONE_SIDED_P05_DF19: f64 = 1.7291;

fn criterion(n: u32, budget: Duration, f: impl FnOnce()) {
    let start = Instant::now();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => {
            let elapsed = start.elapsed();
            if elapsed > budget {
                println!("criterion {n}: FAIL");
                panic!("criterion {n} exceeded its {budget:?} budget: took {elapsed:?}");
            }
            println!("criterion {n}: PASS");
        }
        Err(e) => {
            println!("criterion {n}: FAIL");
            resume_unwind(e);
        }
    }
}

fn gamma(g: f64) -> Discount {
    Discount::new(g).unwrap()
}

/// Run one policy alone through a preset scenario.
fn run_single(scenario: &Scenario, spec: &PolicySpec, seed: u64, params: &SimParams) -> RunOutput {
    let mut policies = vec![build_policy("p", spec, &scenario.grid, seed, 0).unwrap()];
    run(scenario, &mut policies, params).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One-sided paired t statistic for "a exceeds b".
fn paired_t(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64;
    m / (var.sqrt() / (d.len() as f64).sqrt())
}

#[test]
fn criterion_1_td_fixed_point() {
    criterion(1, Duration::from_secs(1), || {
        // Two-cell chain: A always dispatches to B with reward 1 and certain
        // completion, B always idles. Fixed point: V_B = gamma * V_B => 0,
        // V_A = 1 + gamma * V_B => 1.
        let grid = Grid::new(1, 2, 500.0).unwrap();
        let a = grid.cell(0, 0);
        let b = grid.cell(0, 1);
        let mut store = ValueStore::new(2, gamma(0.9), UpdateRule::Sgd { alpha: 0.5 }).unwrap();
        for _ in 0..500 {
            store.batch_update(&[DispatchSample::dispatch(a, b, 1.0, 1.0), DispatchSample::idle(b)]);
        }
        let va = store.table.get(a);
        let vb = store.table.get(b);
        assert!((va - 1.0).abs() < 1e-3, "V_A = {va}, want 1 within 1e-3");
        assert!(vb.abs() < 1e-3, "V_B = {vb}, want 0 within 1e-3");
    });
}

#[test]
fn criterion_2_expected_target_oracle() {
    criterion(2, Duration::from_secs(10), || {
        let grid = Grid::new(1, 2, 500.0).unwrap();
        let s = grid.cell(0, 0);
        let d = grid.cell(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..50 {
            let vs = rng.random_range(-5.0..5.0);
            let vd = rng.random_range(-5.0..5.0);
            let r = rng.random_range(0.0..20.0);
            let p_c = rng.random_range(0.05..0.95);
            let g = rng.random_range(0.5..0.99);
            let mut table = ValueTable::zeros(2);
            table.set(s, vs);
            table.set(d, vd);
            let sample = DispatchSample::dispatch(s, d, r, p_c);
            let expected = expected_td_target(&sample, &table, gamma(g));

            // Independent oracle: average the two concrete post-transition
            // targets over Bernoulli completion draws.
            let n = 100_000usize;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let target = if rng.random::<f64>() < p_c { r + g * vd } else { g * vs };
                sum += target;
                sum_sq += target * target;
            }
            let mc_mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mc_mean * mc_mean).max(0.0);
            let se = (var / n as f64).sqrt();
            let err = (mc_mean - expected).abs();
            assert!(
                err <= 3.0 * se.max(1e-12),
                "case {case}: |{mc_mean} - {expected}| = {err} > 3 SE ({se})"
            );
        }
    });
}

/// Exhaustive maximum-weight assignment over at most 6 orders; mirrors the
/// solver contract that non-positive edges are never taken.
fn brute_force_best(edges: &[WeightedEdge], n_orders: usize) -> f64 {
    fn go(order: usize, n_orders: usize, used: &mut u32, edges: &[WeightedEdge]) -> f64 {
        if order == n_orders {
            return 0.0;
        }
        let mut best = go(order + 1, n_orders, used, edges);
        for e in edges.iter().filter(|e| e.order_idx == order && e.weight > 0.0) {
            let bit = 1u32 << e.driver_idx;
            if *used & bit == 0 {
                *used |= bit;
                best = best.max(e.weight + go(order + 1, n_orders, used, edges));
                *used &= !bit;
            }
        }
        best
    }
    go(0, n_orders, &mut 0, edges)
}

#[test]
fn criterion_3_assignment_oracle() {
    criterion(3, Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in 0..100 {
            let n_orders = rng.random_range(1..=6usize);
            let n_drivers = rng.random_range(1..=6usize);
            let keep = if g < 50 { 1.0 } else { 0.5 };
            let mut edges = Vec::new();
            for o in 0..n_orders {
                for d in 0..n_drivers {
                    if rng.random::<f64>() < keep {
                        // Quarter-integer weights keep every candidate total
                        // exact in f64, so equality below is literal.
                        let w = rng.random_range(-8i32..32) as f64 / 4.0;
                        edges.push(WeightedEdge {
                            pair_idx: edges.len(),
                            order_idx: o,
                            driver_idx: d,
                            completion_prob: 1.0,
                            weight: w,
                        });
                    }
                }
            }
            let res = solve_assignment(&edges, n_orders, n_drivers);
            let best = brute_force_best(&edges, n_orders);
            assert_eq!(res.total_weight, best, "graph {g}: solver disagrees with enumeration");
        }
    });
}

#[test]
fn criterion_4_price_scale_invariance() {
    criterion(4, Duration::from_secs(60), || {
        // The standardized variant's whole decision pathway is positively
        // homogeneous in price (linear smoother and SGD value path, then a
        // scale-free standardizer), so doubling or halving prices must leave
        // every match decision bit-identical. The raw-edge variant keeps
        // absolute prices against an unscaled pickup penalty and must not.
        let mut std_hashes = Vec::new();
        let mut reg_hashes = Vec::new();
        for &scale in &[0.5, 1.0, 2.0] {
            let scenario = Scenario::from_preset(preset("uniform").unwrap());
            let params =
                SimParams { horizon_s: 3_600, price_scale: scale, seed: 7, ..Default::default() };
            let std_cfg = RlwConfig { sgd_alpha: Some(0.1), ..Default::default() };
            let out = run_single(&scenario, &PolicySpec::Rlw(std_cfg), 7, &params);
            assert!(out.report.totals.accepted > 0, "scale {scale}: no dispatches");
            std_hashes.push(out.report.decision_hash);

            let reg_cfg = RlwConfig {
                standardize: false,
                smooth_rewards: false,
                sgd_alpha: Some(0.1),
                raw_w_rew: 1.0,
                raw_w_res: 1.0,
                raw_w_p: 0.2,
                ..Default::default()
            };
            let out = run_single(&scenario, &PolicySpec::Rlw(reg_cfg), 7, &params);
            assert!(out.report.totals.accepted > 0, "scale {scale}: raw variant idle");
            reg_hashes.push(out.report.decision_hash);
        }
        assert!(
            std_hashes[0] == std_hashes[1] && std_hashes[1] == std_hashes[2],
            "standardized decisions changed with price scale: {std_hashes:?}"
        );
        assert!(
            reg_hashes[0] != reg_hashes[1] && reg_hashes[1] != reg_hashes[2],
            "raw-edge decisions should differ across scales: {reg_hashes:?}"
        );
    });
}

#[test]
fn criterion_5_bandit_identification_and_recovery() {
    criterion(5, Duration::from_secs(10), || {
        let noise = Normal::new(0.0, 0.02).unwrap();
        // Arm 3 is optimal by a 0.1 gap; after the flip its payoff degrades
        // and arm 1 takes the optimum, still with a 0.1 gap.
        let pre: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.4];
        let post: [f64; 5] = [0.3, 0.6, 0.5, 0.4, 0.4];
        let cfg = LmUcbConfig {
            arms: vec![0.0, 0.075, 0.15, 0.225, 0.3],
            alpha_q: 0.6,
            c: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.gamma_n, 0.99, "count discount is pinned by the criterion");

        let mut stationary = 0.0;
        let mut recovery = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = LmUcbState::new(cfg.clone(), &mut rng).unwrap();
            let mut hits = 0usize;
            for t in 1..=1000u32 {
                if t > 200 && b.current_arm() == 3 {
                    hits += 1;
                }
                let cr = (pre[b.current_arm()] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                b.feedback(cr, 0.0).unwrap();
            }
            stationary += hits as f64 / 800.0;

            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut b = LmUcbState::new(cfg.clone(), &mut rng).unwrap();
            let mut hits = 0usize;
            for t in 1..=700u32 {
                if t > 500 && b.current_arm() == 1 {
                    hits += 1;
                }
                let mu = if t > 500 { post[b.current_arm()] } else { pre[b.current_arm()] };
                let cr = (mu + noise.sample(&mut rng)).clamp(0.0, 1.0);
                b.feedback(cr, 0.0).unwrap();
            }
            recovery += hits as f64 / 200.0;
        }
        let stationary = stationary / 20.0;
        let recovery = recovery / 20.0;
        assert!(stationary >= 0.80, "optimal-arm share {stationary} < 0.80");
        assert!(recovery > 0.50, "post-flip new-optimum share {recovery} <= 0.50");
    });
}

/// Small undersupplied city: four drivers against steady uniform demand, with
/// completion probability falling fast in pickup distance. Far dispatches are
/// routine here, so the pruning threshold has real effect.
fn scarce_city() -> CityPreset {
    let grid = Grid::new(8, 8, 500.0).unwrap();
    let n = grid.cell_count();
    let dest_cum = dest_cum_from_weights(&grid, |_, _| 1.0);
    CityPreset {
        name: "scarce".into(),
        grid,
        driver_count: 4,
        hourly_intensity: vec![[3.0; 24]; n],
        dest_cum,
        price_base: 6.0,
        price_per_km: 1.0,
        completion: CompletionModel { a: 0.5, b_per_km: 0.8 },
    }
}

#[test]
fn criterion_6_pruning_monotonicity() {
    criterion(6, Duration::from_secs(120), || {
        let thresholds = [0.0, 0.1, 0.2, 0.3];

        // Static side: total matched pairs across 100 random geometric
        // graphs must not grow as the threshold rises.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CompletionModel { a: 0.5, b_per_km: 0.8 };
        let mut totals = [0usize; 4];
        for _ in 0..100 {
            let n_orders = rng.random_range(1..=10usize);
            let n_drivers = rng.random_range(1..=10usize);
            let density: f64 = rng.random_range(0.2..=1.0);
            let opos: Vec<(f64, f64)> = (0..n_orders)
                .map(|_| (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)))
                .collect();
            let dpos: Vec<(f64, f64)> = (0..n_drivers)
                .map(|_| (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)))
                .collect();
            let mut edges = Vec::new();
            for o in 0..n_orders {
                for d in 0..n_drivers {
                    if rng.random::<f64>() < density {
                        let km = ((opos[o].0 - dpos[d].0).powi(2)
                            + (opos[o].1 - dpos[d].1).powi(2))
                        .sqrt();
                        let value: f64 = rng.random_range(0.1..1.0);
                        edges.push(WeightedEdge {
                            pair_idx: edges.len(),
                            order_idx: o,
                            driver_idx: d,
                            completion_prob: model.completion_prob(km * 1000.0),
                            weight: (value - 0.08 * km).max(0.02),
                        });
                    }
                }
            }
            for (ti, &th) in thresholds.iter().enumerate() {
                let kept = prune(edges.clone(), th);
                totals[ti] += solve_assignment(&kept, n_orders, n_drivers).matched.len();
            }
        }
        for w in totals.windows(2) {
            assert!(w[1] <= w[0], "matched count rose with threshold: {totals:?}");
        }
        assert!(totals[3] < totals[0], "pruning never bound: {totals:?}");

        // Dynamic side: mean completed fraction among dispatched over 20
        // simulator seeds must not fall as the threshold rises.
        let mut means = Vec::new();
        for &th in &thresholds {
            let mut srs = Vec::new();
            for seed in 0..20u64 {
                let scenario = Scenario::from_preset(scarce_city());
                let cfg = RlwConfig {
                    adapt_threshold: false,
                    fixed_threshold: th,
                    ..Default::default()
                };
                let params = SimParams {
                    horizon_s: 14_400,
                    broadcast_radius_m: 6_000.0,
                    seed,
                    ..Default::default()
                };
                let out = run_single(&scenario, &PolicySpec::Rlw(cfg), seed, &params);
                srs.push(out.report.totals.sr);
            }
            means.push(mean(&srs));
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "mean SR fell with threshold: {means:?}");
        }
        assert!(means[3] - means[0] > 0.005, "threshold sweep had no effect: {means:?}");
    });
}

#[test]
fn criterion_7_directional_end_to_end() {
    criterion(7, Duration::from_secs(600), || {
        let scenario = Scenario::from_preset(preset("imbalanced").unwrap());
        let mut rlw_income = Vec::new();
        let mut rlw_cr = Vec::new();
        let mut myopic_income = Vec::new();
        let mut myopic_cr = Vec::new();
        let mut v1d3_income = Vec::new();
        for seed in 0..20u64 {
            let params = SimParams { horizon_s: 86_400, seed, ..Default::default() };
            let out = run_single(&scenario, &PolicySpec::Rlw(RlwConfig::default()), seed, &params);
            rlw_income.push(out.report.totals.income);
            rlw_cr.push(out.report.totals.cr);
            let out = run_single(&scenario, &PolicySpec::Myopic(MyopicSpec {}), seed, &params);
            myopic_income.push(out.report.totals.income);
            myopic_cr.push(out.report.totals.cr);
            let out = run_single(&scenario, &PolicySpec::V1d3(V1d3Config::default()), seed, &params);
            v1d3_income.push(out.report.totals.income);
        }
        let t_income = paired_t(&rlw_income, &myopic_income);
        let t_cr = paired_t(&rlw_cr, &myopic_cr);
        assert!(
            t_income > T_CRIT_ONE_SIDED_P05_DF19,
            "income t = {t_income} not significant at p < 0.05"
        );
        assert!(t_cr > T_CRIT_ONE_SIDED_P05_DF19, "cr t = {t_cr} not significant at p < 0.05");
        let wins = rlw_income.iter().zip(&v1d3_income).filter(|(a, b)| a >= b).count();
        assert!(wins >= 12, "learner beat the tabular baseline on only {wins}/20 seeds");
    });
}

#[test]
fn criterion_8_degenerate_mode_subsumption() {
    criterion(8, Duration::from_secs(60), || {
        // Raw unsmoothed edges with unit weights, no pruning, and the same
        // SGD cadence collapse the learner onto the tabular baseline.
        let degenerate = RlwConfig {
            standardize: false,
            smooth_rewards: false,
            sgd_alpha: Some(0.05),
            adapt_threshold: false,
            fixed_threshold: 0.0,
            raw_w_rew: 1.0,
            raw_w_res: 1.0,
            raw_w_p: 0.0,
            update_interval_s: 10,
            ..Default::default()
        };
        let scenario = Scenario::from_preset(preset("uniform").unwrap());
        let params = SimParams { horizon_s: 3_600, seed: 11, ..Default::default() };
        let a = run_single(&scenario, &PolicySpec::Rlw(degenerate), 11, &params);
        let b = run_single(&scenario, &PolicySpec::V1d3(V1d3Config::default()), 11, &params);
        assert!(a.report.totals.accepted > 0, "stream produced no dispatches");
        assert_eq!(
            a.report.decision_hash, b.report.decision_hash,
            "degenerate learner diverged from the tabular baseline"
        );
    });
}

#[test]
fn criterion_9_determinism_and_conservation() {
    criterion(9, Duration::from_secs(120), || {
        // Byte identity: the same config written to two directories must
        // produce identical artifact bytes, file by file.
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = |dir: &std::path::Path| {
            ExperimentConfig::from_toml_str(&format!(
                r#"
                [experiment]
                preset = "city_iii"
                horizon_s = 7200
                seed = 40
                out_dir = "{}"
                keep_match_log = true
                value_snapshot_interval_s = 600

                [policies.learner.rlw]
                "#,
                dir.display()
            ))
            .unwrap()
        };
        let report_a =
            dispatchsim_core::experiment::cmd_run(&config(dir_a.path()), None).unwrap();
        let report_b =
            dispatchsim_core::experiment::cmd_run(&config(dir_b.path()), None).unwrap();
        assert_eq!(report_a.demand_hash, report_b.demand_hash);
        assert_eq!(report_a.decision_hash, report_b.decision_hash);
        let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in &names {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between identical runs");
        }

        // Conservation: windows count a request exactly when its fate
        // settles, and the run-level balance includes what is still open.
        for (scenario, params) in [
            (Scenario::from_preset(preset("city_iii").unwrap()), SimParams {
                horizon_s: 7_200,
                seed: 40,
                ..Default::default()
            }),
            (Scenario::from_preset(scarce_city()), SimParams {
                horizon_s: 14_400,
                broadcast_radius_m: 6_000.0,
                seed: 0,
                ..Default::default()
            }),
        ] {
            let out = run_single(&scenario, &PolicySpec::Rlw(RlwConfig::default()), params.seed, &params);
            for w in &out.report.windows {
                assert_eq!(
                    w.requests,
                    w.completed + w.cancelled + w.expired,
                    "window {} leaks requests",
                    w.window_start
                );
                assert_eq!(w.accepted, w.completed + w.cancelled);
            }
            let c = &out.report.conservation;
            assert!(
                c.balanced(),
                "arrivals {} != completed {} + cancelled {} + expired {} + open {}",
                c.arrivals,
                c.completed,
                c.cancelled,
                c.expired,
                c.open_at_end
            );
            assert!(c.expired > 0, "scenario should exercise expiry accounting");
        }
    });
}
