//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{loss_of, random_batches, random_dataset, rel_err};
use mbhgcn::data::mask_cold_start;
use mbhgcn::eval::{evaluate, evaluate_cold_start, EvalReport};
use mbhgcn::graph::NormalizedGraph;
use mbhgcn::model::{
    combine_layers, forward, item_gamma, layer_weights, propagate, user_adaptive_aggregate,
    InteractionCounts,
};
use mbhgcn::oracle::{
    brute_rank, dense_adjacency, dense_lightgcn, dense_propagate, finite_diff_grad,
};
use mbhgcn::synthetic::{generate, SyntheticConfig};
use mbhgcn::training::{backward, train, RegScope, TrainConfig, TrainLog};
use mbhgcn::{GraphSet, Matrix, ModelParams, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn monotone(report: &EvalReport) -> bool {
    let ks = &report.ks;
    ks.windows(2)
        .all(|w| report.hr[&w[0]] <= report.hr[&w[1]] && report.ndcg[&w[0]] <= report.ndcg[&w[1]])
        && ks.iter().all(|k| report.ndcg[k] <= report.hr[k])
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..30u64 {
        for beta in [0.0, 1e-3] {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let users = rng.random_range(2..=6);
            let items = rng.random_range(3..=8);
            let k = rng.random_range(1..=3);
            let dim = rng.random_range(1..=4);
            let layers = rng.random_range(1..=2);
            let ds = random_dataset(&mut rng, users, items, k, 0.3);
            let mut params = ModelParams::init(users, items, k, dim, layers, seed).unwrap();
            for w in &mut params.behavior_weights {
                *w = rng.random_range(0.5..1.5);
            }
            let variant = params.variant;
            let graphs = GraphSet::build(&ds);
            let counts = InteractionCounts::from_dataset(&ds);
            let batches = random_batches(&mut rng, &ds, 4);
            let trace = forward(&params, &graphs, &counts, &variant, None);
            let analytic = backward(
                &trace,
                &graphs,
                &counts,
                &batches,
                &params,
                beta,
                RegScope::Full,
            );
            let numeric = finite_diff_grad(
                |p| {
                    loss_of(
                        p,
                        &graphs,
                        &counts,
                        &variant,
                        &batches,
                        beta,
                        RegScope::Full,
                    )
                },
                &params,
                1e-5,
            );
            let pairs = analytic
                .user_emb
                .as_slice()
                .iter()
                .zip(numeric.user_emb.as_slice())
                .chain(
                    analytic
                        .item_emb
                        .as_slice()
                        .iter()
                        .zip(numeric.item_emb.as_slice()),
                )
                .chain(
                    analytic
                        .behavior_weights
                        .iter()
                        .zip(&numeric.behavior_weights),
                );
            for (a, b) in pairs {
                worst = worst.max(rel_err(*a, *b, 1e-6));
            }
            instances += 1;
        }
    }
    let took = within(start, Duration::from_secs(60))?;
    ensure(worst < 1e-4, || {
        format!("max relative error {worst:.3e} over {instances} instances")
    })?;
    Ok(format!(
        "{instances} instances, max relative error {worst:.2e}, {took:.1?}"
    ))
}

fn propagation_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let users = rng.random_range(1..=50);
        let items = rng.random_range(1..=50);
        let density = rng.random_range(0.0..0.3);
        let layers = rng.random_range(1..=4);
        let dim = rng.random_range(1..=6);
        let edges: Vec<(usize, usize)> = (0..users)
            .flat_map(|u| (0..items).map(move |i| (u, i)))
            .filter(|_| rng.random::<f64>() < density)
            .collect();
        let graph = NormalizedGraph::from_edges(users, items, edges.iter().copied());
        let input = Matrix::random_normal(users + items, dim, 1.0, &mut rng);
        let sparse = propagate(&graph, &input, layers);
        let adj = dense_adjacency(users, items, &edges).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = input.iter_rows().map(<[f64]>::to_vec).collect();
        let dense = dense_propagate(&adj, &rows, layers);
        for (s, d) in sparse.iter().zip(&dense) {
            worst = worst.max(s.max_abs_diff(&Matrix::from_rows(d)));
        }
        let combined = combine_layers(&sparse, &layer_weights(layers));
        worst = worst
            .max(combined.max_abs_diff(&Matrix::from_rows(&dense_lightgcn(&adj, &rows, layers))));
    }
    let took = within(start, Duration::from_secs(10))?;
    ensure(worst <= 1e-10, || {
        format!("max elementwise difference {worst:.3e}")
    })?;
    Ok(format!("30 graphs, max difference {worst:.2e}, {took:.1?}"))
}

fn aggregation_values() -> Outcome {
    for k in 1..=5 {
        let v = [0.4, -0.1, 2.0];
        let vectors: Vec<&[f64]> = vec![&v; k];
        let (_, delta) = user_adaptive_aggregate(&vectors, 0);
        for w in delta {
            ensure((w - 1.0 / k as f64).abs() <= 1e-12, || {
                format!("K={k}: delta {w}")
            })?;
        }
    }
    let (_, delta) = user_adaptive_aggregate(&[&[1.0], &[3.0]], 0);
    ensure(
        (delta[0] - 0.1192).abs() <= 1e-3 && (delta[1] - 0.8808).abs() <= 1e-3,
        || format!("scalar delta {delta:?}"),
    )?;
    let (gamma, _) = item_gamma(&[3, 1], &[1.0, 1.0]);
    ensure(gamma == vec![0.75, 0.25], || format!("gamma {gamma:?}"))?;
    Ok(format!(
        "delta ({:.4}, {:.4}), gamma {gamma:?}",
        delta[0], delta[1]
    ))
}

fn metric_exactness(reports: &[EvalReport]) -> Outcome {
    let contribution = mbhgcn::eval::ndcg_at_k(&[3], 10);
    ensure(contribution == 0.5, || {
        format!("rank 3 NDCG {contribution}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut compared = 0;
    for seed in 0..10u64 {
        let mut ds = random_dataset(&mut rng, 20, 50, 2, 0.1);
        // Hold out one untouched item per user.
        for u in 0..20 {
            let seen = ds.user_items(1)[u].clone();
            ds.test[u] = (0..50).find(|i| seen.binary_search(i).is_err());
        }
        let params = ModelParams::init(20, 50, 2, 8, 2, seed).unwrap();
        let report = evaluate(&params, &ds, &[1, 5, 10, 20, 50]);
        let brute = brute_rank(&params, &ds).map_err(|e| e.to_string())?;
        ensure(report.per_user_rank == brute, || {
            format!("seed {seed}: ranks differ from brute force")
        })?;
        ensure(monotone(&report), || {
            format!("seed {seed}: metrics not monotone in K")
        })?;
        compared += report.num_evaluated;
    }
    for report in reports {
        ensure(monotone(report), || {
            "a training report is not monotone in K".to_owned()
        })?;
    }
    Ok(format!(
        "{compared} user ranks equal brute force, {} extra reports monotone",
        reports.len()
    ))
}

fn memorization(reports: &mut Vec<EvalReport>) -> Outcome {
    let start = Instant::now();
    let mut ds = generate(&SyntheticConfig {
        users: 50,
        items: 30,
        seed: 5,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    // Fold validation items into training so the final parameters, not the
    // best-validation snapshot, are the ones evaluated.
    let target = ds.target();
    for u in 0..ds.num_users() {
        if let Some(i) = ds.valid[u].take() {
            ds.edges[target].push((u, i));
        }
    }
    ds.recompute_item_counts();
    let config = TrainConfig {
        dim: 16,
        layers: 2,
        epochs: 300,
        patience: 300,
        learning_rate: 0.01,
        beta: 1e-4,
        node_dropout: 0.0,
        message_dropout: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let (params, log) = train(&ds, &config, &Variant::default()).map_err(|e| e.to_string())?;
    let first = log.epochs[0].total_loss;
    let last = log.epochs.last().unwrap().total_loss;
    let drop = 1.0 - last / first;
    let report = evaluate(&params, &ds, &[10, 20, 50]);
    let hr = report.hr[&10];
    reports.push(report);
    let took = within(start, Duration::from_secs(300))?;
    ensure(log.epochs.len() == 300, || {
        format!("ran {} epochs", log.epochs.len())
    })?;
    ensure(drop >= 0.9, || {
        format!("loss {first:.4} -> {last:.4} ({:.1}% drop)", drop * 100.0)
    })?;
    ensure(hr >= 0.8, || format!("test HR@10 {hr:.3}"))?;
    Ok(format!(
        "loss {first:.4} -> {last:.4} ({:.1}% drop), HR@10 {hr:.3}, {took:.1?}",
        drop * 100.0
    ))
}

fn multi_behavior_benefit(reports: &mut Vec<EvalReport>) -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let ds = generate(&SyntheticConfig {
            users: 400,
            items: 200,
            clusters: 10,
            target_per_user: 5,
            extras_per_behavior: 5,
            noise: 0.2,
            target_in_aux: 0.5,
            seed,
            ..SyntheticConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let config = TrainConfig {
            dim: 16,
            layers: 2,
            epochs: 100,
            patience: 20,
            learning_rate: 0.01,
            batch_size: 256,
            beta: 1e-4,
            seed,
            ..TrainConfig::default()
        };
        let mut hr = Vec::new();
        for variant in [
            Variant::default(),
            Variant {
                use_unified: false,
                ..Variant::default()
            },
        ] {
            let (params, _) = train(&ds, &config, &variant).map_err(|e| e.to_string())?;
            let report = evaluate(&params, &ds, &[10, 20, 50]);
            hr.push(report.hr[&10]);
            reports.push(report);
        }
        if hr[0] > hr[1] {
            wins += 1;
        }
        detail.push(format!("{:.3} vs {:.3}", hr[0], hr[1]));
    }
    let took = within(start, Duration::from_secs(900))?;
    let summary = format!("full vs w/o unified HR@10: {}", detail.join(", "));
    ensure(wins >= 2, || format!("{wins}/3 wins; {summary}"))?;
    Ok(format!("{wins}/3 wins; {summary}; {took:.1?}"))
}

fn determinism() -> Outcome {
    let ds = generate(&SyntheticConfig {
        users: 80,
        items: 40,
        seed: 9,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let config = TrainConfig {
        dim: 8,
        epochs: 15,
        batch_size: 64,
        learning_rate: 0.01,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || -> Result<(ModelParams, TrainLog, EvalReport), String> {
        let (params, log) = train(&ds, &config, &Variant::default()).map_err(|e| e.to_string())?;
        let report = evaluate(&params, &ds, &[10, 20, 50]);
        Ok((params, log, report))
    };
    let (p1, l1, r1) = run()?;
    let (p2, l2, r2) = run()?;
    let strip = |log: &TrainLog| -> Vec<String> {
        log.epochs
            .iter()
            .map(|e| {
                let line = e.csv_line();
                line[..line.rfind(',').unwrap()].to_owned()
            })
            .collect()
    };
    ensure(strip(&l1) == strip(&l2), || {
        "training logs differ".to_owned()
    })?;
    ensure(p1 == p2, || "final parameters differ".to_owned())?;
    ensure(r1 == r2 && r1.to_csv() == r2.to_csv(), || {
        "evaluation reports differ".to_owned()
    })?;
    Ok(format!(
        "{} epochs and report identical across runs",
        l1.epochs.len()
    ))
}

fn cold_start_protocol() -> Outcome {
    let ds = generate(&SyntheticConfig {
        users: 120,
        items: 60,
        clusters: 4,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let (masked, cold) = mask_cold_start(&ds, 30, 11).map_err(|e| e.to_string())?;
    let target = masked.target();
    let leftover = masked.edges[target]
        .iter()
        .filter(|(u, _)| cold.binary_search(u).is_ok())
        .count();
    ensure(cold.len() == 30, || format!("{} cold users", cold.len()))?;
    ensure(leftover == 0, || {
        format!("{leftover} target edges remain for cold users")
    })?;
    let config = TrainConfig {
        dim: 8,
        epochs: 10,
        batch_size: 128,
        learning_rate: 0.01,
        seed: 11,
        ..TrainConfig::default()
    };
    let (params, _) = train(&masked, &config, &Variant::default()).map_err(|e| e.to_string())?;
    let ks = [10, 20, 50];
    let full = evaluate(&params, &masked, &ks);
    let all_test = evaluate_cold_start(&params, &masked.test_users(), &masked, &ks);
    ensure(full == all_test, || {
        "cold-start evaluation over all test users differs from evaluate".to_owned()
    })?;
    let cold_report = evaluate_cold_start(&params, &cold, &masked, &ks);
    ensure(cold_report.num_evaluated == cold.len(), || {
        "cold report size".to_owned()
    })?;
    Ok(format!(
        "30 cold users with 0 target edges; cold HR@10 {:.3}; all-test report identical",
        cold_report.hr[&10]
    ))
}

fn main() -> ExitCode {
    let mut reports = Vec::new();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("propagation oracle equivalence", propagation_equivalence()),
        ("aggregation unit values", aggregation_values()),
    ];
    let memo = memorization(&mut reports);
    let benefit = multi_behavior_benefit(&mut reports);
    results.push(("metric exactness", metric_exactness(&reports)));
    results.push(("memorization", memo));
    results.push(("multi-behavior benefit", benefit));
    results.push(("determinism", determinism()));
    results.push(("cold-start protocol", cold_start_protocol()));

    let mut failed = 0;
    for (n, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", n + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
