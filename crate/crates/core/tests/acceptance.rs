//! End-to-end acceptance suite. Prints one line per criterion and fails
//! listing every criterion that did not hold.
//!
//! Run with `cargo test -p contravirt --test acceptance -- --nocapture`.

mod common;

use std::sync::Arc;
use std::time::Instant;

use common::{brute_force_nce, neumann, prepare, random_matrix, rng, synthetic, toy, toy_input};
use contravirt::baselines::{StationWind, DEFAULT_RIDGE};
use contravirt::datakit::Dataset;
use contravirt::diffusion::{build_diffusion, ppr, reweight, transition, DiffusionParams};
use contravirt::encoder::momentum_update;
use contravirt::features::{FeatureLayout, NormStats};
use contravirt::geo_graph::{knn_adjacency_points, GeoPoint, NodeKind};
use contravirt::metrics::{angular_error, angular_mae, angular_rmse, EvalReport, Select, Variable};
use contravirt::numerics::{check_gradients, Matrix, ParamStore, Tape};
use contravirt::objectives::{
    augmented_loss, info_nce, info_nce_in_window, lambda_value, multistep_loss, supervised_mse, total_loss, ContrastiveConfig,
    Denominator, LambdaSchedule, MoCoQueue, Strategy,
};
use contravirt::pipeline::{method_name, Baseline, Prepared};
use contravirt::trainer::{evaluate_model, train, EpochDiagnostics, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity() -> Outcome {
    let toy = toy(1);
    let mut r = rng(2);
    let input = toy_input(&toy, &mut r);
    let later = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    let mut negatives_q = MoCoQueue::new(512, toy.embed_dim);
    negatives_q.push(&random_matrix(&mut r, 16, toy.embed_dim, 1.0)).unwrap();
    let negatives = negatives_q.to_matrix();
    let mut masked = input.clone();
    let n = toy.graph.n();
    let sw = toy.layout.static_width();
    masked.static_mask = Some(Matrix::from_vec(n, sw, (0..n * sw).map(|_| f64::from(u8::from(r.gen_bool(0.7)))).collect()).unwrap());
    let key_store = toy.params.clone();
    let keys_aug = toy.encoder.embed_constant(&key_store, &toy.graph, &masked).unwrap();
    let keys_ms = toy.encoder.embed_constant(&key_store, &toy.graph, &later).unwrap().select_rows(&[1, 3]);
    let positions: Arc<[usize]> = Arc::from(vec![1usize, 3]);
    let identity: Arc<[usize]> = (0..n).collect();

    let mut worst: f64 = 0.0;
    for case in 0..4 {
        let res = check_gradients(&toy.params, 1e-5, |tape, store| {
            let out = toy.encoder.forward(tape, store, &toy.graph, &input, true)?;
            let pred = tape.gather_rows(out.out.unwrap(), &toy.graph.real)?;
            let sup = supervised_mse(tape, pred, &target)?;
            let c = match case {
                0 => {
                    let k = tape.constant(keys_aug.clone());
                    info_nce(tape, out.h, k, &negatives, 0.07, Denominator::WithPositive)?
                }
                1 => {
                    let kh = toy.encoder.forward(tape, store, &toy.graph, &masked, false)?.h;
                    info_nce_in_window(tape, out.h, kh, &identity, 0.07, Denominator::WithPositive)?
                }
                2 => {
                    let q = tape.gather_rows(out.h, &toy.graph.virtual_nodes)?;
                    let k = tape.constant(keys_ms.clone());
                    info_nce(tape, q, k, &negatives, 0.07, Denominator::WithPositive)?
                }
                _ => {
                    let q = tape.gather_rows(out.h, &toy.graph.virtual_nodes)?;
                    let kh = toy.encoder.forward(tape, store, &toy.graph, &later, false)?.h;
                    let k = tape.gather_rows(kh, &toy.graph.real)?;
                    info_nce_in_window(tape, q, k, &positions, 0.07, Denominator::WithPositive)?
                }
            };
            total_loss(tape, sup, Some(c), 0.7)
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(res.max_rel_error);
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} over both strategies (limit 1e-4)"))
}

fn random_points(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<GeoPoint> {
    (0..n).map(|_| GeoPoint::new(r.gen_range(50.5..53.5), r.gen_range(3.0..7.5)).unwrap()).collect()
}

fn ppr_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for g in 0..20u64 {
        let mut r = rng(1000 + g);
        let n = r.gen_range(2..=50);
        let k = r.gen_range(1..=(n - 1).min(5));
        let alpha = [0.05, 0.15, 0.5][g as usize % 3];
        let t = transition::<f64>(&knn_adjacency_points(&random_points(&mut r, n), k).unwrap());
        let d = ppr(&t, alpha).map_err(|e| e.to_string())?;
        let dense: Vec<Vec<f64>> = (0..n).map(|i| t.t.row(i).to_vec()).collect();
        let oracle = neumann(&dense, alpha, 1000);
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((d.get(i, j) - oracle[i][j]).abs());
            }
        }
    }
    check(worst <= 1e-10, format!("max deviation {worst:.2e} from the 1000-term series on 20 graphs (limit 1e-10)"))
}

fn reweighting_exactness() -> Outcome {
    let mut max_entries = 0;
    for g in 0..20u64 {
        let mut r = rng(2000 + g);
        let n = r.gen_range(2..=50);
        let k = r.gen_range(1..=(n - 1).min(5));
        let adj = knn_adjacency_points(&random_points(&mut r, n), k).unwrap();
        let kinds: Vec<NodeKind> = (0..n).map(|i| if i == 0 || r.gen_bool(0.4) { NodeKind::Real } else { NodeKind::Virtual }).collect();
        let d = ppr(&transition::<f64>(&adj), 0.15).unwrap();
        let w = reweight(&d, &kinds, 3.0, 0.3).unwrap();
        for i in 0..n {
            for j in 0..n {
                let factor = match (kinds[i], kinds[j]) {
                    (NodeKind::Real, NodeKind::Real) => 1.0,
                    (NodeKind::Virtual, NodeKind::Virtual) => 0.3,
                    _ => 3.0,
                };
                if w.get(i, j).to_bits() != (d.get(i, j) * factor).to_bits() {
                    return Err(format!("graph {g} entry ({i},{j}) is not {factor} times the PPR value"));
                }
            }
        }
        let s = build_diffusion::<f64>(&adj, &kinds, &DiffusionParams::default()).unwrap();
        max_entries = max_entries.max(s.max_row_entries());
    }
    check(max_entries <= 8, format!("all ratios in {{1, 3, 0.3}}; at most {max_entries} entries per sparsified row"))
}

fn lambda_schedule() -> Outcome {
    let a = lambda_value(0, 2.7);
    let b = lambda_value(10, 2.0);
    let c = lambda_value(40, 3.0);
    let want = 1.0 / (1.0 + (-10.0f64).exp());
    check(
        a == 0.0 && (b - 0.25).abs() < 1e-15 && (c - want).abs() < 1e-6,
        format!("(0, 2.7) -> {a}, (10, 2) -> {b}, (40, 3) -> {c:.9}"),
    )
}

fn loss_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for (case, &size) in [0usize, 1, 16].iter().enumerate() {
        let mut r = rng(3000 + case as u64);
        let mut queue = MoCoQueue::new(512, 5);
        queue.push(&random_matrix(&mut r, size, 5, 1.0)).unwrap();
        let qm = queue.to_matrix();
        let negatives: Vec<Vec<f64>> = (0..qm.rows()).map(|i| qm.row(i).to_vec()).collect();
        for multistep in [false, true] {
            let rows = if multistep { 2 } else { 6 };
            let q = random_matrix(&mut r, rows, 5, 1.0);
            let k = random_matrix(&mut r, rows, 5, 1.0);
            let mut tape = Tape::new();
            let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
            let loss = if multistep {
                multistep_loss(&mut tape, qv, kv, &queue, 0.07, Denominator::WithPositive)
            } else {
                augmented_loss(&mut tape, qv, kv, &queue, 0.07, Denominator::WithPositive)
            }
            .unwrap();
            let got = tape.value(loss).item().unwrap();
            worst = worst.max((got - brute_force_nce(&q, &k, &negatives, 0.07)).abs());
        }
    }
    check(worst < 1e-12, format!("max deviation {worst:.2e} for queue sizes 0, 1, 16 (limit 1e-12)"))
}

fn moco_mechanics() -> Outcome {
    let mut r = rng(4000);
    let mut queue = MoCoQueue::new(512, 3);
    let mut pushed = Vec::new();
    for batch in [300usize, 250, 90] {
        let m = random_matrix(&mut r, batch, 3, 1.0);
        queue.push(&m).unwrap();
        pushed.extend((0..batch).map(|i| m.row(i).to_vec()));
    }
    let expected = &pushed[pushed.len() - 512..];
    let fifo = queue.len() == 512
        && queue.entries().zip(expected).all(|(got, want): (&[f64], &Vec<f64>)| {
            let n = want.iter().map(|x| x * x).sum::<f64>().sqrt();
            got.iter().zip(want).all(|(g, w)| (g - w / n).abs() < 1e-15)
        });

    // Keys enter the loss as constants, so the key store gets no gradient.
    let toy = toy(5);
    let input = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    let mut query = toy.params.clone();
    let mut keys = toy.params.clone();
    query.zero_grad();
    keys.zero_grad();
    let k = toy.encoder.embed_constant(&keys, &toy.graph, &input).unwrap();
    let mut tape = Tape::new();
    let out = toy.encoder.forward(&mut tape, &query, &toy.graph, &input, true).unwrap();
    let pred = tape.gather_rows(out.out.unwrap(), &toy.graph.real).unwrap();
    let sup = supervised_mse(&mut tape, pred, &target).unwrap();
    let kv = tape.constant(k);
    let negatives = random_matrix(&mut r, 16, toy.embed_dim, 1.0);
    let c = info_nce(&mut tape, out.h, kv, &negatives, 0.07, Denominator::WithPositive).unwrap();
    let loss = total_loss(&mut tape, sup, Some(c), 1.0).unwrap();
    tape.backward(loss).unwrap().accumulate_into(&mut query).unwrap();
    let key_grad = keys.iter().map(|p| p.grad().max_abs()).fold(0.0, f64::max);
    let query_grad = query.iter().map(|p| p.grad().max_abs()).fold(0.0, f64::max);

    let mut ema_worst: f64 = 0.0;
    let mut q = ParamStore::new();
    q.add("w", random_matrix(&mut r, 3, 3, 1.0));
    let k0 = random_matrix(&mut r, 3, 3, 1.0);
    for m in [0.0, 0.9, 0.999] {
        let mut ks = ParamStore::new();
        ks.add("w", k0.clone());
        for n in 1..=100 {
            momentum_update(&q, &mut ks, m).unwrap();
            let (kv, qv) = (ks.iter().next().unwrap().value.as_slice(), q.iter().next().unwrap().value.as_slice());
            for ((a, b), g0) in kv.iter().zip(qv).zip(k0.as_slice().iter().zip(qv).map(|(k, q)| k - q)) {
                ema_worst = ema_worst.max((a - b - m.powi(n) * g0).abs());
            }
        }
    }
    check(
        fifo && key_grad == 0.0 && query_grad > 0.0 && ema_worst < 1e-12,
        format!("FIFO at 512: {fifo}; key gradient {key_grad}; EMA gap deviation {ema_worst:.1e} at m in {{0, 0.9, 0.999}}"),
    )
}

fn angular_metrics() -> Outcome {
    let mut r = rng(5000);
    let p: Vec<f64> = (0..1000).map(|_| r.gen_range(0.0..360.0)).collect();
    let t: Vec<f64> = (0..1000).map(|_| r.gen_range(0.0..360.0)).collect();
    let (mae, rmse) = (angular_mae(&p, &t).unwrap(), angular_rmse(&p, &t).unwrap());
    let (a, b) = (angular_error(350.0, 10.0), angular_error(180.0, 0.0));
    check(a == 20.0 && b == 180.0 && rmse >= mae, format!("(350, 10) -> {a}; (180, 0) -> {b}; RMSE {rmse:.2} >= MAE {mae:.2}"))
}

fn short_run(p: &Prepared) -> (Vec<EpochDiagnostics>, String) {
    let contrastive = ContrastiveConfig { strategy: Strategy::Multistep, queue_size: 64, ..ContrastiveConfig::default() };
    let cfg = TrainConfig { max_epochs: 2, stride: 24, embed_dim: 16, seed: 5, ..TrainConfig::default() };
    let out = train(&p.data, &cfg, &contrastive, &LambdaSchedule::default()).unwrap();
    let mut report = evaluate_model(&out.model, &p.data, &p.dataset, &p.eval_anchors(12), "m").unwrap();
    let (b, _) = p.baselines(3, DEFAULT_RIDGE, 4).evaluate(&Baseline::ALL, &p.eval_anchors(12)).unwrap();
    report.merge(&b);
    (out.diagnostics, report.to_json().unwrap())
}

fn determinism_and_leakage() -> Outcome {
    let (dataset, split) = synthetic(1500);
    let a = prepare(dataset.clone(), split.clone(), false, FeatureLayout::default());
    let b = prepare(dataset.clone(), split.clone(), false, FeatureLayout::default());
    let identical = short_run(&a) == short_run(&b);

    let train_only = Dataset {
        stations: dataset.stations.iter().filter(|s| !split.is_test(&s.meta.id)).cloned().collect(),
        ..dataset.clone()
    };
    let stats = NormStats::compute(&train_only, &split.train, 0..train_only.n_steps).unwrap();
    let stats_equal = stats == a.data.stats;
    let stored = a.baselines(3, DEFAULT_RIDGE, 4).fit(&StationWind::build(&a.dataset, &a.data.stats)).unwrap();
    let mut ctx = a.baselines(3, DEFAULT_RIDGE, 4);
    ctx.dataset = &train_only;
    let refit = ctx.fit(&StationWind::build(&train_only, &stats)).unwrap();
    let fits_equal = stored == refit;
    check(
        identical && stats_equal && fits_equal,
        format!("repeat runs identical: {identical}; NormStats reproduced: {stats_equal}; baseline fits reproduced: {fits_equal}"),
    )
}

const EVAL_STRIDE: usize = 6;

struct AcceptanceRun {
    report: EvalReport,
    multistep_final: EpochDiagnostics,
    learned: Vec<String>,
}

fn acceptance_run() -> AcceptanceRun {
    let started = Instant::now();
    let (dataset, split) = synthetic(8000);
    let layout = FeatureLayout::default();
    let with_diffusion = prepare(dataset.clone(), split.clone(), false, layout);
    let plain = prepare(dataset, split, true, layout);
    let anchors = with_diffusion.eval_anchors(EVAL_STRIDE);
    let cfg = TrainConfig { max_epochs: 10, stride: 2, embed_dim: 32, seed: 7, ..TrainConfig::default() };
    let mut report = EvalReport::new();
    let mut learned = Vec::new();
    let mut multistep_final = None;
    for (strategy, use_moco, no_diffusion) in [
        (Strategy::Augmented, true, false),
        (Strategy::Multistep, true, false),
        (Strategy::Augmented, false, false),
        (Strategy::Multistep, false, false),
        (Strategy::None, false, false),
        (Strategy::None, false, true),
    ] {
        let name = method_name(strategy, use_moco, no_diffusion);
        let p = if no_diffusion { &plain } else { &with_diffusion };
        let contrastive = ContrastiveConfig { strategy, use_moco, ..ContrastiveConfig::default() };
        let t = Instant::now();
        let out = train(&p.data, &cfg, &contrastive, &LambdaSchedule::default()).unwrap();
        let r = evaluate_model(&out.model, &p.data, &p.dataset, &anchors, &name).unwrap();
        let last = out.diagnostics.last().unwrap().clone();
        println!(
            "  {name}: {} epochs in {:.0}s; dd {:.2} ff {:.3} gff {:.3}; pos {:.3} neg {:.3}",
            out.diagnostics.len(),
            t.elapsed().as_secs_f64(),
            r.pooled_mae(&name, Variable::Direction),
            r.pooled_mae(&name, Variable::Speed),
            r.pooled_mae(&name, Variable::Gust),
            last.pos_dist,
            last.neg_dist
        );
        if strategy == Strategy::Multistep && use_moco {
            multistep_final = Some(last);
        }
        report.merge(&r);
        learned.push(name);
    }
    let (b, _) = with_diffusion.baselines(3, DEFAULT_RIDGE, 2).evaluate(&Baseline::ALL, &anchors).unwrap();
    for m in Baseline::ALL {
        println!(
            "  {}: dd {:.2} ff {:.3} gff {:.3}",
            m.name(),
            b.pooled_mae(m.name(), Variable::Direction),
            b.pooled_mae(m.name(), Variable::Speed),
            b.pooled_mae(m.name(), Variable::Gust)
        );
    }
    report.merge(&b);
    println!("  acceptance run took {:.0}s", started.elapsed().as_secs_f64());
    AcceptanceRun { report, multistep_final: multistep_final.unwrap(), learned }
}

fn ordering(run: &AcceptanceRun) -> Outcome {
    let r = &run.report;
    let full = "ContraVirt(Augmented MoCo)";
    let ablated = "w/o Contrastive & Diffusion";
    let vars = [Variable::Direction, Variable::Speed, Variable::Gust];
    let a = vars.iter().all(|&v| r.pooled_mae(ablated, v) > r.pooled_mae(full, v));
    let margin = |m: &str, v: Variable| {
        let best = r.pooled_mae("IDW", v).min(r.pooled_mae("KNN", v));
        1.0 - r.pooled_mae(m, v) / best
    };
    let contravirt: Vec<&String> = run.learned.iter().filter(|m| m.starts_with("ContraVirt")).collect();
    let best = contravirt
        .iter()
        .map(|m| (m.as_str(), margin(m, Variable::Speed).min(margin(m, Variable::Gust))))
        .fold(("", f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let b = best.1 >= 0.10;
    check(
        a && b,
        format!(
            "(a) {ablated} worse than {full} on all variables: {a} \
             [dd {:.2} vs {:.2}, ff {:.3} vs {:.3}, gff {:.3} vs {:.3}]; \
             (b) best speed/gust margin over IDW and KNN {:.1}% by {} (need 10%): {b}",
            r.pooled_mae(ablated, Variable::Direction),
            r.pooled_mae(full, Variable::Direction),
            r.pooled_mae(ablated, Variable::Speed),
            r.pooled_mae(full, Variable::Speed),
            r.pooled_mae(ablated, Variable::Gust),
            r.pooled_mae(full, Variable::Gust),
            best.1 * 100.0,
            best.0
        ),
    )
}

fn pair_margin(run: &AcceptanceRun) -> Outcome {
    let d = &run.multistep_final;
    check(d.pos_dist < d.neg_dist, format!("final epoch {}: positive {:.4} < negative {:.4}", d.epoch, d.pos_dist, d.neg_dist))
}

fn lead_tendency(run: &AcceptanceRun) -> Outcome {
    let r = &run.report;
    let mut violations = Vec::new();
    for m in r.methods() {
        for v in [Variable::Speed, Variable::Gust] {
            let at = |lead| r.pooled(&Select { method: Some(&m), variable: Some(v), lead: Some(lead), ..Select::default() }).mae();
            if at(6) < at(1) {
                violations.push(format!("{m} {} lead 6 {:.3} < lead 1 {:.3}", v.code(), at(6), at(1)));
            }
        }
    }
    let n = r.methods().len();
    check(violations.is_empty(), if violations.is_empty() { format!("lead 6 >= lead 1 for all {n} methods") } else { violations.join("; ") })
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient fidelity", gradient_fidelity()),
        (2, "PPR correctness", ppr_correctness()),
        (3, "reweighting exactness", reweighting_exactness()),
        (4, "lambda schedule", lambda_schedule()),
        (5, "loss oracles", loss_oracles()),
        (6, "MoCo mechanics", moco_mechanics()),
        (7, "angular metrics", angular_metrics()),
    ];
    println!("running the end-to-end acceptance configuration");
    let run = acceptance_run();
    results.push((8, "end-to-end ordering", ordering(&run)));
    results.push((9, "pair-distance margin", pair_margin(&run)));
    results.push((10, "determinism and leakage", determinism_and_leakage()));
    results.push((11, "lead-time tendency", lead_tendency(&run)));
    results.sort_by_key(|r| r.0);

    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS {name}: {d}"),
            Err(d) => {
                println!("criterion {n:>2} FAIL {name}: {d}");
                failed.push(format!("{n} ({name})"));
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
