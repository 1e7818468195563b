mod common;

use common::{brute_force_nce, random_matrix, rng};
use contravirt::encoder::momentum_update;
use contravirt::numerics::{Matrix, ParamStore, Tape};
use contravirt::objectives::{augmented_loss, lambda_value, multistep_loss, Denominator, MoCoQueue};
use proptest::prelude::*;

#[test]
fn lambda_probes() {
    for mae in [0.0, 0.5, 2.0, 3.0, 100.0, f64::NAN] {
        assert_eq!(lambda_value(0, mae), 0.0);
    }
    assert!((lambda_value(10, 2.0) - 0.25).abs() < 1e-15);
    let expected = 1.0 / (1.0 + (-10.0f64).exp());
    assert!((lambda_value(40, 3.0) - expected).abs() < 1e-6);
}

fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[test]
fn losses_match_brute_force_softmax() {
    let d = 5;
    let tau = 0.07;
    for (case, &size) in [0usize, 1, 16].iter().enumerate() {
        let mut r = rng(500 + case as u64);
        let mut queue = MoCoQueue::new(512, d);
        queue.push(&random_matrix(&mut r, size, d, 1.0)).unwrap();
        assert_eq!(queue.len(), size);
        let negatives = rows(&queue.to_matrix());

        // Augmented: every node against its own masked view.
        let h = random_matrix(&mut r, 6, d, 1.0);
        let hm = random_matrix(&mut r, 6, d, 1.0);
        let mut tape = Tape::new();
        let (hv, hmv) = (tape.constant(h.clone()), tape.constant(hm.clone()));
        let loss = augmented_loss(&mut tape, hv, hmv, &queue, tau, Denominator::WithPositive).unwrap();
        let got = tape.value(loss).item().unwrap();
        let want = brute_force_nce(&h, &hm, &negatives, tau);
        assert!((got - want).abs() < 1e-12, "augmented, queue {size}: {got} vs {want}");

        // Multi-step: virtual rows against their paired real rows.
        let hv_rows = random_matrix(&mut r, 2, d, 1.0);
        let paired = random_matrix(&mut r, 2, d, 1.0);
        let mut tape = Tape::new();
        let (q, k) = (tape.constant(hv_rows.clone()), tape.constant(paired.clone()));
        let loss = multistep_loss(&mut tape, q, k, &queue, tau, Denominator::WithPositive).unwrap();
        let got = tape.value(loss).item().unwrap();
        let want = brute_force_nce(&hv_rows, &paired, &negatives, tau);
        assert!((got - want).abs() < 1e-12, "multistep, queue {size}: {got} vs {want}");
    }
}

#[test]
fn queue_is_fifo_at_capacity() {
    let cap = 512;
    let d = 3;
    let mut queue = MoCoQueue::new(cap, d);
    let mut pushed: Vec<Vec<f64>> = Vec::new();
    let mut r = rng(600);
    for batch in [100usize, 300, 1, 250, 64, 7] {
        let keys = random_matrix(&mut r, batch, d, 1.0);
        queue.push(&keys).unwrap();
        pushed.extend(rows(&keys));
        assert_eq!(queue.len(), pushed.len().min(cap));
    }
    let expected = &pushed[pushed.len() - cap..];
    for (got, want) in queue.entries().zip(expected) {
        let norm = want.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w / norm).abs() < 1e-15);
        }
    }
}

fn store(values: Matrix<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", values);
    s
}

#[test]
fn ema_gap_decays_geometrically() {
    let mut r = rng(700);
    let query = store(random_matrix(&mut r, 4, 3, 1.0));
    let key0 = random_matrix(&mut r, 4, 3, 1.0);
    let gap0: Vec<f64> = key0.as_slice().iter().zip(query.iter().next().unwrap().value.as_slice()).map(|(k, q)| k - q).collect();
    for m in [0.0, 0.9, 0.999] {
        let mut key = store(key0.clone());
        for n in 1..=50 {
            momentum_update(&query, &mut key, m).unwrap();
            let k = key.iter().next().unwrap().value.as_slice().to_vec();
            let q = query.iter().next().unwrap().value.as_slice();
            for ((kv, qv), g0) in k.iter().zip(q).zip(&gap0) {
                let want = m.powi(n) * g0;
                assert!((kv - qv - want).abs() <= 1e-12, "m={m} n={n}: gap {} vs {want}", kv - qv);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn queue_never_exceeds_capacity(cap in 1usize..64, batches in proptest::collection::vec(0usize..40, 1..10)) {
        let mut queue = MoCoQueue::new(cap, 2);
        let mut r = rng(cap as u64);
        let mut total = 0;
        for b in batches {
            queue.push(&random_matrix(&mut r, b, 2, 1.0)).unwrap();
            total += b;
            prop_assert_eq!(queue.len(), total.min(cap));
        }
    }

    #[test]
    fn lambda_stays_in_unit_interval(epoch in 0usize..500, mae in 0.0f64..50.0) {
        let l = lambda_value(epoch, mae);
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn lambda_monotone_in_mae(epoch in 1usize..100, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(lambda_value(epoch, lo) <= lambda_value(epoch, hi));
    }
}
