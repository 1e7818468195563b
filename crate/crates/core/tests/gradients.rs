mod common;

use std::sync::Arc;

use common::{random_matrix, rng, toy, toy_input, Toy};
use contravirt::numerics::{check_gradients, Matrix, ParamStore, Tape, Var};
use contravirt::objectives::{info_nce, info_nce_in_window, supervised_mse, total_loss, Denominator, MoCoQueue};
use contravirt::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TAU: f64 = 0.07;
const LAMBDA: f64 = 0.7;

fn supervised(toy: &Toy, tape: &mut Tape<f64>, store: &ParamStore<f64>, input: &contravirt::encoder::WindowInput<f64>, target: &Matrix<f64>) -> Result<(Var, Var)> {
    let out = toy.encoder.forward(tape, store, &toy.graph, input, true)?;
    let pred = tape.gather_rows(out.out.unwrap(), &toy.graph.real)?;
    Ok((supervised_mse(tape, pred, target)?, out.h))
}

fn queue(toy: &Toy, size: usize, seed: u64) -> MoCoQueue<f64> {
    let mut q = MoCoQueue::new(512, toy.embed_dim);
    q.push(&random_matrix(&mut rng(seed), size, toy.embed_dim, 1.0)).unwrap();
    q
}

fn key_store(toy: &Toy, seed: u64) -> ParamStore<f64> {
    let mut keys = toy.params.clone();
    let mut r = rng(seed);
    for p in keys.iter_mut() {
        let (rows, cols) = p.value.shape();
        let noise = random_matrix(&mut r, rows, cols, 0.05);
        p.value.axpy(1.0, &noise).unwrap();
    }
    keys
}

fn masked(input: &contravirt::encoder::WindowInput<f64>, toy: &Toy, seed: u64) -> contravirt::encoder::WindowInput<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    let mut out = input.clone();
    let keep = |r: &mut rand_chacha::ChaCha8Rng| if r.gen_bool(0.7) { 1.0 } else { 0.0 };
    for x in out.propagated.as_mut_slice() {
        *x *= keep(&mut r);
    }
    let n = toy.graph.n();
    let data = (0..n * toy.layout.static_width()).map(|_| keep(&mut r)).collect();
    out.static_mask = Some(Matrix::from_vec(n, toy.layout.static_width(), data).unwrap());
    out
}

fn assert_close(name: &str, check: contravirt::numerics::GradCheck) {
    println!("{name}: {} entries, max rel {:.3e}, max abs {:.3e}", check.n_checked, check.max_rel_error, check.max_abs_error);
    assert!(check.n_checked > 200);
    assert!(check.max_rel_error < TOL, "{name}: max relative error {}", check.max_rel_error);
}

#[test]
fn augmented_moco_total_loss() {
    let toy = toy(1);
    let mut r = rng(2);
    let input = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    let keys = toy.encoder.embed_constant(&key_store(&toy, 3), &toy.graph, &masked(&input, &toy, 4)).unwrap();
    let negatives = queue(&toy, 16, 5).to_matrix();
    let check = check_gradients(&toy.params, EPS, |tape, store| {
        let (sup, h) = supervised(&toy, tape, store, &input, &target)?;
        let k = tape.constant(keys.clone());
        let c = info_nce(tape, h, k, &negatives, TAU, Denominator::WithPositive)?;
        total_loss(tape, sup, Some(c), LAMBDA)
    })
    .unwrap();
    assert_close("augmented moco", check);
}

#[test]
fn augmented_in_window_total_loss() {
    let toy = toy(11);
    let mut r = rng(12);
    let input = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    let key_input = masked(&input, &toy, 13);
    let identity: Arc<[usize]> = (0..toy.graph.n()).collect();
    let check = check_gradients(&toy.params, EPS, |tape, store| {
        let (sup, h) = supervised(&toy, tape, store, &input, &target)?;
        let kh = toy.encoder.forward(tape, store, &toy.graph, &key_input, false)?.h;
        let c = info_nce_in_window(tape, h, kh, &identity, TAU, Denominator::WithPositive)?;
        total_loss(tape, sup, Some(c), LAMBDA)
    })
    .unwrap();
    assert_close("augmented in-window", check);
}

#[test]
fn multistep_moco_total_loss() {
    let toy = toy(21);
    let mut r = rng(22);
    let input = toy_input(&toy, &mut r);
    let later = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    // Each virtual node is paired with a real node.
    let pairing = [1usize, 3];
    let keys = toy.encoder.embed_constant(&key_store(&toy, 23), &toy.graph, &later).unwrap().select_rows(&pairing);
    let negatives = queue(&toy, 16, 24).to_matrix();
    let check = check_gradients(&toy.params, EPS, |tape, store| {
        let (sup, h) = supervised(&toy, tape, store, &input, &target)?;
        let q = tape.gather_rows(h, &toy.graph.virtual_nodes)?;
        let k = tape.constant(keys.clone());
        let c = info_nce(tape, q, k, &negatives, TAU, Denominator::WithPositive)?;
        total_loss(tape, sup, Some(c), LAMBDA)
    })
    .unwrap();
    assert_close("multistep moco", check);
}

#[test]
fn multistep_in_window_total_loss() {
    let toy = toy(31);
    let mut r = rng(32);
    let input = toy_input(&toy, &mut r);
    let later = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    let positions: Arc<[usize]> = Arc::from(vec![1usize, 3]);
    let check = check_gradients(&toy.params, EPS, |tape, store| {
        let (sup, h) = supervised(&toy, tape, store, &input, &target)?;
        let q = tape.gather_rows(h, &toy.graph.virtual_nodes)?;
        let kh = toy.encoder.forward(tape, store, &toy.graph, &later, false)?.h;
        let keys = tape.gather_rows(kh, &toy.graph.real)?;
        let c = info_nce_in_window(tape, q, keys, &positions, TAU, Denominator::WithPositive)?;
        total_loss(tape, sup, Some(c), LAMBDA)
    })
    .unwrap();
    assert_close("multistep in-window", check);
}

#[test]
fn key_encoder_receives_no_gradient() {
    let toy = toy(41);
    let mut r = rng(42);
    let input = toy_input(&toy, &mut r);
    let target = random_matrix(&mut r, 4, toy.layout.n_targets(), 1.0);
    let mut query = toy.params.clone();
    let mut keys = key_store(&toy, 43);
    query.zero_grad();
    keys.zero_grad();
    let k = toy.encoder.embed_constant(&keys, &toy.graph, &masked(&input, &toy, 44)).unwrap();
    let negatives = queue(&toy, 16, 45).to_matrix();

    let mut tape = Tape::new();
    let (sup, h) = supervised(&toy, &mut tape, &query, &input, &target).unwrap();
    let kv = tape.constant(k);
    let c = info_nce(&mut tape, h, kv, &negatives, TAU, Denominator::WithPositive).unwrap();
    let loss = total_loss(&mut tape, sup, Some(c), LAMBDA).unwrap();
    tape.backward(loss).unwrap().accumulate_into(&mut query).unwrap();

    assert!(query.iter().any(|p| p.grad().max_abs() > 0.0));
    for p in keys.iter() {
        assert_eq!(p.grad().max_abs(), 0.0, "key parameter {} has gradient", p.name);
    }
}
