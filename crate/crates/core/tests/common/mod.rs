//! Finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grad_cases;

use gpn_core::tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

pub const STEP: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn eval(inputs: &[Tensor<f64>], f: &impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.value(loss).item()
}

/// Analytic vs central-difference gradient of a scalar function of the
/// given input tensors. Returns `(analytic, numeric)` flattened over all
/// inputs in order.
pub fn input_grads(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for &v in &vars {
        match tape.grad(v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work, &f);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work, &f);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    (analytic, numeric)
}

pub fn input_grad_err(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let (a, n) = input_grads(inputs, f);
    rel_err(&a, &n)
}

/// Same check for every parameter of `store`; `f` builds the loss and
/// may pull parameters of `store` onto the tape.
pub fn param_grad_err(
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
) -> f64 {
    param_grad_err_step(store, STEP, f)
}

/// `param_grad_err` with an explicit step, for nets whose pre-activations
/// crowd a kink.
pub fn param_grad_err_step(
    store: &mut ParamStore<f64>,
    step: f64,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
) -> f64 {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    tape.backward(loss).unwrap();
    tape.flush_grads(store);
    let mut analytic = Vec::new();
    for id in 0..store.len() {
        analytic.extend_from_slice(store.grad(id));
    }
    store.zero_grads();
    let value = |s: &ParamStore<f64>| {
        let mut t = Tape::inference();
        let l = f(&mut t, s);
        t.value(l).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for id in 0..store.len() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + step;
            let up = value(store);
            store.value_mut(id).data_mut()[j] = orig - step;
            let down = value(store);
            store.value_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random weights so that the checked scalar is a generic linear
/// functional of the output rather than a plain sum.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Var {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p).unwrap()
}
