//! Finite-difference cases for every differentiable op, each drawing a
//! random shape from the given rng.

use super::{input_grad_err, random_tensor, weighted_sum};
use gpn_core::tensor::{Tape, Tensor, UpsampleMode, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Case = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;
pub type Cases = Vec<(&'static str, Case)>;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;

pub fn all() -> Cases {
    let mut out = Vec::new();
    dense_gradients(&mut out);
    conv_gradients(&mut out);
    conv_sum_kernel_gradient(&mut out);
    upsample_gradients(&mut out);
    activation_gradients(&mut out);
    masked_softmax_gradient(&mut out);
    dropout_gradient(&mut out);
    elementwise_and_reduction_gradients(&mut out);
    structural_gradients(&mut out);
    composed_network_gradient(&mut out);
    out
}

/// Worst relative error of a case over `SEEDS` seeds, with its seed.
pub fn worst(case: &Case) -> (u64, f64) {
    (0..SEEDS)
        .map(|s| (s, case(&mut ChaCha8Rng::seed_from_u64(s))))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
}


fn dense_gradients(out: &mut Cases) {
    out.push(("dense", Box::new(|rng: &mut ChaCha8Rng| {
        let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let w_out = random_tensor(&[b, o], rng);
        let inputs = [
            random_tensor(&[b, i], rng),
            random_tensor(&[i, o], rng),
            random_tensor(&[o], rng),
        ];
        input_grad_err(&inputs, |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, &w_out)
        })
    })));
}

fn conv_gradients(out: &mut Cases) {
    out.push(("conv2d", Box::new(|rng: &mut ChaCha8Rng| {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let w_out = random_tensor(&[n, co, h, w], rng);
        let inputs = [
            random_tensor(&[n, ci, h, w], rng),
            random_tensor(&[co, ci, k, k], rng),
            random_tensor(&[co], rng),
        ];
        input_grad_err(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, &w_out)
        })
    })));
}

fn conv_sum_kernel_gradient(out: &mut Cases) {
        out.push(("conv2d sum", Box::new(|rng: &mut ChaCha8Rng| {
        let inputs = [random_tensor(&[2, 2, 4, 5], rng), random_tensor(&[3, 2, 3, 3], rng), random_tensor(&[3], rng)];
        input_grad_err(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            t.sum(y).unwrap()
        })
    })));
}

fn upsample_gradients(out: &mut Cases) {
    out.push(("upsample nearest", Box::new(|rng: &mut ChaCha8Rng| {
        let s = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let w_out = random_tensor(&[s[0], s[1], 2 * s[2], 2 * s[3]], rng);
        input_grad_err(&[random_tensor(&s, rng)], |t, v| {
            let y = t.upsample_double(v[0], UpsampleMode::Nearest).unwrap();
            weighted_sum(t, y, &w_out)
        })
    })));
    out.push(("upsample sub-pixel", Box::new(|rng: &mut ChaCha8Rng| {
        let c = rng.random_range(1..3);
        let s = [rng.random_range(1..3), 4 * c, rng.random_range(1..4), rng.random_range(1..4)];
        let w_out = random_tensor(&[s[0], c, 2 * s[2], 2 * s[3]], rng);
        input_grad_err(&[random_tensor(&s, rng)], |t, v| {
            let y = t.upsample_double(v[0], UpsampleMode::SubPixel).unwrap();
            weighted_sum(t, y, &w_out)
        })
    })));
}

fn unary(out: &mut Cases, name: &'static str, positive: bool, op: fn(&mut Tape<f64>, Var) -> Var) {
    out.push((name, Box::new(move |rng: &mut ChaCha8Rng| {
        let s = [rng.random_range(1..4), rng.random_range(1..6)];
        let mut x = random_tensor(&s, rng);
        if positive {
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        let w_out = random_tensor(&s, rng);
        input_grad_err(&[x], |t, v| {
            let y = op(t, v[0]);
            let ys = t.shape(y).to_vec();
            if ys == s {
                weighted_sum(t, y, &w_out)
            } else {
                let w = Tensor::from_fn(&ys, |i| w_out.data()[i % w_out.len()]);
                weighted_sum(t, y, &w)
            }
        })
    })));
}

fn activation_gradients(out: &mut Cases) {
    unary(out, "leaky_relu", false, |t, x| t.leaky_relu(x, 0.01).unwrap());
    unary(out, "leaky_relu steep", false, |t, x| t.leaky_relu(x, 0.3).unwrap());
    unary(out, "softmax rows", false, |t, x| t.softmax_rows(x).unwrap());
    unary(out, "sigmoid", false, |t, x| t.sigmoid(x).unwrap());
    unary(out, "tanh", false, |t, x| t.tanh(x).unwrap());
    unary(out, "log", true, |t, x| t.log(x).unwrap());
}

fn masked_softmax_gradient(out: &mut Cases) {
    out.push(("softmax axis 1 masked", Box::new(|rng: &mut ChaCha8Rng| {
        let s = [rng.random_range(1..3), 4, rng.random_range(1..3), rng.random_range(1..3)];
        let mask = [true, false, true, true];
        let w_out = random_tensor(&s, rng);
        input_grad_err(&[random_tensor(&s, rng)], |t, v| {
            let y = t.softmax_axis(v[0], 1, Some(&mask)).unwrap();
            weighted_sum(t, y, &w_out)
        })
    })));
}

fn dropout_gradient(out: &mut Cases) {
    out.push(("dropout", Box::new(|rng: &mut ChaCha8Rng| {
        let s = [3, rng.random_range(2..8)];
        let w_out = random_tensor(&s, rng);
        let seed: u64 = rng.random();
        input_grad_err(&[random_tensor(&s, rng)], |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(v[0], 0.4, true, &mut r).unwrap();
            weighted_sum(t, y, &w_out)
        })
    })));
}

fn elementwise_and_reduction_gradients(out: &mut Cases) {
    out.push(("binary", Box::new(|rng: &mut ChaCha8Rng| {
        let s = [rng.random_range(1..4), rng.random_range(1..5)];
        let w_out = random_tensor(&s, rng);
        input_grad_err(&[random_tensor(&s, rng), random_tensor(&s, rng)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            let d = t.sub(m, v[0]).unwrap();
            let q = t.square(d).unwrap();
            let c = t.scale(q, -1.7).unwrap();
            let c = t.add_scalar(c, 0.3).unwrap();
            weighted_sum(t, c, &w_out)
        })
    })));
    out.push(("reductions", Box::new(|rng: &mut ChaCha8Rng| {
        let s = [rng.random_range(1..4), rng.random_range(2..5)];
        let w_rows = random_tensor(&[s[0]], rng);
        input_grad_err(&[random_tensor(&s, rng)], |t, v| {
            let r = t.sum_last(v[0]).unwrap();
            let a = weighted_sum(t, r, &w_rows);
            let q = t.square(v[0]).unwrap();
            let m = t.mean(q).unwrap();
            t.add(a, m).unwrap()
        })
    })));
}

fn structural_gradients(out: &mut Cases) {
    out.push(("reshape/concat", Box::new(|rng: &mut ChaCha8Rng| {
        let (n, h, w) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
        let w_out = random_tensor(&[n, 3 * h * w], rng);
        input_grad_err(&[random_tensor(&[n, 2, h, w], rng), random_tensor(&[n, 1, h, w], rng)], |t, v| {
            let c = t.concat_channels(v[0], v[1]).unwrap();
            let f = t.reshape(c, &[n, 3 * h * w]).unwrap();
            weighted_sum(t, f, &w_out)
        })
    })));
    out.push(("select_rows/gather", Box::new(|rng: &mut ChaCha8Rng| {
        let (b, c) = (rng.random_range(2..5), rng.random_range(1..5));
        let rows: Vec<usize> = (0..5).map(|_| rng.random_range(0..b)).collect();
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let w_rows = random_tensor(&[5, c], rng);
        let w_g = random_tensor(&[b], rng);
        input_grad_err(&[random_tensor(&[b, c], rng)], |t, v| {
            let s = t.select_rows(v[0], &rows).unwrap();
            let a = weighted_sum(t, s, &w_rows);
            let g = t.gather(v[0], &idx).unwrap();
            let bsum = weighted_sum(t, g, &w_g);
            t.add(a, bsum).unwrap()
        })
    })));
}

fn composed_network_gradient(out: &mut Cases) {
    // dense -> leaky_relu -> softmax -> cross-entropy against a one-hot target.
    out.push(("composed", Box::new(|rng: &mut ChaCha8Rng| {
        let (b, i, h, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..6), rng.random_range(2..5));
        let target = Tensor::from_fn(&[b, o], |k| if k % o == (k / o) % o { 1.0 } else { 0.0 });
        let inputs = [
            random_tensor(&[b, i], rng),
            random_tensor(&[i, h], rng),
            random_tensor(&[h], rng),
            random_tensor(&[h, o], rng),
            random_tensor(&[o], rng),
        ];
        input_grad_err(&inputs, |t, v| {
            let z = t.dense(v[0], v[1], v[2]).unwrap();
            let a = t.leaky_relu(z, 0.01).unwrap();
            let logits = t.dense(a, v[3], v[4]).unwrap();
            let p = t.softmax_rows(logits).unwrap();
            let lp = t.log(p).unwrap();
            let tg = t.constant(target.clone());
            let ce = t.mul(tg, lp).unwrap();
            let s = t.sum(ce).unwrap();
            t.scale(s, -1.0).unwrap()
        })
    })));
}
