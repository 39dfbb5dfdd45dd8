//! Analytic gradients of every differentiable op against central finite
//! differences (h = 1e-6) on 100 random instances each.

use fedda_autograd::gradcheck::{central_difference, max_relative_error};
use fedda_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Scalarizes the op output with fixed random weights so that every output
/// element contributes a distinct cotangent.
fn scalar_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn check(inputs: &[Tensor], weight_seed: u64, build: &Build) -> f64 {
    // output shape probe
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = build(&mut probe, &vars);
    let out_shape = probe.shape(out).to_vec();
    let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
    let weights = random_tensor(&mut wrng, &out_shape, -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar_loss(&mut tape, out, &weights);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(|g| g.into_values())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = central_difference(input.values(), H, |probe_vals| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == i {
                        t.constant(Tensor::new(inp.shape().to_vec(), probe_vals.to_vec()).unwrap())
                    } else {
                        t.constant(inp.clone())
                    }
                })
                .collect();
            let o = build(&mut t, &vs);
            let l = scalar_loss(&mut t, o, &weights);
            t.value(l).item().unwrap()
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Runs `INSTANCES` random cases produced by `make` and asserts the worst
/// relative error is below tolerance.
fn run(name: &str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let (inputs, build) = make(&mut rng);
        worst = worst.max(check(&inputs, seed * 1000 + i as u64, build.as_ref()));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

#[test]
fn matmul() {
    run("matmul", 1, |rng| {
        let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
        let a = random_tensor(rng, &[m, k], -2.0, 2.0);
        let b = random_tensor(rng, &[k, n], -2.0, 2.0);
        (vec![a, b], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
    });
}

#[test]
fn matmul_three_by_four_times_four_by_two() {
    run("matmul 3x4x2", 2, |rng| {
        let a = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = random_tensor(rng, &[4, 2], -1.0, 1.0);
        (vec![a, b], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
    });
}

#[test]
fn batched_matmul_both_layouts() {
    run("bmm", 3, |rng| {
        let (g, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
        let trans = rng.gen_bool(0.5);
        let a = random_tensor(rng, &[g, m, k], -1.0, 1.0);
        let b = if trans {
            random_tensor(rng, &[g, n, k], -1.0, 1.0)
        } else {
            random_tensor(rng, &[g, k, n], -1.0, 1.0)
        };
        (vec![a, b], Box::new(move |t, v| t.bmm(v[0], v[1], trans).unwrap()))
    });
}

#[test]
fn elementwise_binary() {
    run("add/sub/mul/div", 4, |rng| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
        let a = random_tensor(rng, &shape, -2.0, 2.0);
        let b = random_tensor(rng, &shape, 0.5, 2.0);
        let which = rng.gen_range(0..4);
        (
            vec![a, b],
            Box::new(move |t, v| match which {
                0 => t.add(v[0], v[1]).unwrap(),
                1 => t.sub(v[0], v[1]).unwrap(),
                2 => t.mul(v[0], v[1]).unwrap(),
                _ => t.div(v[0], v[1]).unwrap(),
            }),
        )
    });
}

#[test]
fn row_broadcasts() {
    run("add_row/mul_row", 5, |rng| {
        let c = dim(rng, 1, 4);
        let shape = [dim(rng, 1, 3), dim(rng, 1, 3), c];
        let x = random_tensor(rng, &shape, -2.0, 2.0);
        let r = random_tensor(rng, &[c], -2.0, 2.0);
        let mul = rng.gen_bool(0.5);
        (
            vec![x, r],
            Box::new(move |t, v| {
                if mul {
                    t.mul_row(v[0], v[1]).unwrap()
                } else {
                    t.add_row(v[0], v[1]).unwrap()
                }
            }),
        )
    });
}

#[test]
fn unary_activations() {
    run("relu/softplus/sigmoid/exp/square/scale/add_scalar/clamp", 6, |rng| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
        let x = random_tensor(rng, &shape, -3.0, 3.0);
        let which = rng.gen_range(0..8);
        (
            vec![x],
            Box::new(move |t, v| match which {
                0 => t.relu(v[0]).unwrap(),
                1 => t.softplus(v[0]).unwrap(),
                2 => t.sigmoid(v[0]).unwrap(),
                3 => t.exp(v[0]).unwrap(),
                4 => t.square(v[0]).unwrap(),
                5 => t.scale(v[0], -1.7).unwrap(),
                6 => t.add_scalar(v[0], 0.3).unwrap(),
                _ => t.clamp_min(v[0], 0.1).unwrap(),
            }),
        )
    });
}

#[test]
fn log_and_digamma() {
    run("log/digamma", 7, |rng| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
        let x = random_tensor(rng, &shape, 0.2, 8.0);
        let dg = rng.gen_bool(0.5);
        (
            vec![x],
            Box::new(move |t, v| if dg { t.digamma(v[0]).unwrap() } else { t.log(v[0]).unwrap() }),
        )
    });
}

#[test]
fn dropout_with_fixed_mask() {
    run("dropout", 8, |rng| {
        let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
        let x = random_tensor(rng, &shape, -2.0, 2.0);
        let seed = rng.gen::<u64>();
        (
            vec![x],
            Box::new(move |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                t.dropout(v[0], 0.3, &mut r).unwrap()
            }),
        )
    });
}

#[test]
fn sequence_pooling() {
    run("maxpool_seq/mean_seq", 9, |rng| {
        let shape = [dim(rng, 1, 3), 2 * dim(rng, 1, 4), dim(rng, 1, 3)];
        let x = random_tensor(rng, &shape, -2.0, 2.0);
        let max = rng.gen_bool(0.5);
        (
            vec![x],
            Box::new(move |t, v| if max { t.maxpool_seq(v[0]).unwrap() } else { t.mean_seq(v[0]).unwrap() }),
        )
    });
}

#[test]
fn conv1d_same_padding() {
    run("conv1d", 10, |rng| {
        let (b, l, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 6), dim(rng, 1, 3), dim(rng, 1, 3));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = random_tensor(rng, &[b, l, cin], -1.0, 1.0);
        let w = random_tensor(rng, &[k, cin, cout], -1.0, 1.0);
        let bias = random_tensor(rng, &[cout], -1.0, 1.0);
        (vec![x, w, bias], Box::new(|t, v| t.conv1d(v[0], v[1], Some(v[2])).unwrap()))
    });
}

#[test]
fn layer_norm() {
    run("layer_norm", 11, |rng| {
        let c = dim(rng, 2, 6);
        let rows = dim(rng, 1, 3);
        let x = random_tensor(rng, &[rows, c], -2.0, 2.0);
        let g = random_tensor(rng, &[c], 0.5, 1.5);
        let b = random_tensor(rng, &[c], -0.5, 0.5);
        (vec![x, g, b], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()))
    });
}

#[test]
fn batch_norm_train_and_eval() {
    run("batch_norm", 12, |rng| {
        let c = dim(rng, 1, 4);
        let rows = dim(rng, 2, 6);
        let x = random_tensor(rng, &[rows, c], -2.0, 2.0);
        let g = random_tensor(rng, &[c], 0.5, 1.5);
        let b = random_tensor(rng, &[c], -0.5, 0.5);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
        let train = rng.gen_bool(0.5);
        (
            vec![x, g, b],
            Box::new(move |t, v| {
                if train {
                    t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
                } else {
                    t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
                }
            }),
        )
    });
}

#[test]
fn softmax_variants() {
    run("softmax/log_softmax", 13, |rng| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
        let x = random_tensor(rng, &shape, -3.0, 3.0);
        let log = rng.gen_bool(0.5);
        (
            vec![x],
            Box::new(move |t, v| if log { t.log_softmax(v[0]).unwrap() } else { t.softmax(v[0]).unwrap() }),
        )
    });
}

#[test]
fn layout_ops() {
    run("reshape/swap_middle/concat_cols", 14, |rng| {
        let (a, b, c, d) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 2));
        let x = random_tensor(rng, &[a, b, c, d], -1.0, 1.0);
        let q = dim(rng, 1, 3);
        let y = random_tensor(rng, &[a * b, q], -1.0, 1.0);
        (
            vec![x, y],
            Box::new(move |t, v| {
                let s = t.swap_middle(v[0]).unwrap();
                let r = t.reshape(s, vec![a * c, b * d]).unwrap();
                let r = t.reshape(r, vec![a * b, c * d]).unwrap();
                t.concat_cols(r, v[1]).unwrap()
            }),
        )
    });
}

#[test]
fn reductions() {
    run("sum/mean/col_mean/col_var/row_sum", 15, |rng| {
        let shape = [dim(rng, 1, 5), dim(rng, 1, 4)];
        let x = random_tensor(rng, &shape, -2.0, 2.0);
        let which = rng.gen_range(0..5);
        (
            vec![x],
            Box::new(move |t, v| match which {
                0 => t.sum(v[0]).unwrap(),
                1 => t.mean(v[0]).unwrap(),
                2 => t.col_mean(v[0]).unwrap(),
                3 => t.col_var(v[0]).unwrap(),
                _ => t.row_sum(v[0]).unwrap(),
            }),
        )
    });
}
