//! End-to-end gradient checks of the training objectives through the full
//! extractor and classifier against central finite differences.

use fedda_autograd::gradcheck::relative_error;
use fedda_autograd::{Tape, Tensor, Var};
use fedda_core::alignment::{kl_style_loss_tape, KlForm};
use fedda_core::federation::losses::{mse_tape, uce_tape};
use fedda_core::model::{concat_features, Mode, ModelConfig, Network, NetworkParams};
use fedda_core::params::Binding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

fn tiny() -> Network {
    Network::new(&ModelConfig {
        conv_channels: 4,
        heads: 2,
        blocks_per_stage: 1,
        classifier_hidden: [8, 4],
        ..ModelConfig::default()
    })
    .unwrap()
}

struct Instance {
    x: Tensor,
    labels: Vec<usize>,
    feats: [Vec<f64>; 3],
    mu_prev: Vec<f64>,
    target_mu: Vec<f64>,
    target_var: Vec<f64>,
    dropout_seed: u64,
}

fn instance(net: &Network, seed: u64) -> (Instance, NetworkParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = net.init(&mut rng);
    let b = 4;
    let w = net.config().style_dim();
    let x = Tensor::new(vec![b, 8, 246], (0..b * 8 * 246).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut vec_w = |lo: f64, hi: f64| (0..w).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
    let feats = [vec_w(0.0, 1.0), vec_w(0.0, 1.0), vec_w(0.0, 1.0)];
    let mu_prev = vec_w(0.0, 0.5);
    let target_mu = vec_w(0.0, 1.0);
    let target_var = vec_w(0.1, 1.0);
    let inst = Instance {
        x,
        labels: vec![0, 1, 1, 0],
        feats,
        mu_prev,
        target_mu,
        target_var,
        dropout_seed: seed ^ 0xD00D,
    };
    (inst, params)
}

#[derive(Clone, Copy)]
enum Objective {
    /// Classification-stage total: `½(UCE + MSE) + KL`.
    Total,
    /// Evidential loss alone.
    Uce,
    /// Alignment-stage style KL on dropout-active features.
    Alignment,
}

/// Evaluates the objective and, when `track`, the flat gradient over
/// extractor then classifier parameters.
fn evaluate(net: &Network, params: &NetworkParams, inst: &Instance, obj: Objective, track: bool) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.dropout_seed);
    let mut tape = Tape::new();
    let mut eb = Binding::new(&params.extractor, track);
    let mut cb = Binding::new(&params.classifier, track);
    let x = tape.constant(inst.x.clone());
    let style_kl = |tape: &mut Tape, z: Var| {
        let mu = tape.col_mean(z).unwrap();
        let var = tape.col_var(z).unwrap();
        let mt = tape.constant(Tensor::from_vec(inst.target_mu.clone()).unwrap());
        let vt = tape.constant(Tensor::from_vec(inst.target_var.clone()).unwrap());
        kl_style_loss_tape(tape, mu, var, mt, vt, 1e-6, KlForm::Textbook).unwrap()
    };
    let loss = match obj {
        Objective::Alignment => {
            let z = net.extractor.forward(&mut tape, &mut eb, x, Mode::McDropout, &mut rng).unwrap().out;
            style_kl(&mut tape, z)
        }
        Objective::Total | Objective::Uce => {
            let f = net.extractor.forward(&mut tape, &mut eb, x, Mode::Train, &mut rng).unwrap().out;
            let fc = concat_features(&mut tape, f, [&inst.feats[0], &inst.feats[1], &inst.feats[2]]).unwrap();
            let e = net.classifier.forward(&mut tape, &mut cb, fc, Mode::Train, &mut rng).unwrap();
            let uce = uce_tape(&mut tape, e, &inst.labels).unwrap();
            if let Objective::Uce = obj {
                uce
            } else {
                let mu = tape.col_mean(f).unwrap();
                let mse = mse_tape(&mut tape, mu, Some(&inst.mu_prev)).unwrap();
                let sum = tape.add(uce, mse).unwrap();
                let half = tape.scale(sum, 0.5).unwrap();
                let kl = style_kl(&mut tape, f);
                tape.add(half, kl).unwrap()
            }
        }
    };
    let value = tape.value(loss).item().unwrap();
    if !track {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let mut g = eb.gradients(&tape);
    g.extend(cb.gradients(&tape));
    (value, g)
}

/// Checks `coords` sampled trainable coordinates on each instance and
/// returns the worst relative error.
fn check(obj: Objective, coords: usize) -> f64 {
    let net = tiny();
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let (inst, params) = instance(&net, seed);
        let (_, grad) = evaluate(&net, &params, &inst, obj, true);
        let base = params.flatten();
        let trainable: Vec<usize> = {
            let mut v = Vec::new();
            let mut offset = 0;
            for p in [&params.extractor, &params.classifier] {
                for spec in p.layout().specs() {
                    if spec.trainable {
                        v.extend(offset + spec.offset..offset + spec.offset + spec.len());
                    }
                }
                offset += p.values().len();
            }
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for _ in 0..coords {
            let i = trainable[rng.gen_range(0..trainable.len())];
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut p = params.clone();
                p.assign_flat(&v).unwrap();
                evaluate(&net, &p, &inst, obj, false).0
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            let err = relative_error(grad[i], fd);
            assert!(err < TOL, "seed {seed} coord {i}: analytic {} vs fd {fd}", grad[i]);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn total_classification_loss_gradient_matches_finite_differences() {
    check(Objective::Total, 4);
}

#[test]
fn evidential_loss_gradient_through_model_matches_finite_differences() {
    check(Objective::Uce, 3);
}

#[test]
fn alignment_loss_gradient_through_extractor_matches_finite_differences() {
    check(Objective::Alignment, 3);
}

#[test]
fn every_classifier_parameter_on_one_instance() {
    let net = tiny();
    let (inst, params) = instance(&net, 77);
    let (_, grad) = evaluate(&net, &params, &inst, Objective::Total, true);
    let n_ext = params.extractor.values().len();
    let base = params.flatten();
    for i in n_ext..base.len() {
        let at = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            let mut p = params.clone();
            p.assign_flat(&v).unwrap();
            evaluate(&net, &p, &inst, Objective::Total, false).0
        };
        let fd = (at(H) - at(-H)) / (2.0 * H);
        assert!(relative_error(grad[i], fd) < TOL, "coord {i}: {} vs {fd}", grad[i]);
    }
}
