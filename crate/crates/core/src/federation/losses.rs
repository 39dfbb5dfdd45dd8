//! Classification losses: Dirichlet expected cross-entropy, feature-mean
//! consistency, and their combination.

use fedda_autograd::{digamma, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DirichletOutput;

/// Which loss terms are active during classification training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSet {
    pub kl: bool,
    pub uce: bool,
    pub mse: bool,
}

impl Default for LossSet {
    fn default() -> Self {
        LossSet {
            kl: true,
            uce: true,
            mse: true,
        }
    }
}

impl LossSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl || self.uce || self.mse) {
            return Err(Error::Config("loss set is empty".into()));
        }
        Ok(())
    }

    /// Short label such as `KL+UCE+MSE`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.kl {
            parts.push("KL");
        }
        if self.uce {
            parts.push("UCE");
        }
        if self.mse {
            parts.push("MSE");
        }
        parts.join("+")
    }

    /// The seven non-empty subsets in a fixed order.
    pub fn all_nonempty() -> Vec<LossSet> {
        [
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, false, true),
            (true, true, false),
            (false, true, true),
            (true, true, true),
        ]
        .into_iter()
        .map(|(kl, uce, mse)| LossSet { kl, uce, mse })
        .collect()
    }
}

fn check_one_hot(y: &[f64], k: usize) -> Result<usize> {
    if y.len() != k {
        return Err(Error::Dimension(format!("label has {} entries, expected {k}", y.len())));
    }
    let ones = y.iter().filter(|v| **v == 1.0).count();
    let zeros = y.iter().filter(|v| **v == 0.0).count();
    if ones != 1 || zeros != k - 1 {
        return Err(Error::Data(format!("label {y:?} is not one-hot")));
    }
    Ok(y.iter().position(|v| *v == 1.0).unwrap())
}

/// `Σ_k y_k (ψ(S) − ψ(α_k))` for one sample.
pub fn loss_uce(d: &DirichletOutput, y: &[f64]) -> Result<f64> {
    let k = check_one_hot(y, d.classes())?;
    Ok(digamma(d.strength)? - digamma(d.alpha[k])?)
}

/// `‖μ_prev − μ_curr‖²`; an unset previous mean counts as zero.
pub fn loss_mse_consistency(mu_curr: &[f64], mu_prev: Option<&[f64]>) -> Result<f64> {
    match mu_prev {
        Some(prev) if prev.len() != mu_curr.len() => Err(Error::Dimension(format!(
            "previous mean has {} entries, current {}",
            prev.len(),
            mu_curr.len()
        ))),
        Some(prev) => Ok(prev.iter().zip(mu_curr).map(|(p, c)| (p - c) * (p - c)).sum()),
        None => Ok(mu_curr.iter().map(|c| c * c).sum()),
    }
}

/// `½(mean-over-batch L_UCE + L_MSE)`.
pub fn total_classification_loss(
    batch: &[DirichletOutput],
    labels: &[Vec<f64>],
    mu_curr: &[f64],
    mu_prev: Option<&[f64]>,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} outputs for {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let uce = batch
        .iter()
        .zip(labels)
        .map(|(d, y)| loss_uce(d, y))
        .sum::<Result<f64>>()?
        / batch.len() as f64;
    Ok(0.5 * (uce + loss_mse_consistency(mu_curr, mu_prev)?))
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside {k} classes")));
        }
        v[i * k + y] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), k], v)?)
}

/// Batch-mean UCE from `[B×K]` evidence.
pub fn uce_tape(tape: &mut Tape, evidence: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(evidence)[1];
    let y = tape.constant(one_hot(labels, k)?);
    let alpha = tape.add_scalar(evidence, 1.0)?;
    let strength = tape.row_sum(alpha)?;
    let psi_s = tape.digamma(strength)?;
    let psi_a = tape.digamma(alpha)?;
    let picked = tape.mul(psi_a, y)?;
    let psi_true = tape.row_sum(picked)?;
    let per_sample = tape.sub(psi_s, psi_true)?;
    Ok(tape.mean(per_sample)?)
}

/// Batch-mean softmax cross-entropy from `[B×K]` logits.
pub fn cross_entropy_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(logits)[1];
    let y = tape.constant(one_hot(labels, k)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, y)?;
    let per_sample = tape.row_sum(picked)?;
    let mean = tape.mean(per_sample)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// `‖μ_prev − μ_curr‖²` with `μ_prev` a constant.
pub fn mse_tape(tape: &mut Tape, mu_curr: Var, mu_prev: Option<&[f64]>) -> Result<Var> {
    let w = tape.shape(mu_curr).iter().product::<usize>();
    let prev = match mu_prev {
        Some(p) if p.len() != w => {
            return Err(Error::Dimension(format!("previous mean has {} entries, current {w}", p.len())))
        }
        Some(p) => p.to_vec(),
        None => vec![0.0; w],
    };
    let prev = tape.constant(Tensor::new(tape.shape(mu_curr).to_vec(), prev)?);
    let diff = tape.sub(prev, mu_curr)?;
    let sq = tape.square(diff)?;
    Ok(tape.sum(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedda_autograd::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dir(e: &[f64]) -> DirichletOutput {
        DirichletOutput::from_evidence(e).unwrap()
    }

    #[test]
    fn uce_closed_forms() {
        assert!((loss_uce(&dir(&[3.0, 1.0]), &[1.0, 0.0]).unwrap() - 0.45).abs() < 1e-10);
        assert!((loss_uce(&dir(&[0.0, 0.0]), &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-10);
        assert!(matches!(loss_uce(&dir(&[1.0, 1.0]), &[1.0, 1.0]), Err(Error::Data(_))));
        assert!(loss_uce(&dir(&[1.0, 1.0]), &[0.5, 0.5]).is_err());
    }

    #[test]
    fn uce_decreases_with_true_class_evidence() {
        let values: Vec<f64> = (0..=10)
            .map(|e| loss_uce(&dir(&[e as f64, 2.0]), &[1.0, 0.0]).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
        assert!(values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mse_examples() {
        let a = vec![0.3, -1.2, 2.0];
        assert_eq!(loss_mse_consistency(&a, Some(&a)).unwrap(), 0.0);
        assert_eq!(loss_mse_consistency(&[1.0; 256], None).unwrap(), 256.0);
        let b = vec![1.0, 0.5, -0.5];
        assert_eq!(
            loss_mse_consistency(&a, Some(&b)).unwrap(),
            loss_mse_consistency(&b, Some(&a)).unwrap()
        );
        assert!(loss_mse_consistency(&a, Some(&[1.0])).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let d = dir(&[3.0, 1.0]);
        // uce 0.45, mse = 0.1
        let mse_vec = [0.1f64.sqrt()];
        let total = total_classification_loss(&[d], &[vec![1.0, 0.0]], &mse_vec, None).unwrap();
        assert!((total - 0.275).abs() < 1e-10);
        // mse zero and uce zero is unreachable for finite evidence, so check
        // the zero-mse branch separately
        let z = total_classification_loss(&[dir(&[0.0, 0.0])], &[vec![0.0, 1.0]], &[0.0], Some(&[0.0])).unwrap();
        assert!((z - 0.5).abs() < 1e-10);
    }

    #[test]
    fn loss_set_labels_and_grid() {
        let grid = LossSet::all_nonempty();
        assert_eq!(grid.len(), 7);
        assert_eq!(grid[6].label(), "KL+UCE+MSE");
        assert!(LossSet { kl: false, uce: false, mse: false }.validate().is_err());
    }

    #[test]
    fn uce_tape_matches_value_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let b = rng.gen_range(1..5);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let e: Vec<f64> = (0..2 * b).map(|_| rng.gen_range(0.0..6.0)).collect();
            let eval = |vals: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![b, 2], vals.to_vec()).unwrap());
                let l = uce_tape(&mut tape, x, &labels).unwrap();
                tape.value(l).item().unwrap()
            };
            let direct: f64 = e
                .chunks(2)
                .zip(&labels)
                .map(|(ev, &y)| {
                    let mut oh = vec![0.0; 2];
                    oh[y] = 1.0;
                    loss_uce(&dir(ev), &oh).unwrap()
                })
                .sum::<f64>()
                / b as f64;
            assert!((eval(&e) - direct).abs() < 1e-12);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![b, 2], e.clone()).unwrap(), true);
            let l = uce_tape(&mut tape, x, &labels).unwrap();
            tape.backward(l).unwrap();
            let g = tape.grad(x).unwrap().into_values();
            let fd = central_difference(&e, 1e-6, eval);
            assert!(max_relative_error(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn mse_and_ce_tapes_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = rng.gen_range(1..8);
            let cur: Vec<f64> = (0..w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let prev: Vec<f64> = (0..w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eval = |v: &[f64]| {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![w], v.to_vec()).unwrap());
                let l = mse_tape(&mut tape, x, Some(&prev)).unwrap();
                tape.value(l).item().unwrap()
            };
            assert!((eval(&cur) - loss_mse_consistency(&cur, Some(&prev)).unwrap()).abs() < 1e-12);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![w], cur.clone()).unwrap(), true);
            let l = mse_tape(&mut tape, x, Some(&prev)).unwrap();
            tape.backward(l).unwrap();
            let fd = central_difference(&cur, 1e-6, eval);
            assert!(max_relative_error(&tape.grad(x).unwrap().into_values(), &fd) < 1e-4);

            let b = rng.gen_range(1..5);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let logits: Vec<f64> = (0..2 * b).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let eval = |v: &[f64]| {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![b, 2], v.to_vec()).unwrap());
                let l = cross_entropy_tape(&mut tape, x, &labels).unwrap();
                tape.value(l).item().unwrap()
            };
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![b, 2], logits.clone()).unwrap(), true);
            let l = cross_entropy_tape(&mut tape, x, &labels).unwrap();
            tape.backward(l).unwrap();
            let fd = central_difference(&logits, 1e-6, eval);
            assert!(max_relative_error(&tape.grad(x).unwrap().into_values(), &fd) < 1e-4);
        }
    }
}
