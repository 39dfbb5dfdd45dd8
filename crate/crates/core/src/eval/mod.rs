//! Evaluation: predictions, metrics, uncertainty thresholds and
//! feature importance.

pub mod importance;
pub mod metrics;

use fedda_autograd::Tensor;

use crate::data::{batch_tensor, Example};
use crate::error::{Error, Result};
use crate::model::{argmax, head_probs, DirichletAudit, HeadKind, Mode, Network, NetworkParams};
use crate::rng::stream;
use crate::uncertainty::mc_sweep;

pub use metrics::{compute_metrics, uncertainty_threshold_report, MetricsReport, Prediction, ThresholdRow};

fn to_predictions(examples: &[Example], probs: &[Vec<f64>], us: Option<Vec<f64>>) -> Vec<Prediction> {
    examples
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(i, (e, p))| Prediction {
            id: e.id.clone(),
            truth: e.y,
            predicted: argmax(p),
            score: p.get(1).copied().unwrap_or(0.0),
            uncertainty: us.as_ref().map(|u| u[i]),
        })
        .collect()
}

fn uncertainties(head: HeadKind, outputs: &[Vec<f64>]) -> Option<Vec<f64>> {
    (head == HeadKind::Evidential).then(|| {
        outputs
            .iter()
            .map(|e| e.len() as f64 / e.iter().map(|v| v + 1.0).sum::<f64>())
            .collect()
    })
}

/// Deterministic eval-mode predictions.
pub fn predict_eval(
    net: &Network,
    params: &NetworkParams,
    examples: &[Example],
    feats: [&[f64]; 3],
    batch_size: usize,
    audit: &mut DirichletAudit,
) -> Result<Vec<Prediction>> {
    if examples.is_empty() {
        return Err(Error::Data("prediction over an empty split".into()));
    }
    let head = net.classifier.head();
    // eval mode draws no randomness; the stream only satisfies the signature
    let mut rng = stream(0, "eval");
    let mut outputs = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let (_, out): (Tensor, Tensor) = net.head_output(params, &batch_tensor(chunk), feats, Mode::Eval, &mut rng)?;
        if head == HeadKind::Evidential {
            audit.check_batch(&out);
        }
        let k = out.shape()[1];
        outputs.extend(out.values().chunks(k).map(<[f64]>::to_vec));
    }
    let probs: Vec<Vec<f64>> = outputs.iter().map(|o| head_probs(head, o)).collect();
    Ok(to_predictions(examples, &probs, uncertainties(head, &outputs)))
}

/// Predictions from MC-averaged outputs over `passes` dropout passes.
pub fn predict_mc<R: rand::Rng + ?Sized>(
    net: &Network,
    params: &NetworkParams,
    examples: &[Example],
    feats: [&[f64]; 3],
    passes: usize,
    batch_size: usize,
    rng: &mut R,
    audit: &mut DirichletAudit,
) -> Result<Vec<Prediction>> {
    let sweep = mc_sweep(net, params, examples, feats, passes, batch_size, rng)?;
    if sweep.head == HeadKind::Evidential {
        let k = net.config().classes;
        for chunk in sweep.outputs.chunks(batch_size.max(1)) {
            audit.check_batch(&Tensor::new(vec![chunk.len(), k], chunk.concat())?);
        }
    }
    Ok(to_predictions(examples, &sweep.probs(), uncertainties(sweep.head, &sweep.outputs)))
}
