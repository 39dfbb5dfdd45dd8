//! Feature importance over ROI cells: integrated gradients, occlusion and
//! their joint ranking.

use fedda_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, Example, CELLS, MAX_REGIONS, TEMPLATES, TEMPLATE_NAMES};
use crate::error::{Error, Result};
use crate::model::{concat_features, HeadKind, Mode, Network, NetworkParams};
use crate::params::Binding;
use crate::rng::stream;

pub const DEFAULT_IG_STEPS: usize = 50;
/// Joint score above which a cell is flagged as highly discriminative.
pub const JOINT_FLAG: f64 = 0.5;

/// Midpoint Riemann integrated gradients along the straight path from
/// `baseline` to `x`. `grad` returns the gradient of the scalar output at
/// each of the `steps` path points given as rows.
pub fn integrated_gradients_path<F>(x: &[f64], baseline: &[f64], steps: usize, mut grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    if steps < 2 {
        return Err(Error::Config(format!("integrated gradients needs at least 2 steps, got {steps}")));
    }
    if x.len() != baseline.len() {
        return Err(Error::Dimension(format!(
            "input has {} entries, baseline {}",
            x.len(),
            baseline.len()
        )));
    }
    let points: Vec<Vec<f64>> = (0..steps)
        .map(|k| {
            let a = (k as f64 + 0.5) / steps as f64;
            baseline.iter().zip(x).map(|(b, v)| b + a * (v - b)).collect()
        })
        .collect();
    let grads = grad(&points)?;
    let mut avg = vec![0.0; x.len()];
    for g in &grads {
        avg.iter_mut().zip(g).for_each(|(s, v)| *s += v);
    }
    Ok(avg
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(g, (v, b))| g / steps as f64 * (v - b))
        .collect())
}

/// True-class probability per row of `x` on the tape.
fn true_class_prob(tape: &mut Tape, head: HeadKind, out: Var, classes: &[usize]) -> Result<Var> {
    let k = tape.shape(out)[1];
    let mut onehot = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        onehot[i * k + c] = 1.0;
    }
    let y = tape.constant(Tensor::new(vec![classes.len(), k], onehot)?);
    let probs = match head {
        HeadKind::Evidential => {
            let alpha = tape.add_scalar(out, 1.0)?;
            let s = tape.row_sum(alpha)?;
            let picked = tape.mul(alpha, y)?;
            let a_y = tape.row_sum(picked)?;
            return Ok(tape.div(a_y, s)?);
        }
        HeadKind::Softmax => tape.softmax(out)?,
    };
    let picked = tape.mul(probs, y)?;
    Ok(tape.row_sum(picked)?)
}

/// Eval-mode true-class probabilities and their input gradients for a
/// batch of flat `8×246` inputs.
fn prob_and_grad(
    net: &Network,
    params: &NetworkParams,
    feats: [&[f64]; 3],
    rows: &[Vec<f64>],
    classes: &[usize],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut eb = Binding::new(&params.extractor, false);
    let mut cb = Binding::new(&params.classifier, false);
    let x = tape.leaf(Tensor::new(vec![rows.len(), TEMPLATES, MAX_REGIONS], rows.concat())?, true);
    let mut rng = stream(0, "importance");
    let f = net.extractor.forward(&mut tape, &mut eb, x, Mode::Eval, &mut rng)?.out;
    let f_cat = concat_features(&mut tape, f, feats)?;
    let out = net.classifier.forward(&mut tape, &mut cb, f_cat, Mode::Eval, &mut rng)?;
    let p = true_class_prob(&mut tape, net.classifier.head(), out, classes)?;
    let probs = tape.value(p).values().to_vec();
    // rows are independent in eval mode, so the gradient of the sum
    // separates per row
    let total = tape.sum(p)?;
    tape.backward(total)?;
    let g = tape
        .grad(x)
        .ok_or_else(|| Error::State("no gradient reached the input".into()))?;
    Ok((probs, g.values().chunks(CELLS).map(<[f64]>::to_vec).collect()))
}

/// IG attributions for one example on its true-class probability.
pub fn sample_attributions(
    net: &Network,
    params: &NetworkParams,
    feats: [&[f64]; 3],
    example: &Example,
    steps: usize,
    baseline: &[f64],
) -> Result<Vec<f64>> {
    let classes = vec![example.y; steps];
    integrated_gradients_path(example.roi.values(), baseline, steps, |pts| {
        Ok(prob_and_grad(net, params, feats, pts, &classes)?.1)
    })
}

/// `(Σ attributions, F(x) − F(baseline))` for one example.
pub fn completeness(
    net: &Network,
    params: &NetworkParams,
    feats: [&[f64]; 3],
    example: &Example,
    steps: usize,
    baseline: &[f64],
) -> Result<(f64, f64)> {
    let attr = sample_attributions(net, params, feats, example, steps, baseline)?;
    let (p, _) = prob_and_grad(
        net,
        params,
        feats,
        &[example.roi.values().to_vec(), baseline.to_vec()],
        &[example.y, example.y],
    )?;
    Ok((attr.iter().sum(), p[0] - p[1]))
}

fn max_normalize(v: &mut [f64]) {
    let m = v.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

/// Mean absolute IG attribution per cell over `examples`, max-normalized.
/// Padded cells score 0.
pub fn integrated_gradients(
    net: &Network,
    params: &NetworkParams,
    feats: [&[f64]; 3],
    examples: &[Example],
    steps: usize,
    baseline: &[f64],
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Data("importance over an empty split".into()));
    }
    if baseline.len() != CELLS {
        return Err(Error::Dimension(format!("baseline must have {CELLS} entries")));
    }
    let mut acc = vec![0.0; CELLS];
    for e in examples {
        let attr = sample_attributions(net, params, feats, e, steps, baseline)?;
        acc.iter_mut().zip(&attr).for_each(|(s, a)| *s += a.abs());
    }
    let n = examples.len() as f64;
    for (i, s) in acc.iter_mut().enumerate() {
        *s = if examples[0].roi.is_valid_cell(i / MAX_REGIONS, i % MAX_REGIONS) {
            *s / n
        } else {
            0.0
        };
    }
    max_normalize(&mut acc);
    Ok(acc)
}

fn mean_true_prob(net: &Network, params: &NetworkParams, feats: [&[f64]; 3], examples: &[Example]) -> Result<f64> {
    let mut rng = stream(0, "importance");
    let (_, out) = net.head_output(params, &batch_tensor(examples), feats, Mode::Eval, &mut rng)?;
    let k = out.shape()[1];
    let head = net.classifier.head();
    let total: f64 = out
        .values()
        .chunks(k)
        .zip(examples)
        .map(|(row, e)| crate::model::head_probs(head, row)[e.y])
        .sum();
    Ok(total / examples.len() as f64)
}

/// Mean drop in true-class probability when each valid cell is zeroed
/// across `examples`; clamped at zero and max-normalized. Padded cells
/// score exactly 0.
pub fn occlusion_importance(
    net: &Network,
    params: &NetworkParams,
    feats: [&[f64]; 3],
    examples: &[Example],
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Data("importance over an empty split".into()));
    }
    let base = mean_true_prob(net, params, feats, examples)?;
    let mut scores = vec![0.0; CELLS];
    let mut occluded = examples.to_vec();
    for t in 0..TEMPLATES {
        for r in 0..MAX_REGIONS {
            if !examples[0].roi.is_valid_cell(t, r) {
                continue;
            }
            let i = t * MAX_REGIONS + r;
            for o in occluded.iter_mut() {
                o.roi.set_cell(t, r, 0.0);
            }
            scores[i] = (base - mean_true_prob(net, params, feats, &occluded)?).max(0.0);
            for (o, e) in occluded.iter_mut().zip(examples) {
                o.roi.set_cell(t, r, e.roi.values()[i]);
            }
        }
    }
    max_normalize(&mut scores);
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    pub template: usize,
    pub template_name: String,
    pub region: usize,
    pub ig: f64,
    pub occ: f64,
    pub joint: f64,
    pub flagged: bool,
}

/// `(IG + OCC)/2` per cell, sorted descending (ties by cell index).
/// `cells` lists the `(template, region)` of each score entry.
pub fn joint_importance(ig: &[f64], occ: &[f64], cells: &[(usize, usize)]) -> Result<Vec<JointEntry>> {
    if ig.len() != occ.len() || ig.len() != cells.len() {
        return Err(Error::Dimension(format!(
            "importance vectors of length {} and {} for {} cells",
            ig.len(),
            occ.len(),
            cells.len()
        )));
    }
    if let Some(v) = ig.iter().chain(occ).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("importance score {v} is not normalized to [0, 1]")));
    }
    let mut order: Vec<usize> = (0..ig.len()).collect();
    let joint: Vec<f64> = ig.iter().zip(occ).map(|(a, b)| (a + b) / 2.0).collect();
    order.sort_by(|&a, &b| joint[b].total_cmp(&joint[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .map(|i| {
            let (t, r) = cells[i];
            JointEntry {
                template: t,
                template_name: TEMPLATE_NAMES.get(t).map_or_else(|| format!("T{t}"), |s| s.to_string()),
                region: r,
                ig: ig[i],
                occ: occ[i],
                joint: joint[i],
                flagged: joint[i] > JOINT_FLAG,
            }
        })
        .collect())
}

/// Joint ranking restricted to the cells valid for `template_lengths`.
pub fn rank_valid_cells(ig: &[f64], occ: &[f64], template_lengths: &[usize; TEMPLATES]) -> Result<Vec<JointEntry>> {
    if ig.len() != CELLS || occ.len() != CELLS {
        return Err(Error::Dimension(format!("cell scores must have {CELLS} entries")));
    }
    let cells: Vec<(usize, usize)> = (0..TEMPLATES)
        .flat_map(|t| (0..template_lengths[t]).map(move |r| (t, r)))
        .collect();
    let pick = |v: &[f64]| cells.iter().map(|&(t, r)| v[t * MAX_REGIONS + r]).collect::<Vec<_>>();
    joint_importance(&pick(ig), &pick(occ), &cells)
}

pub fn write_importance_csv<W: std::io::Write>(writer: W, entries: &[JointEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "template", "template_name", "region", "ig", "occ", "joint", "flagged"])?;
    for (rank, e) in entries.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            e.template.to_string(),
            e.template_name.clone(),
            e.region.to_string(),
            e.ig.to_string(),
            e.occ.to_string(),
            e.joint.to_string(),
            e.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_model_ig_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for steps in [2, 7, 50] {
            let ig = integrated_gradients_path(&x, &b, steps, |pts| Ok(vec![w.clone(); pts.len()])).unwrap();
            for i in 0..n {
                assert!((ig[i] - w[i] * (x[i] - b[i])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn quadratic_completeness_with_midpoint_rule() {
        // f(x) = Σ x_i², grad 2x; midpoint rule is exact for linear gradients
        let x = vec![0.5, -1.5, 2.0];
        let b = vec![0.0; 3];
        let ig = integrated_gradients_path(&x, &b, 4, |pts| {
            Ok(pts.iter().map(|p| p.iter().map(|v| 2.0 * v).collect()).collect())
        })
        .unwrap();
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        assert!((ig.iter().sum::<f64>() - (f(&x) - f(&b))).abs() < 1e-12);
    }

    #[test]
    fn constant_model_attributes_nothing() {
        let ig = integrated_gradients_path(&[1.0, 2.0], &[0.0, 0.0], 10, |pts| Ok(vec![vec![0.0; 2]; pts.len()])).unwrap();
        assert_eq!(ig, vec![0.0, 0.0]);
    }

    #[test]
    fn too_few_steps_is_a_config_error() {
        assert!(matches!(
            integrated_gradients_path(&[1.0], &[0.0], 1, |p| Ok(vec![vec![0.0]; p.len()])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn joint_examples_and_flags() {
        let cells = vec![(0, 0), (0, 1), (1, 0)];
        let j = joint_importance(&[1.0, 0.4, 0.0], &[1.0, 0.4, 0.2], &cells).unwrap();
        assert_eq!(j[0].joint, 1.0);
        assert!(j[0].flagged);
        assert!((j[1].joint - 0.4).abs() < 1e-15);
        assert!(!j[1].flagged);
        assert_eq!((j[2].template, j[2].region), (1, 0));
        assert!(joint_importance(&[0.1], &[0.1, 0.2], &cells).is_err());
        assert!(joint_importance(&[1.5, 0.0, 0.0], &[0.0; 3], &cells).is_err());
    }

    #[test]
    fn joint_is_symmetric_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let cells: Vec<(usize, usize)> = (0..n).map(|i| (i / 100, i % 100)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let ab = joint_importance(&a, &b, &cells).unwrap();
        let ba = joint_importance(&b, &a, &cells).unwrap();
        let key = |v: &[JointEntry]| v.iter().map(|e| (e.template, e.region, e.joint)).collect::<Vec<_>>();
        assert_eq!(key(&ab), key(&ba));
        let mut brute: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        brute.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(ab.iter().map(|e| e.joint).collect::<Vec<_>>(), brute);
    }
}
