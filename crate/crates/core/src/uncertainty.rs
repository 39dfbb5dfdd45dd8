//! Monte Carlo dropout sampling and domain-level style statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, Example};
use crate::error::{config, Error, Result};
use crate::model::{head_probs, DirichletOutput, HeadKind, Mode, Network, NetworkParams};

pub const DEFAULT_MC_PASSES: usize = 10;

/// Aggregate style statistics a site publishes. Holds no per-sample data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    /// Mean Dirichlet uncertainty over the site's samples; absent for a
    /// softmax head.
    pub site_uncertainty: Option<f64>,
    pub n_samples: usize,
}

impl DomainStyle {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.var.len() {
            return Err(Error::Dimension(format!(
                "style mean has {} entries, variance {}",
                self.mu.len(),
                self.var.len()
            )));
        }
        if let Some(v) = self.var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Numeric(format!("negative or NaN style variance {v}")));
        }
        if self.n_samples == 0 {
            return Err(Error::Data("style built from zero samples".into()));
        }
        Ok(())
    }
}

/// Elementwise mean and population variance over sample feature vectors.
pub fn domain_style_stats<V: AsRef<[f64]>>(features: &[V]) -> Result<DomainStyle> {
    let first = features
        .first()
        .ok_or_else(|| Error::Data("domain statistics need at least one feature vector".into()))?;
    let w = first.as_ref().len();
    let n = features.len() as f64;
    let mut mu = vec![0.0; w];
    for f in features {
        let f = f.as_ref();
        if f.len() != w {
            return Err(Error::Dimension(format!("feature length {} differs from {w}", f.len())));
        }
        mu.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; w];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f.as_ref()).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok(DomainStyle {
        mu,
        var,
        site_uncertainty: None,
        n_samples: features.len(),
    })
}

/// Moments of the union of several sites' samples, weighted by sample
/// counts. Site uncertainties are dropped.
pub fn pool_styles(styles: &[&DomainStyle]) -> Result<DomainStyle> {
    let first = styles
        .first()
        .ok_or_else(|| Error::Data("pooling needs at least one style".into()))?;
    let w = first.dim();
    let total: usize = styles.iter().map(|s| s.n_samples).sum();
    if total == 0 || styles.iter().any(|s| s.dim() != w) {
        return Err(Error::Dimension("pooled styles must share a dimension and hold samples".into()));
    }
    let mut mu = vec![0.0; w];
    let mut second = vec![0.0; w];
    for s in styles {
        let share = s.n_samples as f64 / total as f64;
        for i in 0..w {
            mu[i] += share * s.mu[i];
            second[i] += share * (s.var[i] + s.mu[i] * s.mu[i]);
        }
    }
    let var = second.iter().zip(&mu).map(|(q, m)| (q - m * m).max(0.0)).collect();
    Ok(DomainStyle {
        mu,
        var,
        site_uncertainty: None,
        n_samples: total,
    })
}

/// Per-sample mean and population variance of the style feature over
/// `passes` dropout-active forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct McFeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_passes(passes: usize) -> Result<()> {
    if passes < 2 {
        return Err(config(format!("MC passes = {passes}; need at least 2 for a variance")));
    }
    Ok(())
}

/// Welford accumulator of per-element mean and variance across passes.
struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn add(&mut self, values: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, q), v) in self.mean.iter_mut().zip(&mut self.m2).zip(values) {
            let delta = v - *m;
            *m += delta / k;
            *q += delta * (v - *m);
        }
    }

    /// Mean and population variance.
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let k = self.count as f64;
        let var = self.m2.into_iter().map(|q| (q / k).max(0.0)).collect();
        (self.mean, var)
    }
}

/// MC feature statistics for each sample of a batch.
pub fn mc_feature_stats<R: Rng + ?Sized>(
    net: &Network,
    params: &NetworkParams,
    examples: &[&Example],
    passes: usize,
    rng: &mut R,
) -> Result<Vec<McFeatureStats>> {
    check_passes(passes)?;
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let x = batch_tensor(examples.iter().copied());
    let w = net.config().style_dim();
    let mut m = Moments::new(examples.len() * w);
    for _ in 0..passes {
        let z = net.style_features(params, &x, Mode::McDropout, rng)?;
        m.add(z.values());
    }
    let (mean, var) = m.finish();
    Ok(mean
        .chunks(w)
        .zip(var.chunks(w))
        .map(|(m, v)| McFeatureStats {
            mean: m.to_vec(),
            var: v.to_vec(),
        })
        .collect())
}

/// One MC sweep over a site: stable per-sample features plus MC-averaged
/// classifier output (evidence for the evidential head, probabilities for
/// the softmax head).
#[derive(Debug, Clone)]
pub struct McSweep {
    pub head: HeadKind,
    pub features: Vec<Vec<f64>>,
    pub feature_var: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// Runs `passes` dropout-active passes over `examples` in batches.
pub fn mc_sweep<R: Rng + ?Sized>(
    net: &Network,
    params: &NetworkParams,
    examples: &[Example],
    feats: [&[f64]; 3],
    passes: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<McSweep> {
    check_passes(passes)?;
    if examples.is_empty() {
        return Err(Error::Data("MC sweep over an empty site".into()));
    }
    let head = net.classifier.head();
    let w = net.config().style_dim();
    let k = net.config().classes;
    let mut sweep = McSweep {
        head,
        features: Vec::with_capacity(examples.len()),
        feature_var: Vec::with_capacity(examples.len()),
        outputs: Vec::with_capacity(examples.len()),
    };
    for chunk in examples.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk);
        let mut fm = Moments::new(chunk.len() * w);
        let mut out_sum = vec![0.0; chunk.len() * k];
        for _ in 0..passes {
            let (f, out) = net.head_output(params, &x, feats, Mode::McDropout, rng)?;
            fm.add(f.values());
            for (row_sum, row) in out_sum.chunks_mut(k).zip(out.values().chunks(k)) {
                let contrib = match head {
                    HeadKind::Evidential => row.to_vec(),
                    HeadKind::Softmax => head_probs(head, row),
                };
                row_sum.iter_mut().zip(contrib).for_each(|(s, v)| *s += v);
            }
        }
        let (mean, var) = fm.finish();
        sweep.features.extend(mean.chunks(w).map(<[f64]>::to_vec));
        sweep.feature_var.extend(var.chunks(w).map(<[f64]>::to_vec));
        sweep
            .outputs
            .extend(out_sum.chunks(k).map(|r| r.iter().map(|v| v / passes as f64).collect()));
    }
    Ok(sweep)
}

impl McSweep {
    /// Per-sample Dirichlet outputs; `None` for a softmax head.
    pub fn dirichlet(&self) -> Option<Result<Vec<DirichletOutput>>> {
        match self.head {
            HeadKind::Evidential => Some(self.outputs.iter().map(|e| DirichletOutput::from_evidence(e)).collect()),
            HeadKind::Softmax => None,
        }
    }

    /// Class probabilities per sample.
    pub fn probs(&self) -> Vec<Vec<f64>> {
        match self.head {
            HeadKind::Evidential => self.outputs.iter().map(|e| head_probs(self.head, e)).collect(),
            HeadKind::Softmax => self.outputs.clone(),
        }
    }

    pub fn site_uncertainty(&self) -> Option<Result<f64>> {
        self.dirichlet().map(|d| d.and_then(|d| site_uncertainty(&d)))
    }

    /// Mean over samples and dimensions of the MC feature variance.
    pub fn mean_feature_variance(&self) -> f64 {
        let n: usize = self.feature_var.iter().map(Vec::len).sum();
        self.feature_var.iter().flatten().sum::<f64>() / n.max(1) as f64
    }

    /// Domain style with the site uncertainty attached when available.
    pub fn style(&self) -> Result<DomainStyle> {
        let mut style = domain_style_stats(&self.features)?;
        style.site_uncertainty = self.site_uncertainty().transpose()?;
        Ok(style)
    }
}

/// Mean predictive uncertainty `K/S` over a site's samples.
pub fn site_uncertainty(outputs: &[DirichletOutput]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Data("site uncertainty over an empty dataset".into()));
    }
    Ok(outputs.iter().map(|d| d.uncertainty).sum::<f64>() / outputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, RoiMatrix, Site, MAX_REGIONS, TEMPLATES};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn examples(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Example {
                id: format!("s{i}"),
                site: Site::A,
                label: Label::NC,
                y: i % 2,
                roi: RoiMatrix::from_templates(
                    &(0..TEMPLATES)
                        .map(|_| (0..MAX_REGIONS).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect::<Vec<_>>(),
                )
                .unwrap(),
            })
            .collect()
    }

    fn net_with_dropout(p: f64) -> (Network, NetworkParams) {
        let cfg = ModelConfig {
            dropout: p,
            ..Default::default()
        };
        let net = Network::new(&cfg).unwrap();
        let params = net.init(&mut ChaCha8Rng::seed_from_u64(11));
        (net, params)
    }

    #[test]
    fn pooled_style_matches_concatenated_samples() {
        let a: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|i| vec![10.0 - i as f64, 0.3 * i as f64]).collect();
        let all: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
        let pooled = pool_styles(&[&domain_style_stats(&a).unwrap(), &domain_style_stats(&b).unwrap()]).unwrap();
        let direct = domain_style_stats(&all).unwrap();
        assert_eq!(pooled.n_samples, 11);
        for i in 0..2 {
            assert!((pooled.mu[i] - direct.mu[i]).abs() < 1e-12);
            assert!((pooled.var[i] - direct.var[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_style_examples() {
        let s = domain_style_stats(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(s.mu, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.var, vec![0.0; 3]);
        let s = domain_style_stats(&[vec![0.0; 4], vec![2.0; 4]]).unwrap();
        assert_eq!(s.mu, vec![1.0; 4]);
        assert_eq!(s.var, vec![1.0; 4]);
        assert!(domain_style_stats::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn domain_style_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Vec<f64>> = (0..50).map(|_| (0..256).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let s = domain_style_stats(&feats).unwrap();
        for d in 0..256 {
            let col: Vec<f64> = feats.iter().map(|f| f[d]).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 50.0;
            assert!((s.mu[d] - m).abs() < 1e-12);
            assert!((s.var[d] - v).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn domain_style_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..20),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = domain_style_stats(&rows).unwrap();
            let b = domain_style_stats(&shuffled).unwrap();
            for (x, y) in a.mu.iter().zip(&b.mu).chain(a.var.iter().zip(&b.var)) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn mc_without_dropout_has_zero_variance() {
        let (net, params) = net_with_dropout(0.0);
        let ex = examples(3, 1);
        let refs: Vec<&Example> = ex.iter().collect();
        let stats = mc_feature_stats(&net, &params, &refs, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(stats.iter().all(|s| s.var.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn mc_matches_recorded_passes_and_is_reproducible() {
        let (net, params) = net_with_dropout(0.1);
        let ex = examples(2, 2);
        let refs: Vec<&Example> = ex.iter().collect();
        let stats = mc_feature_stats(&net, &params, &refs, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let again = mc_feature_stats(&net, &params, &refs, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(stats, again);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = batch_tensor(refs.iter().copied());
        let passes: Vec<Vec<f64>> = (0..10)
            .map(|_| net.style_features(&params, &x, Mode::McDropout, &mut rng).unwrap().into_values())
            .collect();
        for (i, s) in stats.iter().enumerate() {
            for d in 0..256 {
                let col: Vec<f64> = passes.iter().map(|p| p[i * 256 + d]).collect();
                let m = col.iter().sum::<f64>() / 10.0;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 10.0;
                assert!((s.mean[d] - m).abs() < 1e-12);
                assert!((s.var[d] - v).abs() < 1e-10, "{} vs {v}", s.var[d]);
                assert!(s.var[d] >= 0.0);
            }
        }
        assert!(stats.iter().any(|s| s.var.iter().any(|v| *v > 0.0)));
    }

    #[test]
    fn mc_variance_shrinks_with_dropout_rate() {
        let ex = examples(4, 3);
        let refs: Vec<&Example> = ex.iter().collect();
        let total = |p: f64| -> f64 {
            let (net, params) = net_with_dropout(p);
            mc_feature_stats(&net, &params, &refs, 10, &mut ChaCha8Rng::seed_from_u64(8))
                .unwrap()
                .iter()
                .flat_map(|s| s.var.clone())
                .sum()
        };
        let (v0, v1, v10) = (total(0.0), total(0.01), total(0.1));
        assert_eq!(v0, 0.0);
        assert!(v1 > 0.0 && v1 < v10, "{v1} {v10}");
    }

    #[test]
    fn mc_needs_two_passes() {
        let (net, params) = net_with_dropout(0.1);
        let ex = examples(2, 1);
        let refs: Vec<&Example> = ex.iter().collect();
        assert!(matches!(
            mc_feature_stats(&net, &params, &refs, 1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_classifier_site_uncertainty_is_constant() {
        let (net, mut params) = net_with_dropout(0.1);
        params.classifier.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let ex = examples(5, 4);
        let zero = vec![0.0; 256];
        let sweep = mc_sweep(&net, &params, &ex, [&zero, &zero, &zero], 3, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let expected = 2.0 / (2.0 + 2.0 * std::f64::consts::LN_2);
        let u = sweep.site_uncertainty().unwrap().unwrap();
        assert!((u - expected).abs() < 1e-12);
        let style = sweep.style().unwrap();
        assert_eq!(style.n_samples, 5);
        assert_eq!(style.site_uncertainty, Some(u));
    }

    #[test]
    fn site_uncertainty_is_mean_and_duplication_invariant() {
        let outs: Vec<DirichletOutput> = [[3.0, 1.0], [0.0, 0.0], [10.0, 2.0]]
            .iter()
            .map(|e| DirichletOutput::from_evidence(e).unwrap())
            .collect();
        let u = site_uncertainty(&outs).unwrap();
        let manual = outs.iter().map(|d| d.uncertainty).sum::<f64>() / 3.0;
        assert!((u - manual).abs() < 1e-15);
        assert!(u > 0.0 && u <= 1.0);
        let doubled: Vec<DirichletOutput> = outs.iter().chain(&outs).cloned().collect();
        assert!((site_uncertainty(&doubled).unwrap() - u).abs() < 1e-15);
        assert!(site_uncertainty(&[]).is_err());
    }
}
