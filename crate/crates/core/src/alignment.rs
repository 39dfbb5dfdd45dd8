//! Gaussian KL style alignment and Gaussianity diagnostics.

use fedda_autograd::{Tape, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::DomainStyle;

pub const VAR_FLOOR: f64 = 1e-6;

/// Which closed form scores the per-dimension divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `½[(σs²/σt²)(μt−μs)² + log(σt²/σs²)]`
    Reduced,
    /// `KL(N(μt,σt²) ‖ N(μs,σs²)) = log(σs/σt) + (σt² + (μt−μs)²)/(2σs²) − ½`
    Textbook,
}

/// Per-dimension divergence with variances already floored.
pub fn kl_term(mu_s: f64, var_s: f64, mu_t: f64, var_t: f64, form: KlForm) -> f64 {
    let d2 = (mu_t - mu_s) * (mu_t - mu_s);
    match form {
        KlForm::Reduced => 0.5 * ((var_s / var_t) * d2 + (var_t / var_s).ln()),
        KlForm::Textbook => 0.5 * (var_s / var_t).ln() + (var_t + d2) / (2.0 * var_s) - 0.5,
    }
}

fn check_pair(source: &DomainStyle, target: &DomainStyle) -> Result<()> {
    source.validate()?;
    target.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "style widths differ: {} vs {}",
            source.dim(),
            target.dim()
        )));
    }
    if source.dim() == 0 {
        return Err(Error::Dimension("empty style vectors".into()));
    }
    Ok(())
}

/// Mean over dimensions of the chosen divergence, variances floored at
/// `eps`.
pub fn kl_style_loss(source: &DomainStyle, target: &DomainStyle, eps: f64, form: KlForm) -> Result<f64> {
    check_pair(source, target)?;
    let total: f64 = (0..source.dim())
        .map(|d| {
            kl_term(
                source.mu[d],
                source.var[d].max(eps),
                target.mu[d],
                target.var[d].max(eps),
                form,
            )
        })
        .sum();
    Ok(total / source.dim() as f64)
}

/// Textbook Gaussian KL, always non-negative.
pub fn gaussian_kl_textbook(source: &DomainStyle, target: &DomainStyle, eps: f64) -> Result<f64> {
    kl_style_loss(source, target, eps, KlForm::Textbook)
}

/// Differentiable form over `[W]` mean and variance vectors of both
/// domains. Returns a scalar.
pub fn kl_style_loss_tape(
    tape: &mut Tape,
    mu_s: Var,
    var_s: Var,
    mu_t: Var,
    var_t: Var,
    eps: f64,
    form: KlForm,
) -> Result<Var> {
    let vs = tape.clamp_min(var_s, eps)?;
    let vt = tape.clamp_min(var_t, eps)?;
    let diff = tape.sub(mu_t, mu_s)?;
    let d2 = tape.square(diff)?;
    let log_s = tape.log(vs)?;
    let log_t = tape.log(vt)?;
    let per_dim = match form {
        KlForm::Reduced => {
            let ratio = tape.div(vs, vt)?;
            let mean_term = tape.mul(ratio, d2)?;
            let log_ratio = tape.sub(log_t, log_s)?;
            let sum = tape.add(mean_term, log_ratio)?;
            tape.scale(sum, 0.5)?
        }
        KlForm::Textbook => {
            let log_ratio = tape.sub(log_s, log_t)?;
            let half_log = tape.scale(log_ratio, 0.5)?;
            let num = tape.add(vt, d2)?;
            let two_vs = tape.scale(vs, 2.0)?;
            let frac = tape.div(num, two_vs)?;
            let sum = tape.add(half_log, frac)?;
            tape.add_scalar(sum, -0.5)?
        }
    };
    Ok(tape.mean(per_dim)?)
}

/// Inverse standard normal CDF by Acklam's rational approximation
/// (relative error below 1.2e-9).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqComponent {
    /// 1-based principal component index.
    pub pc: usize,
    pub eigenvalue: f64,
    pub theoretical: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Pearson correlation of the Q-Q pairing.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqReport {
    pub n_samples: usize,
    pub components: Vec<QqComponent>,
}

impl QqReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pc", "theoretical_quantile", "empirical_quantile"])?;
        for c in &self.components {
            for (t, e) in c.theoretical.iter().zip(&c.empirical) {
                w.write_record([c.pc.to_string(), t.to_string(), e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn correlations(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.correlation).collect()
    }
}

pub const QQ_MIN_SAMPLES: usize = 10;

/// Projects features on the leading principal components of their
/// covariance and pairs sorted standardized scores with normal quantiles
/// at `(i − 0.5)/n`.
pub fn qq_diagnostics<V: AsRef<[f64]>>(features: &[V], components: usize) -> Result<QqReport> {
    let n = features.len();
    if n < QQ_MIN_SAMPLES {
        return Err(Error::Data(format!(
            "Q-Q diagnostics need at least {QQ_MIN_SAMPLES} samples, got {n}"
        )));
    }
    let w = features[0].as_ref().len();
    if features.iter().any(|f| f.as_ref().len() != w) {
        return Err(Error::Dimension("feature vectors differ in length".into()));
    }
    if components == 0 || components > w {
        return Err(Error::Config(format!("component count {components} outside 1..={w}")));
    }
    let x = DMatrix::from_fn(n, w, |i, j| features[i].as_ref()[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, w, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let theoretical: Vec<f64> = (1..=n).map(|i| inverse_normal_cdf((i as f64 - 0.5) / n as f64)).collect();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut out = Vec::with_capacity(components);
    for (k, &idx) in order.iter().take(components).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let scores: Vec<f64> = (0..n).map(|i| centered.row(i).dot(&v.transpose())).collect();
        let m = scores.iter().sum::<f64>() / n as f64;
        let sd = (scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / n as f64).sqrt();
        if !(sd > 1e-12 * scale) {
            return Err(Error::Numeric(format!(
                "principal component {} has degenerate variance {sd:e}",
                k + 1
            )));
        }
        let mut empirical: Vec<f64> = scores.iter().map(|s| (s - m) / sd).collect();
        empirical.sort_by(f64::total_cmp);
        let correlation = pearson(&theoretical, &empirical);
        out.push(QqComponent {
            pc: k + 1,
            eigenvalue: eig.eigenvalues[idx],
            theoretical: theoretical.clone(),
            empirical,
            correlation,
        });
    }
    Ok(QqReport {
        n_samples: n,
        components: out,
    })
}
