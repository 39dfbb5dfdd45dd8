//! Messages exchanged between sites and the server, and the weighted
//! parameter reduction.

use serde::{Deserialize, Serialize};

use crate::data::Site;
use crate::error::{Error, Result};
use crate::uncertainty::DomainStyle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Alignment,
    Classification,
}

/// The only payload a site sends: model parameters and aggregate style
/// statistics. No field can carry samples or labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub site: Site,
    pub round: usize,
    pub stage: Stage,
    pub manifest: Vec<(String, Vec<usize>)>,
    pub params: Vec<f64>,
    pub style: DomainStyle,
    pub sample_count: usize,
}

impl RoundMessage {
    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if expected != self.params.len() {
            return Err(Error::Protocol(format!(
                "site {} sent {} parameters for a manifest of {expected}",
                self.site,
                self.params.len()
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::Protocol(format!("site {} reports zero samples", self.site)));
        }
        self.style.validate()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    /// Fixed-width little-endian wire encoding. Its length depends only on
    /// the manifest and the style dimension.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u64 = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        let put_f64s = |out: &mut Vec<u8>, vs: &[f64]| vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.push(self.site.index() as u8);
        out.push(match self.stage {
            Stage::Alignment => 0,
            Stage::Classification => 1,
        });
        put_u64(&mut out, self.round as u64);
        put_u64(&mut out, self.manifest.len() as u64);
        for (name, shape) in &self.manifest {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, shape.len() as u64);
            shape.iter().for_each(|d| put_u64(&mut out, *d as u64));
        }
        put_f64s(&mut out, &self.params);
        put_u64(&mut out, self.style.dim() as u64);
        put_f64s(&mut out, &self.style.mu);
        put_f64s(&mut out, &self.style.var);
        out.push(u8::from(self.style.site_uncertainty.is_some()));
        out.extend_from_slice(&self.style.site_uncertainty.unwrap_or(0.0).to_le_bytes());
        put_u64(&mut out, self.style.n_samples as u64);
        put_u64(&mut out, self.sample_count as u64);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Fedavg,
    Uncertainty,
}

/// Direction of the sigmoid in uncertainty weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidSign {
    /// `σ(−γ(u − τ))`: weight falls as uncertainty rises.
    Corrected,
    /// `σ(γ(u − τ))`: weight rises with uncertainty.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationPolicy {
    pub kind: PolicyKind,
    pub gamma: f64,
    /// Fixed threshold; `None` uses the mean of the round's uncertainties.
    pub tau: Option<f64>,
    pub sign: SigmoidSign,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        AggregationPolicy {
            kind: PolicyKind::Uncertainty,
            gamma: 10.0,
            tau: None,
            sign: SigmoidSign::Corrected,
        }
    }
}

impl AggregationPolicy {
    pub fn fedavg() -> Self {
        AggregationPolicy {
            kind: PolicyKind::Fedavg,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma = {} must be positive", self.gamma)));
        }
        if let Some(t) = self.tau {
            if !t.is_finite() {
                return Err(Error::Config(format!("tau = {t} must be finite")));
            }
        }
        Ok(())
    }
}

/// `w_t = |X_t| / Σ_j |X_j|`.
pub fn fedavg_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Protocol("no sites to weight".into()));
    }
    if counts.contains(&0) {
        return Err(Error::Protocol(format!("zero sample count in {counts:?}")));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// FedAvg weights scaled by a sigmoid of each site's uncertainty, then
/// renormalized.
pub fn uncertainty_weights(counts: &[usize], uncertainties: &[f64], policy: &AggregationPolicy) -> Result<Vec<f64>> {
    policy.validate()?;
    if counts.len() != uncertainties.len() {
        return Err(Error::Protocol(format!(
            "{} counts for {} uncertainties",
            counts.len(),
            uncertainties.len()
        )));
    }
    if let Some(u) = uncertainties.iter().find(|u| !(**u > 0.0 && **u <= 1.0)) {
        return Err(Error::Numeric(format!("site uncertainty {u} outside (0, 1]")));
    }
    let base = fedavg_weights(counts)?;
    if policy.kind == PolicyKind::Fedavg {
        return Ok(base);
    }
    let tau = policy
        .tau
        .unwrap_or_else(|| uncertainties.iter().sum::<f64>() / uncertainties.len() as f64);
    let sign = match policy.sign {
        SigmoidSign::Corrected => -1.0,
        SigmoidSign::Literal => 1.0,
    };
    let raw: Vec<f64> = base
        .iter()
        .zip(uncertainties)
        .map(|(w, u)| w * sigmoid(sign * policy.gamma * (u - tau)))
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!("uncertainty weights underflowed: {raw:?}")));
    }
    Ok(raw.iter().map(|r| r / total).collect())
}

/// Weights for a round's messages under `policy`; sites without an
/// uncertainty fall back to FedAvg.
pub fn message_weights(messages: &[RoundMessage], policy: &AggregationPolicy) -> Result<Vec<f64>> {
    let counts: Vec<usize> = messages.iter().map(|m| m.sample_count).collect();
    let us: Option<Vec<f64>> = messages.iter().map(|m| m.style.site_uncertainty).collect();
    match (policy.kind, us) {
        (PolicyKind::Uncertainty, Some(us)) => uncertainty_weights(&counts, &us, policy),
        _ => fedavg_weights(&counts),
    }
}

/// Like [`message_weights`], but only messages where `adaptive` holds are
/// reweighted by uncertainty; they share the FedAvg mass they jointly hold
/// and every other message keeps its FedAvg weight.
pub fn partial_message_weights(
    messages: &[RoundMessage],
    policy: &AggregationPolicy,
    adaptive: &[bool],
) -> Result<Vec<f64>> {
    if adaptive.len() != messages.len() {
        return Err(Error::Protocol(format!(
            "{} adaptive flags for {} messages",
            adaptive.len(),
            messages.len()
        )));
    }
    let counts: Vec<usize> = messages.iter().map(|m| m.sample_count).collect();
    let mut w = fedavg_weights(&counts)?;
    let idx: Vec<usize> = (0..messages.len()).filter(|&i| adaptive[i]).collect();
    if policy.kind != PolicyKind::Uncertainty || idx.is_empty() {
        return Ok(w);
    }
    let us: Option<Vec<f64>> = idx.iter().map(|&i| messages[i].style.site_uncertainty).collect();
    let Some(us) = us else {
        return Ok(w);
    };
    let sub_counts: Vec<usize> = idx.iter().map(|&i| counts[i]).collect();
    let sub = uncertainty_weights(&sub_counts, &us, policy)?;
    let share: f64 = idx.iter().map(|&i| w[i]).sum();
    for (&i, s) in idx.iter().zip(sub) {
        w[i] = share * s;
    }
    Ok(w)
}

/// `θ_global = Σ_t w_t θ_t`.
pub fn aggregate(messages: &[RoundMessage], weights: &[f64]) -> Result<Vec<f64>> {
    let first = messages
        .first()
        .ok_or_else(|| Error::Protocol("no messages to aggregate".into()))?;
    if weights.len() != messages.len() {
        return Err(Error::Protocol(format!(
            "{} weights for {} messages",
            weights.len(),
            messages.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Protocol(format!("weights sum to {sum}, expected 1")));
    }
    for m in messages {
        m.validate()?;
        if m.manifest != first.manifest {
            return Err(Error::Protocol(format!(
                "site {} parameter manifest differs from site {}",
                m.site, first.site
            )));
        }
    }
    let mut out = vec![0.0; first.params.len()];
    for (m, w) in messages.iter().zip(weights) {
        for (o, p) in out.iter_mut().zip(&m.params) {
            *o += w * p;
        }
    }
    Ok(out)
}
