//! Two-stage federated training: style alignment of the extractor, then
//! classification with uncertainty-weighted aggregation.

pub mod losses;
pub mod protocol;

use fedda_autograd::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{kl_style_loss, kl_style_loss_tape, KlForm, VAR_FLOOR};
use crate::data::{batch_tensor, batches, Example, Site};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, predict_eval, MetricsReport};
use crate::model::{apply_bn_updates, concat_features, DirichletAudit, HeadKind, Mode, Network, NetworkParams};
use crate::params::Binding;
use crate::rng::{stream, StreamRng};
use crate::uncertainty::{mc_sweep, pool_styles, DomainStyle, McSweep};

pub use losses::LossSet;
pub use protocol::{AggregationPolicy, PolicyKind, RoundMessage, SigmoidSign, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub alignment_rounds: usize,
    pub classification_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_passes: usize,
    /// Cap on the training samples used for MC sweeps; `None` uses all.
    pub sweep_limit: Option<usize>,
    pub kl_form: KlForm,
    pub kl_weight: f64,
    pub var_floor: f64,
    pub losses: LossSet,
    /// Style alignment and concatenated domain features.
    pub alignment: bool,
    pub policy: AggregationPolicy,
    /// Lets the target site train on its own labels.
    pub target_labeled: bool,
    /// An unlabeled target updates its extractor toward the pooled source
    /// style and contributes it to aggregation.
    pub target_alignment: bool,
    /// Eval-mode metrics every this many rounds; 0 disables.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            alignment_rounds: 25,
            classification_rounds: 100,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-4,
            mc_passes: crate::uncertainty::DEFAULT_MC_PASSES,
            sweep_limit: None,
            kl_form: KlForm::Reduced,
            kl_weight: 1.0,
            var_floor: VAR_FLOOR,
            losses: LossSet::default(),
            alignment: true,
            policy: AggregationPolicy::default(),
            target_labeled: false,
            target_alignment: false,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        self.policy.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be at least 2", self.batch_size)));
        }
        if self.mc_passes < 2 {
            return Err(Error::Config(format!("mc_passes {} must be at least 2", self.mc_passes)));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.var_floor > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("var_floor must be positive and kl_weight non-negative".into()));
        }
        if self.sweep_limit.is_some_and(|n| n < 2) {
            return Err(Error::Config("sweep_limit must be at least 2".into()));
        }
        Ok(())
    }

    /// The style KL term participates only with alignment on and KL in the
    /// loss set.
    pub fn kl_active(&self) -> bool {
        self.alignment && self.losses.kl
    }
}

/// Per-site train and test splits.
#[derive(Debug, Clone)]
pub struct SiteData {
    pub site: Site,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Losses averaged over a local epoch's batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRound {
    pub site: Site,
    /// Aggregation weight, for sites that sent parameters.
    pub weight: Option<f64>,
    pub uncertainty: Option<f64>,
    pub feature_variance: f64,
    pub losses: Option<EpochLosses>,
    /// Style divergence from the target, for source sites.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_kl: Option<f64>,
    pub message_bytes: Option<usize>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub stage: Stage,
    pub round: usize,
    pub policy: PolicyKind,
    pub sites: Vec<SiteRound>,
}

struct Client {
    site: Site,
    trains: bool,
    train: Vec<Example>,
    test: Vec<Example>,
    sweep_set: Vec<Example>,
    params: NetworkParams,
    rng: StreamRng,
    mu_prev: Option<Vec<f64>>,
}

/// What a client reports after its local step.
struct LocalReport {
    sweep: McSweep,
    losses: Option<EpochLosses>,
    audit: DirichletAudit,
}

fn adam_config(cfg: &FederationConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    }
}

fn style_consts(tape: &mut Tape, style: &DomainStyle) -> Result<(fedda_autograd::Var, fedda_autograd::Var)> {
    let mu = tape.constant(Tensor::from_vec(style.mu.clone())?);
    let var = tape.constant(Tensor::from_vec(style.var.clone())?);
    Ok((mu, var))
}

/// Style divergence of a batch from `target`, measured the way site styles
/// are: running batch-norm statistics with dropout active.
fn style_kl_tape(
    tape: &mut Tape,
    bind: &mut Binding,
    net: &Network,
    x: fedda_autograd::Var,
    target: &DomainStyle,
    cfg: &FederationConfig,
    rng: &mut StreamRng,
) -> Result<fedda_autograd::Var> {
    let z = net.extractor.forward(tape, bind, x, Mode::McDropout, rng)?.out;
    let mu = tape.col_mean(z)?;
    let var = tape.col_var(z)?;
    let (mu_t, var_t) = style_consts(tape, target)?;
    kl_style_loss_tape(tape, mu, var, mu_t, var_t, cfg.var_floor, cfg.kl_form)
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Client {
    fn sweep(&mut self, net: &Network, feats: [&[f64]; 3], cfg: &FederationConfig) -> Result<McSweep> {
        mc_sweep(
            net,
            &self.params,
            &self.sweep_set,
            feats,
            cfg.mc_passes,
            cfg.batch_size,
            &mut self.rng,
        )
    }

    /// One pass of extractor updates pulling batch style toward `target`.
    fn alignment_epoch(&mut self, net: &Network, target: &DomainStyle, cfg: &FederationConfig) -> Result<f64> {
        let adam = adam_config(cfg);
        let mut state = AdamState::new(self.params.extractor.values().len());
        let mut kls = Vec::new();
        for _ in 0..cfg.local_epochs {
            for idx in batches(self.train.len(), cfg.batch_size, &mut self.rng)? {
                let mut tape = Tape::new();
                let mut bind = Binding::new(&self.params.extractor, true);
                let x = tape.constant(batch_tensor(idx.iter().map(|&i| &self.train[i])));
                let kl = style_kl_tape(&mut tape, &mut bind, net, x, target, cfg, &mut self.rng)?;
                kls.push(tape.value(kl).item()?);
                tape.backward(kl)?;
                let grads = bind.gradients(&tape);
                adam_step(self.params.extractor.values_mut(), &grads, &mut state, &adam)?;
            }
        }
        mean_of(&kls).ok_or_else(|| Error::Data(format!("site {} has no training batches", self.site)))
    }

    /// One pass of joint extractor and classifier updates.
    fn classification_epoch(
        &mut self,
        net: &Network,
        feats: [&[f64]; 3],
        target: Option<&DomainStyle>,
        cfg: &FederationConfig,
        audit: &mut DirichletAudit,
    ) -> Result<EpochLosses> {
        let adam = adam_config(cfg);
        let mut ext_state = AdamState::new(self.params.extractor.values().len());
        let mut cls_state = AdamState::new(self.params.classifier.values().len());
        let head = net.classifier.head();
        let w = net.config().style_dim();
        let (mut kls, mut cls_terms, mut mses, mut totals) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut mu_sum = vec![0.0; w];
        let mut mu_count = 0usize;
        for _ in 0..cfg.local_epochs {
            for idx in batches(self.train.len(), cfg.batch_size, &mut self.rng)? {
                let mut tape = Tape::new();
                let mut ebind = Binding::new(&self.params.extractor, true);
                let mut cbind = Binding::new(&self.params.classifier, true);
                let x = tape.constant(batch_tensor(idx.iter().map(|&i| &self.train[i])));
                let labels: Vec<usize> = idx.iter().map(|&i| self.train[i].y).collect();
                let fwd = net.extractor.forward(&mut tape, &mut ebind, x, Mode::Train, &mut self.rng)?;
                let f = fwd.out;
                let f_cat = concat_features(&mut tape, f, feats)?;
                let out = net.classifier.forward(&mut tape, &mut cbind, f_cat, Mode::Train, &mut self.rng)?;
                if head == HeadKind::Evidential {
                    audit.check_batch(tape.value(out));
                }
                let mu = tape.col_mean(f)?;
                for (s, v) in mu_sum.iter_mut().zip(tape.value(mu).values()) {
                    *s += v * idx.len() as f64;
                }
                mu_count += idx.len();

                let mut half_terms = Vec::new();
                if cfg.losses.uce {
                    let term = match head {
                        HeadKind::Evidential => losses::uce_tape(&mut tape, out, &labels)?,
                        HeadKind::Softmax => losses::cross_entropy_tape(&mut tape, out, &labels)?,
                    };
                    cls_terms.push(tape.value(term).item()?);
                    half_terms.push(term);
                }
                if cfg.losses.mse {
                    let term = losses::mse_tape(&mut tape, mu, self.mu_prev.as_deref())?;
                    mses.push(tape.value(term).item()?);
                    half_terms.push(term);
                }
                let mut total = None;
                for t in half_terms {
                    total = Some(match total {
                        None => t,
                        Some(acc) => tape.add(acc, t)?,
                    });
                }
                let mut total = match total {
                    Some(t) => Some(tape.scale(t, 0.5)?),
                    None => None,
                };
                if let (true, Some(target)) = (cfg.kl_active(), target) {
                    let var = tape.col_var(f)?;
                    let (mu_t, var_t) = style_consts(&mut tape, target)?;
                    let kl = kl_style_loss_tape(&mut tape, mu, var, mu_t, var_t, cfg.var_floor, cfg.kl_form)?;
                    kls.push(tape.value(kl).item()?);
                    let weighted = tape.scale(kl, cfg.kl_weight)?;
                    total = Some(match total {
                        None => weighted,
                        Some(acc) => tape.add(acc, weighted)?,
                    });
                }
                let Some(total) = total else {
                    continue;
                };
                totals.push(tape.value(total).item()?);
                tape.backward(total)?;
                let eg = ebind.gradients(&tape);
                let cg = cbind.gradients(&tape);
                adam_step(self.params.extractor.values_mut(), &eg, &mut ext_state, &adam)?;
                adam_step(self.params.classifier.values_mut(), &cg, &mut cls_state, &adam)?;
                apply_bn_updates(&mut self.params.extractor, &fwd.bn_updates);
            }
        }
        if mu_count > 0 {
            self.mu_prev = Some(mu_sum.into_iter().map(|s| s / mu_count as f64).collect());
        }
        let (uce, ce) = match head {
            HeadKind::Evidential => (mean_of(&cls_terms), None),
            HeadKind::Softmax => (None, mean_of(&cls_terms)),
        };
        Ok(EpochLosses {
            kl: mean_of(&kls),
            uce,
            ce,
            mse: mean_of(&mses),
            total: mean_of(&totals).unwrap_or(0.0),
        })
    }

    fn message(&self, round: usize, stage: Stage, style: DomainStyle) -> RoundMessage {
        let (manifest, params) = match stage {
            Stage::Alignment => (
                self.params.extractor.layout().manifest(),
                self.params.extractor.values().to_vec(),
            ),
            Stage::Classification => (self.params.manifest(), self.params.flatten()),
        };
        RoundMessage {
            site: self.site,
            round,
            stage,
            manifest,
            params,
            style,
            sample_count: self.train.len(),
        }
    }
}

/// Everything produced by a completed federation.
#[derive(Debug, Clone)]
pub struct Trained {
    pub global: NetworkParams,
    /// Domain mean style vectors for A, B and C (zeros without alignment).
    pub feats: [Vec<f64>; 3],
    pub log: Vec<RoundRecord>,
    pub audit: DirichletAudit,
}

/// Server plus the three simulated sites.
pub struct Federation<'a> {
    net: &'a Network,
    cfg: FederationConfig,
    parallel: bool,
    clients: Vec<Client>,
    global: NetworkParams,
    feats: Option<[Vec<f64>; 3]>,
    log: Vec<RoundRecord>,
    audit: DirichletAudit,
}

fn run_clients<T, F>(clients: &mut [Client], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut Client) -> Result<T> + Sync + Send,
{
    if parallel {
        clients.par_iter_mut().map(f).collect()
    } else {
        clients.iter_mut().map(f).collect()
    }
}

impl<'a> Federation<'a> {
    /// Sites must be given in A, B, C order. C is the target.
    pub fn new(net: &'a Network, cfg: FederationConfig, sites: Vec<SiteData>, seed: u64, parallel: bool) -> Result<Self> {
        cfg.validate()?;
        if sites.iter().map(|s| s.site).collect::<Vec<_>>() != Site::ALL {
            return Err(Error::Config("federation needs sites A, B and C in order".into()));
        }
        let global = net.init(&mut stream(seed, "init"));
        let clients = sites
            .into_iter()
            .map(|s| {
                if s.train.len() < 2 || s.test.is_empty() {
                    return Err(Error::Data(format!(
                        "site {} needs at least 2 training and 1 test sample",
                        s.site
                    )));
                }
                let mut sweep_set = s.train.clone();
                if let Some(limit) = cfg.sweep_limit.filter(|&n| n < sweep_set.len()) {
                    sweep_set.shuffle(&mut stream(seed, &format!("sweep/{}", s.site)));
                    sweep_set.truncate(limit);
                }
                Ok(Client {
                    site: s.site,
                    trains: s.site != Site::C || cfg.target_labeled,
                    train: s.train,
                    test: s.test,
                    sweep_set,
                    params: global.clone(),
                    rng: stream(seed, &format!("client/{}", s.site)),
                    mu_prev: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            net,
            cfg,
            parallel,
            clients,
            global,
            feats: None,
            log: Vec::new(),
            audit: DirichletAudit::default(),
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn global(&self) -> &NetworkParams {
        &self.global
    }

    pub fn log(&self) -> &[RoundRecord] {
        &self.log
    }

    pub fn audit(&self) -> DirichletAudit {
        self.audit
    }

    fn broadcast(&mut self) {
        for c in &mut self.clients {
            c.params = self.global.clone();
        }
    }

    fn zero_feats(&self) -> [Vec<f64>; 3] {
        let w = self.net.config().style_dim();
        [vec![0.0; w], vec![0.0; w], vec![0.0; w]]
    }

    /// Runs the alignment stage (skipped when alignment is off or KL is not
    /// in the loss set) and freezes the domain style vectors.
    pub fn run_alignment(&mut self) -> Result<()> {
        if self.feats.is_some() {
            return Err(Error::State("alignment stage already completed".into()));
        }
        if !self.cfg.kl_active() {
            self.feats = Some(self.zero_feats());
            return Ok(());
        }
        let zeros = self.zero_feats();
        let zf = [zeros[0].as_slice(), zeros[1].as_slice(), zeros[2].as_slice()];
        for round in 0..self.cfg.alignment_rounds {
            self.broadcast();
            let (net, cfg) = (self.net, &self.cfg);
            let sweeps = run_clients(&mut self.clients, self.parallel, |c| c.sweep(net, zf, cfg))?;
            let styles = sweeps.iter().map(McSweep::style).collect::<Result<Vec<_>>>()?;
            let target = &styles[Site::C.index()];
            let source_pool = pool_styles(&[&styles[Site::A.index()], &styles[Site::B.index()]])?;
            let source_pool = &source_pool;
            // sources pull toward the target style, the target toward the
            // pooled source style
            let kls = run_clients(&mut self.clients, self.parallel, |c| {
                if c.site == Site::C && !cfg.target_alignment {
                    return Ok(None);
                }
                let goal = if c.site == Site::C { source_pool } else { target };
                c.alignment_epoch(net, goal, cfg).map(Some)
            })?;
            let mut messages = Vec::new();
            let mut sites = Vec::new();
            for ((c, kl), (sweep, style)) in self.clients.iter().zip(kls).zip(sweeps.iter().zip(&styles)) {
                let Some(kl) = kl else {
                    sites.push(SiteRound {
                        site: c.site,
                        weight: None,
                        uncertainty: style.site_uncertainty,
                        feature_variance: sweep.mean_feature_variance(),
                        losses: None,
                        style_kl: None,
                        message_bytes: None,
                        metrics: None,
                    });
                    continue;
                };
                let style_kl = (c.site != Site::C)
                    .then(|| kl_style_loss(style, target, cfg.var_floor, cfg.kl_form))
                    .transpose()?;
                let msg = c.message(round, Stage::Alignment, style.clone());
                sites.push(SiteRound {
                    site: c.site,
                    weight: None,
                    uncertainty: style.site_uncertainty,
                    feature_variance: sweep.mean_feature_variance(),
                    losses: Some(EpochLosses {
                        kl: Some(kl),
                        total: kl,
                        ..EpochLosses::default()
                    }),
                    style_kl,
                    message_bytes: Some(msg.encode().len()),
                    metrics: None,
                });
                messages.push(msg);
            }
            let weights = protocol::message_weights(&messages, &self.cfg.policy)?;
            let merged = protocol::aggregate(&messages, &weights)?;
            self.global.extractor.set_values(&merged)?;
            for (m, w) in messages.iter().zip(&weights) {
                sites[m.site.index()].weight = Some(*w);
            }
            self.log.push(RoundRecord {
                stage: Stage::Alignment,
                round,
                policy: self.cfg.policy.kind,
                sites,
            });
        }
        self.freeze_feats()
    }

    /// Final sweep of every site with the aligned extractor; the mean style
    /// vectors become the frozen concatenated features.
    fn freeze_feats(&mut self) -> Result<()> {
        self.broadcast();
        let zeros = self.zero_feats();
        let zf = [zeros[0].as_slice(), zeros[1].as_slice(), zeros[2].as_slice()];
        let (net, cfg) = (self.net, &self.cfg);
        let styles = run_clients(&mut self.clients, self.parallel, |c| c.sweep(net, zf, cfg)?.style())?;
        let mut it = styles.into_iter().map(|s| s.mu);
        let (a, b, c) = (it.next(), it.next(), it.next());
        self.feats = Some([a.unwrap_or_default(), b.unwrap_or_default(), c.unwrap_or_default()]);
        Ok(())
    }

    /// Runs the classification stage. Requires the alignment stage.
    pub fn run_classification(&mut self) -> Result<()> {
        let feats = self
            .feats
            .clone()
            .ok_or_else(|| Error::State("classification stage requires completed alignment".into()))?;
        let fr = [feats[0].as_slice(), feats[1].as_slice(), feats[2].as_slice()];
        let n_ext = self.global.extractor.values().len();
        for round in 0..self.cfg.classification_rounds {
            self.broadcast();
            let (net, cfg) = (self.net, &self.cfg);
            let target_aligns = cfg.kl_active() && cfg.target_alignment && !cfg.target_labeled;
            let pre = run_clients(&mut self.clients, self.parallel, |c| {
                if c.site == Site::C || target_aligns {
                    c.sweep(net, fr, cfg).map(Some)
                } else {
                    Ok(None)
                }
            })?;
            let target_sweep = pre[Site::C.index()].clone().expect("target always sweeps");
            let target = target_sweep.style()?;
            let source_pool = if target_aligns {
                let a = pre[Site::A.index()].as_ref().expect("sweep").style()?;
                let b = pre[Site::B.index()].as_ref().expect("sweep").style()?;
                Some(pool_styles(&[&a, &b])?)
            } else {
                None
            };
            let (target_ref, pool_ref) = (&target, source_pool.as_ref());
            let reports = run_clients(&mut self.clients, self.parallel, |c| {
                let mut audit = DirichletAudit::default();
                if c.trains {
                    let kl_target = (c.site != Site::C).then_some(target_ref);
                    let losses = c.classification_epoch(net, fr, kl_target, cfg, &mut audit)?;
                    let sweep = c.sweep(net, fr, cfg)?;
                    return Ok(Some(LocalReport {
                        sweep,
                        losses: Some(losses),
                        audit,
                    }));
                }
                match pool_ref {
                    Some(pool) => {
                        let kl = c.alignment_epoch(net, pool, cfg)?;
                        Ok(Some(LocalReport {
                            sweep: target_sweep.clone(),
                            losses: Some(EpochLosses {
                                kl: Some(kl),
                                total: kl,
                                ..EpochLosses::default()
                            }),
                            audit,
                        }))
                    }
                    None => Ok(None),
                }
            })?;
            let mut messages = Vec::new();
            let mut sites = Vec::new();
            for (c, report) in self.clients.iter().zip(reports) {
                let sent = report.is_some();
                let report = report.unwrap_or_else(|| LocalReport {
                    sweep: target_sweep.clone(),
                    losses: None,
                    audit: DirichletAudit::default(),
                });
                self.audit.merge(&report.audit);
                let style = report.sweep.style()?;
                let style_kl = (cfg.alignment && c.site != Site::C)
                    .then(|| kl_style_loss(&style, &target, cfg.var_floor, cfg.kl_form))
                    .transpose()?;
                let mut row = SiteRound {
                    site: c.site,
                    weight: None,
                    uncertainty: style.site_uncertainty,
                    feature_variance: report.sweep.mean_feature_variance(),
                    losses: report.losses,
                    style_kl,
                    message_bytes: None,
                    metrics: None,
                };
                if sent {
                    let msg = c.message(round, Stage::Classification, style);
                    row.message_bytes = Some(msg.encode().len());
                    messages.push(msg);
                }
                sites.push(row);
            }
            // the extractor is averaged over every sender, the classifier
            // only over sites that trained it
            let adaptive: Vec<bool> = messages.iter().map(|m| self.clients[m.site.index()].trains).collect();
            let weights = protocol::partial_message_weights(&messages, &self.cfg.policy, &adaptive)?;
            let merged = protocol::aggregate(&messages, &weights)?;
            let trainers: Vec<usize> = messages
                .iter()
                .enumerate()
                .filter(|(_, m)| self.clients[m.site.index()].trains)
                .map(|(i, _)| i)
                .collect();
            let mut flat = merged;
            if trainers.len() < messages.len() {
                let subset: Vec<RoundMessage> = trainers.iter().map(|&i| messages[i].clone()).collect();
                let total: f64 = trainers.iter().map(|&i| weights[i]).sum();
                let sub_w: Vec<f64> = trainers.iter().map(|&i| weights[i] / total).collect();
                let cls = protocol::aggregate(&subset, &sub_w)?;
                flat[n_ext..].copy_from_slice(&cls[n_ext..]);
            }
            self.global.assign_flat(&flat)?;
            for (m, w) in messages.iter().zip(&weights) {
                sites[m.site.index()].weight = Some(*w);
            }
            let eval_now = self.cfg.eval_every > 0
                && ((round + 1) % self.cfg.eval_every == 0 || round + 1 == self.cfg.classification_rounds);
            if eval_now {
                for (row, c) in sites.iter_mut().zip(&self.clients) {
                    let preds = predict_eval(self.net, &self.global, &c.test, fr, self.cfg.batch_size, &mut self.audit)?;
                    row.metrics = Some(compute_metrics(&preds)?);
                }
            }
            self.log.push(RoundRecord {
                stage: Stage::Classification,
                round,
                policy: self.cfg.policy.kind,
                sites,
            });
        }
        Ok(())
    }

    /// Both stages, then the trained state.
    pub fn run(mut self) -> Result<Trained> {
        self.run_alignment()?;
        self.run_classification()?;
        self.finish()
    }

    pub fn finish(self) -> Result<Trained> {
        let feats = self
            .feats
            .ok_or_else(|| Error::State("federation finished before alignment".into()))?;
        Ok(Trained {
            global: self.global,
            feats,
            log: self.log,
            audit: self.audit,
        })
    }
}
