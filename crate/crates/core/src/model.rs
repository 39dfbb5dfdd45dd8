//! Style-feature extractor and evidential classifier.
//!
//! The extractor treats the eight atlas templates as sequence positions and
//! the zero-padded region means as input channels:
//!
//! ```text
//! [B×8×246] -> Conv1D(k=3) -> BN -> ReLU -> MaxPool      [B×4×128]
//!           -> 2 × TransformerBlock(128)                 [B×4×128]
//!           -> PatchMerge (pair concat + Linear)         [B×2×256]
//!           -> 2 × TransformerBlock(256)                 [B×2×256]
//!           -> AdaptiveAvgPool over sequence             [B×256]
//!           -> Linear -> BN -> ReLU                      [B×256]
//! ```
//!
//! The classifier maps `[f | feat_a | feat_b | feat_c]` (1024 wide) through
//! three dense layers to per-class evidence.

use std::sync::Arc;

use fedda_autograd::{BatchStats, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, Init, Layout, ParamId, Params};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass behavior of normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, dropout active (Monte Carlo sampling).
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softplus evidence parameterizing a Dirichlet.
    Evidential,
    /// Plain logits for softmax cross-entropy.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub templates: usize,
    pub regions: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub blocks_per_stage: usize,
    pub dropout: f64,
    pub classifier_hidden: [usize; 2],
    pub classes: usize,
    /// When false, transformer blocks become position-wise dense layers.
    pub transformer: bool,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            templates: 8,
            regions: 246,
            conv_channels: 128,
            kernel: 3,
            heads: 4,
            ff_mult: 4,
            blocks_per_stage: 2,
            dropout: 0.1,
            classifier_hidden: [256, 64],
            classes: 2,
            transformer: true,
            head: HeadKind::Evidential,
        }
    }
}

impl ModelConfig {
    /// Width of the style vector, twice the convolution width after the
    /// patch merge.
    pub fn style_dim(&self) -> usize {
        2 * self.conv_channels
    }

    /// Classifier input: sample feature plus three domain style vectors.
    pub fn classifier_input(&self) -> usize {
        4 * self.style_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.templates < 4 || self.templates % 4 != 0 {
            return bad(format!("templates = {} must be a positive multiple of 4", self.templates));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel = {} must be odd", self.kernel));
        }
        for (name, width) in [("conv_channels", self.conv_channels), ("style_dim", self.style_dim())] {
            if self.heads == 0 || width % self.heads != 0 {
                return bad(format!("{name} = {width} not divisible by heads = {}", self.heads));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if self.classes < 2 {
            return bad("classes must be at least 2".into());
        }
        if self.regions == 0 || self.ff_mult == 0 || self.classifier_hidden.contains(&0) {
            return bad("zero-sized layer".into());
        }
        Ok(())
    }
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// Applies exponential-moving-average updates (unbiased batch variance).
pub fn apply_bn_updates(params: &mut Params, updates: &[BnUpdate]) {
    for u in updates {
        let n = u.stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in params.get_mut(u.mean).iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in params.get_mut(u.var).iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
    out: usize,
}

impl Dense {
    fn new(layout: &mut Layout, name: &str, input: usize, out: usize) -> Self {
        Dense {
            w: layout.push(format!("{name}.weight"), &[input, out], Init::FanIn(input), true),
            b: layout.push(format!("{name}.bias"), &[out], Init::Zeros, true),
            out,
        }
    }

    /// Applies to the trailing axis of any-rank input.
    fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let input = *shape.last().expect("non-scalar input");
        let rows = shape.iter().product::<usize>() / input;
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, vec![rows, input])? };
        let w = bind.var(tape, self.w);
        let b = bind.var(tape, self.b);
        let y = tape.matmul(flat, w)?;
        let y = tape.add_row(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.out;
            Ok(tape.reshape(y, out_shape)?)
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(layout: &mut Layout, name: &str, width: usize) -> Self {
        Norm {
            gamma: layout.push(format!("{name}.gamma"), &[width], Init::Ones, true),
            beta: layout.push(format!("{name}.beta"), &[width], Init::Zeros, true),
        }
    }

    fn layer_norm(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let g = bind.var(tape, self.gamma);
        let b = bind.var(tape, self.beta);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    affine: Norm,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn new(layout: &mut Layout, name: &str, width: usize) -> Self {
        BatchNorm {
            affine: Norm::new(layout, name, width),
            running_mean: layout.push(format!("{name}.running_mean"), &[width], Init::Zeros, false),
            running_var: layout.push(format!("{name}.running_var"), &[width], Init::Ones, false),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let g = bind.var(tape, self.affine.gamma);
        let b = bind.var(tape, self.affine.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, BN_EPS)?;
                updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval | Mode::McDropout => Ok(tape.batch_norm_eval(
                x,
                g,
                b,
                bind.raw(self.running_mean),
                bind.raw(self.running_var),
                BN_EPS,
            )?),
        }
    }
}

/// Pre-layernorm multi-head self-attention block with a ×`ff_mult`
/// feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
    heads: usize,
    width: usize,
    dropout: f64,
}

impl TransformerBlock {
    fn new(layout: &mut Layout, name: &str, width: usize, heads: usize, ff_mult: usize, dropout: f64) -> Self {
        TransformerBlock {
            ln1: Norm::new(layout, &format!("{name}.ln1"), width),
            q: Dense::new(layout, &format!("{name}.attn.q"), width, width),
            k: Dense::new(layout, &format!("{name}.attn.k"), width, width),
            v: Dense::new(layout, &format!("{name}.attn.v"), width, width),
            o: Dense::new(layout, &format!("{name}.attn.o"), width, width),
            ln2: Norm::new(layout, &format!("{name}.ln2"), width),
            ff1: Dense::new(layout, &format!("{name}.ff1"), width, ff_mult * width),
            ff2: Dense::new(layout, &format!("{name}.ff2"), ff_mult * width, width),
            heads,
            width,
            dropout,
        }
    }

    /// `[B×L×W] -> [B·H × L × D]`
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, l: usize) -> Result<Var> {
        let d = self.width / self.heads;
        let x = tape.reshape(x, vec![b, l, self.heads, d])?;
        let x = tape.swap_middle(x)?;
        Ok(tape.reshape(x, vec![b * self.heads, l, d])?)
    }

    /// Attention probabilities `[B·H × L × L]` for normalized input `h`.
    fn attention_probs(&self, tape: &mut Tape, bind: &mut Binding, h: Var) -> Result<(Var, Var)> {
        let (b, l) = {
            let s = tape.shape(h);
            (s[0], s[1])
        };
        let d = self.width / self.heads;
        let q = self.q.forward(tape, bind, h)?;
        let k = self.k.forward(tape, bind, h)?;
        let v = self.v.forward(tape, bind, h)?;
        let q = self.split_heads(tape, q, b, l)?;
        let k = self.split_heads(tape, k, b, l)?;
        let v = self.split_heads(tape, v, b, l)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        Ok((tape.softmax(scores)?, v))
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (b, l) = {
            let s = tape.shape(x);
            (s[0], s[1])
        };
        let d = self.width / self.heads;
        let h = self.ln1.layer_norm(tape, bind, x)?;
        let (probs, v) = self.attention_probs(tape, bind, h)?;
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.reshape(ctx, vec![b, self.heads, l, d])?;
        let ctx = tape.swap_middle(ctx)?;
        let ctx = tape.reshape(ctx, vec![b, l, self.width])?;
        let attn = self.o.forward(tape, bind, ctx)?;
        let attn = dropout(tape, attn, self.dropout, mode, rng)?;
        let x = tape.add(x, attn)?;

        let h = self.ln2.layer_norm(tape, bind, x)?;
        let h = self.ff1.forward(tape, bind, h)?;
        let h = tape.relu(h)?;
        let h = self.ff2.forward(tape, bind, h)?;
        let h = dropout(tape, h, self.dropout, mode, rng)?;
        Ok(tape.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Transformer(TransformerBlock),
    /// Position-wise `ReLU(Linear(x))` of unchanged width.
    FeedForward(Dense),
}

impl Block {
    fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match self {
            Block::Transformer(t) => t.forward(tape, bind, x, mode, rng),
            Block::FeedForward(d) => {
                let y = d.forward(tape, bind, x)?;
                Ok(tape.relu(y)?)
            }
        }
    }
}

fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if mode.dropout_active() && p > 0.0 {
        Ok(tape.dropout(x, p, rng)?)
    } else {
        Ok(x)
    }
}

/// Output of a forward pass plus any running-statistics updates to apply.
#[derive(Debug)]
pub struct Forward {
    pub out: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct StyleExtractor {
    cfg: ModelConfig,
    layout: Arc<Layout>,
    conv_w: ParamId,
    conv_b: ParamId,
    conv_bn: BatchNorm,
    stage1: Vec<Block>,
    merge: Dense,
    stage2: Vec<Block>,
    head: Dense,
    head_bn: BatchNorm,
}

impl StyleExtractor {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::new();
        let c = cfg.conv_channels;
        let w2 = cfg.style_dim();
        let conv_w = layout.push(
            "conv.kernel",
            &[cfg.kernel, cfg.regions, c],
            Init::FanIn(cfg.kernel * cfg.regions),
            true,
        );
        let conv_b = layout.push("conv.bias", &[c], Init::Zeros, true);
        let conv_bn = BatchNorm::new(&mut layout, "conv.bn", c);
        let make_stage = |layout: &mut Layout, prefix: &str, width: usize| -> Vec<Block> {
            (0..cfg.blocks_per_stage)
                .map(|i| {
                    let name = format!("{prefix}.{i}");
                    if cfg.transformer {
                        Block::Transformer(TransformerBlock::new(
                            layout,
                            &name,
                            width,
                            cfg.heads,
                            cfg.ff_mult,
                            cfg.dropout,
                        ))
                    } else {
                        Block::FeedForward(Dense::new(layout, &format!("{name}.ff"), width, width))
                    }
                })
                .collect()
        };
        let stage1 = make_stage(&mut layout, "stage1", c);
        let merge = Dense::new(&mut layout, "merge", w2, w2);
        let stage2 = make_stage(&mut layout, "stage2", w2);
        let head = Dense::new(&mut layout, "style.linear", w2, w2);
        let head_bn = BatchNorm::new(&mut layout, "style.bn", w2);
        Ok(StyleExtractor {
            cfg: cfg.clone(),
            layout: Arc::new(layout),
            conv_w,
            conv_b,
            conv_bn,
            stage1,
            merge,
            stage2,
            head,
            head_bn,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        self.layout.init(rng)
    }

    /// `[B×templates×regions] -> [B×style_dim]`, all entries ≥ 0.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let (b, l) = match *tape.shape(x) {
            [b, l, r] if l == cfg.templates && r == cfg.regions => (b, l),
            ref s => {
                return Err(Error::Dimension(format!(
                    "extractor input must be [B×{}×{}], got {s:?}",
                    cfg.templates, cfg.regions
                )))
            }
        };
        if mode == Mode::Train && b < 2 {
            return Err(Error::Config("train-mode batch needs at least 2 samples".into()));
        }
        let mut updates = Vec::new();
        let w = bind.var(tape, self.conv_w);
        let bias = bind.var(tape, self.conv_b);
        let h = tape.conv1d(x, w, Some(bias))?;
        let h = self.conv_bn.forward(tape, bind, h, mode, &mut updates)?;
        let h = tape.relu(h)?;
        let mut h = tape.maxpool_seq(h)?;
        for block in &self.stage1 {
            h = block.forward(tape, bind, h, mode, rng)?;
        }
        // adjacent token pairs concatenated: [B×L/2×C] -> [B×L/4×2C]
        let h = tape.reshape(h, vec![b, l / 4, cfg.style_dim()])?;
        let mut h = self.merge.forward(tape, bind, h)?;
        for block in &self.stage2 {
            h = block.forward(tape, bind, h, mode, rng)?;
        }
        let h = tape.mean_seq(h)?;
        let h = self.head.forward(tape, bind, h)?;
        let h = self.head_bn.forward(tape, bind, h, mode, &mut updates)?;
        let z = tape.relu(h)?;
        Ok(Forward {
            out: z,
            bn_updates: updates,
        })
    }

    /// Attention probabilities of the first stage-one block for input `x`
    /// (eval mode). `None` when transformer blocks are disabled.
    pub fn first_attention(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Option<Var>> {
        let Some(Block::Transformer(block)) = self.stage1.first() else {
            return Ok(None);
        };
        let w = bind.var(tape, self.conv_w);
        let bias = bind.var(tape, self.conv_b);
        let h = tape.conv1d(x, w, Some(bias))?;
        let h = self.conv_bn.forward(tape, bind, h, Mode::Eval, &mut Vec::new())?;
        let h = tape.relu(h)?;
        let h = tape.maxpool_seq(h)?;
        let h = block.ln1.layer_norm(tape, bind, h)?;
        Ok(Some(block.attention_probs(tape, bind, h)?.0))
    }
}

/// Three dense layers `input -> h1 -> h2 -> K` with ReLU and dropout between.
#[derive(Debug, Clone)]
pub struct Classifier {
    cfg: ModelConfig,
    layout: Arc<Layout>,
    fc1: Dense,
    fc2: Dense,
    fc3: Dense,
}

impl Classifier {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::new();
        let [h1, h2] = cfg.classifier_hidden;
        let fc1 = Dense::new(&mut layout, "cls.fc1", cfg.classifier_input(), h1);
        let fc2 = Dense::new(&mut layout, "cls.fc2", h1, h2);
        let fc3 = Dense::new(&mut layout, "cls.fc3", h2, cfg.classes);
        Ok(Classifier {
            cfg: cfg.clone(),
            layout: Arc::new(layout),
            fc1,
            fc2,
            fc3,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn head(&self) -> HeadKind {
        self.cfg.head
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        self.layout.init(rng)
    }

    /// `[B×input] -> [B×K]`: evidence (softplus) for the evidential head,
    /// raw logits for the softmax head.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        f_cat: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match *tape.shape(f_cat) {
            [_, w] if w == self.cfg.classifier_input() => {}
            ref s => {
                return Err(Error::Dimension(format!(
                    "classifier input must be [B×{}], got {s:?}",
                    self.cfg.classifier_input()
                )))
            }
        }
        let h = self.fc1.forward(tape, bind, f_cat)?;
        let h = tape.relu(h)?;
        let h = dropout(tape, h, self.cfg.dropout, mode, rng)?;
        let h = self.fc2.forward(tape, bind, h)?;
        let h = tape.relu(h)?;
        let h = dropout(tape, h, self.cfg.dropout, mode, rng)?;
        let logits = self.fc3.forward(tape, bind, h)?;
        match self.cfg.head {
            HeadKind::Evidential => Ok(tape.softplus(logits)?),
            HeadKind::Softmax => Ok(logits),
        }
    }
}

/// Row-wise `[f | feat_a | feat_b | feat_c]`. The style vectors enter as
/// constants, so no gradient flows into them.
pub fn concat_features(tape: &mut Tape, f: Var, feats: [&[f64]; 3]) -> Result<Var> {
    let (b, w) = match *tape.shape(f) {
        [b, w] => (b, w),
        ref s => return Err(Error::Dimension(format!("sample features must be 2-D, got {s:?}"))),
    };
    if let Some(bad) = feats.iter().find(|v| v.len() != w) {
        return Err(Error::Dimension(format!(
            "style vector length {} does not match feature width {w}",
            bad.len()
        )));
    }
    let row: Vec<f64> = feats.concat();
    let mut block = Vec::with_capacity(b * row.len());
    for _ in 0..b {
        block.extend_from_slice(&row);
    }
    let styles = tape.constant(Tensor::new(vec![b, 3 * w], block)?);
    Ok(tape.concat_cols(f, styles)?)
}

/// Evidence and derived Dirichlet quantities for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirichletOutput {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub probs: Vec<f64>,
    pub uncertainty: f64,
}

impl DirichletOutput {
    /// `α = e + 1`, `S = Σα`, `p = α/S`, `u = K/S`.
    pub fn from_evidence(evidence: &[f64]) -> Result<Self> {
        if evidence.is_empty() {
            return Err(Error::Dimension("empty evidence vector".into()));
        }
        if let Some(e) = evidence.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::Numeric(format!("invalid evidence value {e} in {evidence:?}")));
        }
        let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
        let strength: f64 = alpha.iter().sum();
        let probs = alpha.iter().map(|a| a / strength).collect();
        Ok(DirichletOutput {
            evidence: evidence.to_vec(),
            alpha,
            strength,
            probs,
            uncertainty: evidence.len() as f64 / strength,
        })
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    /// Index of the largest class probability (first on ties).
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Converts a `[B×K]` evidence tensor into per-sample outputs.
pub fn dirichlet_batch(evidence: &Tensor) -> Result<Vec<DirichletOutput>> {
    let k = *evidence
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("scalar evidence".into()))?;
    evidence.values().chunks(k).map(DirichletOutput::from_evidence).collect()
}

/// Running count of Dirichlet identity checks over classifier batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirichletAudit {
    pub batches: usize,
    pub samples: usize,
    pub violations: usize,
}

impl DirichletAudit {
    pub const TOLERANCE: f64 = 1e-12;

    /// Checks `Σp = 1`, `α ≥ 1`, `u·S = K` and `0 < u ≤ 1` on every row of
    /// a `[B×K]` evidence batch.
    pub fn check_batch(&mut self, evidence: &Tensor) {
        let k = evidence.shape().last().copied().unwrap_or(0).max(1);
        self.batches += 1;
        for row in evidence.values().chunks(k) {
            self.samples += 1;
            if !Self::row_ok(row) {
                self.violations += 1;
            }
        }
    }

    fn row_ok(row: &[f64]) -> bool {
        let Ok(d) = DirichletOutput::from_evidence(row) else {
            return false;
        };
        let k = d.classes() as f64;
        (d.probs.iter().sum::<f64>() - 1.0).abs() <= Self::TOLERANCE
            && d.alpha.iter().all(|a| *a >= 1.0)
            && (d.uncertainty * d.strength - k).abs() <= Self::TOLERANCE * k
            && d.uncertainty > 0.0
            && d.uncertainty <= 1.0
    }

    pub fn merge(&mut self, other: &DirichletAudit) {
        self.batches += other.batches;
        self.samples += other.samples;
        self.violations += other.violations;
    }
}

/// The extractor and classifier definitions of one model.
#[derive(Debug, Clone)]
pub struct Network {
    pub extractor: StyleExtractor,
    pub classifier: Classifier,
}

/// Parameter values for a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub extractor: Params,
    pub classifier: Params,
}

impl NetworkParams {
    /// Extractor values followed by classifier values.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.extractor.values().to_vec();
        v.extend_from_slice(self.classifier.values());
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.extractor.values().len();
        if flat.len() != n + self.classifier.values().len() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                n + self.classifier.values().len()
            )));
        }
        self.extractor.set_values(&flat[..n])?;
        self.classifier.set_values(&flat[n..])
    }

    /// Combined `(name, shape)` manifest matching [`Self::flatten`].
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m = self.extractor.layout().manifest();
        m.extend(self.classifier.layout().manifest());
        m
    }
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Network {
            extractor: StyleExtractor::new(cfg)?,
            classifier: Classifier::new(cfg)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.extractor.config()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkParams {
        NetworkParams {
            extractor: self.extractor.init(rng),
            classifier: self.classifier.init(rng),
        }
    }

    /// Style features for a batch, no gradient tracking.
    pub fn style_features<R: Rng + ?Sized>(
        &self,
        params: &NetworkParams,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&params.extractor, false);
        let xv = tape.constant(x.clone());
        let fwd = self.extractor.forward(&mut tape, &mut bind, xv, mode, rng)?;
        Ok(tape.value(fwd.out).clone())
    }

    /// Classifier output (`[B×K]` evidence or logits) for a batch, no
    /// gradient tracking.
    pub fn head_output<R: Rng + ?Sized>(
        &self,
        params: &NetworkParams,
        x: &Tensor,
        feats: [&[f64]; 3],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut ebind = Binding::new(&params.extractor, false);
        let mut cbind = Binding::new(&params.classifier, false);
        let xv = tape.constant(x.clone());
        let f = self.extractor.forward(&mut tape, &mut ebind, xv, mode, rng)?.out;
        let f_cat = concat_features(&mut tape, f, feats)?;
        let out = self.classifier.forward(&mut tape, &mut cbind, f_cat, mode, rng)?;
        Ok((tape.value(f).clone(), tape.value(out).clone()))
    }
}

/// Positive-class-style probabilities from a head output row.
pub fn head_probs(head: HeadKind, row: &[f64]) -> Vec<f64> {
    match head {
        HeadKind::Evidential => {
            let s: f64 = row.iter().map(|e| e + 1.0).sum();
            row.iter().map(|e| (e + 1.0) / s).collect()
        }
        HeadKind::Softmax => {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }
}
