//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every value computed in a forward pass. Operations are
//! methods on the tape that append a node and return a [`Var`] handle, so
//! nodes are recorded in topological order by construction. [`Tape::backward`]
//! walks the nodes in reverse once, accumulating gradients over fan-out.
//!
//! Broadcasting is limited to a trailing-axis vector added to (or scaling)
//! every row; everything else requires exact shape agreement.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::special::{digamma_unchecked, trigamma_unchecked};
use crate::tensor::{check_finite, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    Scale { x: usize, factor: f64 },
    AddScalar { x: usize },
    Relu { x: usize },
    Softplus { x: usize },
    Sigmoid { x: usize },
    Log { x: usize },
    Exp { x: usize },
    Square { x: usize },
    ClampMin { x: usize, floor: f64 },
    Dropout { x: usize, mask: Vec<f64> },
    MaxPoolSeq { x: usize, argmax: Vec<usize> },
    MeanSeq { x: usize, b: usize, l: usize, c: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    Reshape { x: usize },
    SwapMiddle { x: usize, dims: [usize; 4] },
    Im2Col { x: usize, b: usize, l: usize, c: usize, k: usize, pad: usize },
    ConcatCols { a: usize, b: usize, p: usize, q: usize },
    Sum { x: usize },
    Mean { x: usize },
    ColMean { x: usize, rows: usize, cols: usize },
    ColVar { x: usize, rows: usize, cols: usize, mean: Vec<f64> },
    RowSum { x: usize, rows: usize, cols: usize },
    Digamma { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch normalization, used by
/// callers to update running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/N) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of rows normalized per channel.
    pub count: usize,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// `C (m×n) = beta·C + A·B` where A and B are addressed by (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    // SAFETY: the asserts above bound every index the kernel touches given
    // the supplied strides and extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by [`Tape::backward`], if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone())
        })
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, values: Vec<f64>, kind: Op, inputs: &[usize]) -> Result<Var> {
        check_finite(op, &values)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, values),
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::shape(op, format!("expected 2-D, got {s:?}"))),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(TensorError::shape(op, format!("expected 3-D, got {s:?}"))),
        }
    }

    fn last_dim(&self, op: &'static str, v: Var) -> Result<usize> {
        self.shape(v)
            .last()
            .copied()
            .ok_or_else(|| TensorError::shape(op, "scalar has no trailing axis"))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.vals(a), (k, 1), self.vals(b), (n, 1), &mut out, 0.0);
        self.push("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Batched product over the leading axis. With `trans_b`, `b` is
    /// `[g×n×k]` and each slice is transposed before multiplying.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k) = self.dims3("bmm", a)?;
        let (g2, r, c) = self.dims3("bmm", b)?;
        let (k2, n) = if trans_b { (c, r) } else { (r, c) };
        if g != g2 || k != k2 {
            return Err(TensorError::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b = {trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.vals(a), self.vals(b));
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                (k, 1),
                &bv[i * k * n..],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(
            "bmm",
            vec![g, m, n],
            out,
            Op::BatchMatMul { a: a.0, b: b.0, g, m, k, n, trans_b },
            &[a.0, b.0],
        )
    }

    // ----- elementwise binary ---------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, kind, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(&v) = self.vals(b).iter().find(|v| **v == 0.0) {
            return Err(TensorError::Domain { op: "div", value: v });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, row: Var, mul: bool) -> Result<Var> {
        let c = self.last_dim(op, x)?;
        if self.shape(row) != [c] {
            return Err(TensorError::shape(
                op,
                format!("row vector {:?} vs trailing axis {c}", self.shape(row)),
            ));
        }
        let rv = self.vals(row);
        let out: Vec<f64> = self
            .vals(x)
            .chunks(c)
            .flat_map(|chunk| {
                chunk.iter().zip(rv).map(move |(&a, &b)| if mul { a * b } else { a + b })
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let kind = if mul {
            Op::MulRow { x: x.0, row: row.0 }
        } else {
            Op::AddRow { x: x.0, row: row.0 }
        };
        self.push(op, shape, out, kind, &[x.0, row.0])
    }

    /// Adds a `[c]` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, false)
    }

    /// Multiplies every trailing-axis row of `x` by a `[c]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, true)
    }

    // ----- elementwise unary ----------------------------------------------

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out, kind, &[x.0])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale { x: x.0, factor })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x: x.0 })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&v) = self.vals(x).iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain { op: "log", value: v });
        }
        self.unary("log", x, f64::ln, Op::Log { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp { x: x.0 })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square { x: x.0 })
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(floor), Op::ClampMin { x: x.0, floor })
    }

    /// ψ(x) elementwise; its backward rule is the trigamma function.
    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        if let Some(&v) = self.vals(x).iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::Domain { op: "digamma", value: v });
        }
        self.unary("digamma", x, digamma_unchecked, Op::Digamma { x: x.0 })
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::config("dropout", format!("p = {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return self.scale(x, 1.0);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.vals(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.vals(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    // ----- sequence ops on [B×L×C] ----------------------------------------

    /// Max pool with window and stride 2 along the sequence axis.
    pub fn maxpool_seq(&mut self, x: Var) -> Result<Var> {
        let (b, l, c) = self.dims3("maxpool_seq", x)?;
        let lo = l / 2;
        if lo == 0 {
            return Err(TensorError::shape("maxpool_seq", format!("sequence length {l} < 2")));
        }
        let xv = self.vals(x);
        let mut out = Vec::with_capacity(b * lo * c);
        let mut argmax = Vec::with_capacity(b * lo * c);
        for bi in 0..b {
            for li in 0..lo {
                for ci in 0..c {
                    let i0 = (bi * l + 2 * li) * c + ci;
                    let i1 = i0 + c;
                    let pick = if xv[i1] > xv[i0] { i1 } else { i0 };
                    out.push(xv[pick]);
                    argmax.push(pick);
                }
            }
        }
        self.push("maxpool_seq", vec![b, lo, c], out, Op::MaxPoolSeq { x: x.0, argmax }, &[x.0])
    }

    /// Adaptive average pool to a single position: `[B×L×C] -> [B×C]`.
    pub fn mean_seq(&mut self, x: Var) -> Result<Var> {
        let (b, l, c) = self.dims3("mean_seq", x)?;
        let xv = self.vals(x);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for li in 0..l {
                let row = &xv[(bi * l + li) * c..(bi * l + li + 1) * c];
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= l as f64);
        self.push("mean_seq", vec![b, c], out, Op::MeanSeq { x: x.0, b, l, c }, &[x.0])
    }

    /// Unfolds `[B×L×C]` into `[B·L × K·C]` patches for a stride-1
    /// correlation with `pad` zeros on both ends.
    pub fn im2col(&mut self, x: Var, k: usize, pad: usize) -> Result<Var> {
        let (b, l, c) = self.dims3("im2col", x)?;
        if l + 2 * pad + 1 != l + k {
            return Err(TensorError::config(
                "im2col",
                format!("kernel {k} with padding {pad} does not preserve length"),
            ));
        }
        let xv = self.vals(x);
        let mut out = vec![0.0; b * l * k * c];
        for bi in 0..b {
            for li in 0..l {
                let dst = &mut out[(bi * l + li) * k * c..(bi * l + li + 1) * k * c];
                for j in 0..k {
                    let src = li + j;
                    if src < pad || src >= l + pad {
                        continue;
                    }
                    let s = src - pad;
                    dst[j * c..(j + 1) * c].copy_from_slice(&xv[(bi * l + s) * c..(bi * l + s + 1) * c]);
                }
            }
        }
        self.push(
            "im2col",
            vec![b * l, k * c],
            out,
            Op::Im2Col { x: x.0, b, l, c, k, pad },
            &[x.0],
        )
    }

    /// 1-D cross-correlation with same-padding. `x` is `[B×L×Cin]`, `kernel`
    /// is `[K×Cin×Cout]` with odd `K`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (b, l, cin) = self.dims3("conv1d", x)?;
        let (k, kc, cout) = self.dims3("conv1d", kernel)?;
        if k % 2 == 0 {
            return Err(TensorError::config("conv1d", format!("kernel size {k} must be odd")));
        }
        if kc != cin {
            return Err(TensorError::shape("conv1d", format!("input channels {cin} vs kernel {kc}")));
        }
        let cols = self.im2col(x, k, k / 2)?;
        let w = self.reshape(kernel, vec![k * cin, cout])?;
        let y = self.matmul(cols, w)?;
        let y = self.reshape(y, vec![b, l, cout])?;
        match bias {
            Some(bias) => self.add_row(y, bias),
            None => Ok(y),
        }
    }

    // ----- normalization --------------------------------------------------

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.last_dim("layer_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("layer_norm", "gain/shift must match trailing axis"));
        }
        let xv = self.vals(x);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (h, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
        }
        let (g, bt) = (self.vals(gamma), self.vals(beta));
        let out: Vec<f64> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(bt).map(|((h, g), b)| g * h + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Train-mode batch normalization: each channel (trailing axis) is
    /// normalized over all leading positions with its biased batch variance.
    /// Fewer than two rows is an error.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let c = self.last_dim("batch_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("batch_norm", "gain/shift must match channel axis"));
        }
        let xv = self.vals(x);
        let n = xv.len() / c;
        if n < 2 {
            return Err(TensorError::config(
                "batch_norm",
                "train mode needs at least two rows per channel",
            ));
        }
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xv
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect();
        let (g, bt) = (self.vals(gamma), self.vals(beta));
        let out: Vec<f64> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(bt).map(|((h, g), b)| g * h + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let stats = BatchStats { mean, var, count: n };
        let v = self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.last_dim("batch_norm", x)?;
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(TensorError::shape("batch_norm", "parameters must match channel axis"));
        }
        if let Some(&v) = running_var.iter().find(|v| **v < 0.0) {
            return Err(TensorError::Domain { op: "batch_norm", value: v });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = self
            .vals(x)
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(running_mean)
                    .zip(&inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect();
        let (g, bt) = (self.vals(gamma), self.vals(beta));
        let out: Vec<f64> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(bt).map(|((h, g), b)| g * h + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
        )
    }

    // ----- softmax --------------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("softmax", x)?;
        let out: Vec<f64> = self
            .vals(x)
            .chunks(c)
            .flat_map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax { x: x.0 }, &[x.0])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("log_softmax", x)?;
        let out: Vec<f64> = self
            .vals(x)
            .chunks(c)
            .flat_map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter().map(move |v| v - lse)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax { x: x.0 }, &[x.0])
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.vals(x).len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let values = self.vals(x).to_vec();
        self.push("reshape", shape, values, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// `[a×b×c×d] -> [a×c×b×d]`.
    pub fn swap_middle(&mut self, x: Var) -> Result<Var> {
        let dims: [usize; 4] = match *self.shape(x) {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(TensorError::shape("swap_middle", format!("expected 4-D, got {s:?}"))),
        };
        let out = swap_middle(self.vals(x), dims);
        let [a, b, c, d] = dims;
        self.push("swap_middle", vec![a, c, b, d], out, Op::SwapMiddle { x: x.0, dims }, &[x.0])
    }

    /// Column-wise concatenation of `[n×p]` and `[n×q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.dims2("concat_cols", a)?;
        let (n2, q) = self.dims2("concat_cols", b)?;
        if n != n2 {
            return Err(TensorError::shape("concat_cols", format!("row counts {n} vs {n2}")));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        self.push(
            "concat_cols",
            vec![n, p + q],
            out,
            Op::ConcatCols { a: a.0, b: b.0, p, q },
            &[a.0, b.0],
        )
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.vals(x).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals(x).len();
        if n == 0 {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        let s = self.vals(x).iter().sum::<f64>() / n as f64;
        self.push("mean", vec![], vec![s], Op::Mean { x: x.0 }, &[x.0])
    }

    /// Per-column mean of `[n×c]`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("col_mean", x)?;
        if rows == 0 {
            return Err(TensorError::shape("col_mean", "no rows"));
        }
        let out = column_means(self.vals(x), rows, cols);
        self.push("col_mean", vec![cols], out, Op::ColMean { x: x.0, rows, cols }, &[x.0])
    }

    /// Per-column population (1/n) variance of `[n×c]`.
    pub fn col_var(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("col_var", x)?;
        if rows == 0 {
            return Err(TensorError::shape("col_var", "no rows"));
        }
        let xv = self.vals(x);
        let mean = column_means(xv, rows, cols);
        let mut out = vec![0.0; cols];
        for row in xv.chunks(cols) {
            for ((o, v), m) in out.iter_mut().zip(row).zip(&mean) {
                *o += (v - m) * (v - m);
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(
            "col_var",
            vec![cols],
            out,
            Op::ColVar { x: x.0, rows, cols, mean },
            &[x.0],
        )
    }

    /// Per-row sum of `[n×c]`, giving `[n]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("row_sum", x)?;
        let out: Vec<f64> = self.vals(x).chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        self.push("row_sum", vec![rows], out, Op::RowSum { x: x.0, rows, cols }, &[x.0])
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.vals(loss).len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.values();
        // Lazily allocated accumulator for input `i`.
        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; len])
        }
        let out = node.value.values();

        match node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let ga = acc(grads, a, m * k);
                    gemm(m, n, k, gout, (n, 1), val(b), (1, n), ga, 1.0);
                }
                if wants(b) {
                    let gb = acc(grads, b, k * n);
                    gemm(k, m, n, val(a), (1, k), gout, (n, 1), gb, 1.0);
                }
            }
            Op::BatchMatMul { a, b, g, m, k, n, trans_b } => {
                if wants(a) {
                    let ga = acc(grads, a, g * m * k);
                    for i in 0..g {
                        let bs = &val(b)[i * k * n..];
                        let strides = if trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, &gout[i * m * n..], (n, 1), bs, strides, &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                }
                if wants(b) {
                    let gb = acc(grads, b, g * k * n);
                    for i in 0..g {
                        let as_ = &val(a)[i * m * k..];
                        let go = &gout[i * m * n..];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB (n×k) = dCᵀ · A
                            gemm(n, m, k, go, (1, n), as_, (k, 1), dst, 1.0);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm(k, m, n, as_, (1, k), go, (n, 1), dst, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (i, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(i) {
                        acc(grads, i, gout.len()).iter_mut().zip(gout).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Sub { a, b } => {
                for (i, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(i) {
                        acc(grads, i, gout.len()).iter_mut().zip(gout).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(a) {
                    let bv = val(b);
                    acc(grads, a, gout.len()).iter_mut().zip(gout).zip(bv).for_each(|((g, d), y)| *g += d * y);
                }
                if wants(b) {
                    let av = val(a);
                    acc(grads, b, gout.len()).iter_mut().zip(gout).zip(av).for_each(|((g, d), x)| *g += d * x);
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    acc(grads, a, gout.len()).iter_mut().zip(gout).zip(bv).for_each(|((g, d), y)| *g += d / y);
                }
                if wants(b) {
                    acc(grads, b, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(av.iter().zip(bv))
                        .for_each(|((g, d), (x, y))| *g -= d * x / (y * y));
                }
            }
            Op::AddRow { x, row } => {
                let c = val(row).len();
                if wants(x) {
                    acc(grads, x, gout.len()).iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
                if wants(row) {
                    let gr = acc(grads, row, c);
                    for chunk in gout.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let c = val(row).len();
                let (xv, rv) = (val(x), val(row));
                if wants(x) {
                    let gx = acc(grads, x, gout.len());
                    for (gchunk, dchunk) in gx.chunks_mut(c).zip(gout.chunks(c)) {
                        for ((g, d), r) in gchunk.iter_mut().zip(dchunk).zip(rv) {
                            *g += d * r;
                        }
                    }
                }
                if wants(row) {
                    let gr = acc(grads, row, c);
                    for (dchunk, xchunk) in gout.chunks(c).zip(xv.chunks(c)) {
                        for ((g, d), xx) in gr.iter_mut().zip(dchunk).zip(xchunk) {
                            *g += d * xx;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(x) {
                    acc(grads, x, gout.len()).iter_mut().zip(gout).for_each(|(g, d)| *g += d * factor);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if wants(x) {
                    acc(grads, x, gout.len()).iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
            }
            Op::Relu { x } => {
                if wants(x) {
                    let xv = val(x);
                    acc(grads, x, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(xv)
                        .for_each(|((g, d), v)| if *v > 0.0 { *g += d });
                }
            }
            Op::ClampMin { x, floor } => {
                if wants(x) {
                    let xv = val(x);
                    acc(grads, x, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(xv)
                        .for_each(|((g, d), v)| if *v > floor { *g += d });
                }
            }
            Op::Softplus { x } => {
                if wants(x) {
                    let xv = val(x);
                    acc(grads, x, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(xv)
                        .for_each(|((g, d), v)| *g += d * sigmoid(*v));
                }
            }
            Op::Sigmoid { x } => {
                if wants(x) {
                    acc(grads, x, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(out)
                        .for_each(|((g, d), s)| *g += d * s * (1.0 - s));
                }
            }
            Op::Log { x } => {
                if wants(x) {
                    let xv = val(x);
                    acc(grads, x, gout.len()).iter_mut().zip(gout).zip(xv).for_each(|((g, d), v)| *g += d / v);
                }
            }
            Op::Exp { x } => {
                if wants(x) {
                    acc(grads, x, gout.len()).iter_mut().zip(gout).zip(out).for_each(|((g, d), e)| *g += d * e);
                }
            }
            Op::Square { x } => {
                if wants(x) {
                    let xv = val(x);
                    acc(grads, x, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(xv)
                        .for_each(|((g, d), v)| *g += 2.0 * d * v);
                }
            }
            Op::Digamma { x } => {
                if wants(x) {
                    let xv = val(x);
                    acc(grads, x, gout.len())
                        .iter_mut()
                        .zip(gout)
                        .zip(xv)
                        .for_each(|((g, d), v)| *g += d * trigamma_unchecked(*v));
                }
            }
            Op::Dropout { x, ref mask } => {
                if wants(x) {
                    acc(grads, x, gout.len()).iter_mut().zip(gout).zip(mask).for_each(|((g, d), m)| *g += d * m);
                }
            }
            Op::MaxPoolSeq { x, ref argmax } => {
                if wants(x) {
                    let gx = acc(grads, x, val(x).len());
                    for (d, &src) in gout.iter().zip(argmax) {
                        gx[src] += d;
                    }
                }
            }
            Op::MeanSeq { x, b, l, c } => {
                if wants(x) {
                    let gx = acc(grads, x, b * l * c);
                    let inv = 1.0 / l as f64;
                    for bi in 0..b {
                        let d = &gout[bi * c..(bi + 1) * c];
                        for li in 0..l {
                            let dst = &mut gx[(bi * l + li) * c..(bi * l + li + 1) * c];
                            dst.iter_mut().zip(d).for_each(|(g, dd)| *g += dd * inv);
                        }
                    }
                }
            }
            Op::Im2Col { x, b, l, c, k, pad } => {
                if wants(x) {
                    let gx = acc(grads, x, b * l * c);
                    for bi in 0..b {
                        for li in 0..l {
                            let src_row = &gout[(bi * l + li) * k * c..(bi * l + li + 1) * k * c];
                            for j in 0..k {
                                let s = li + j;
                                if s < pad || s >= l + pad {
                                    continue;
                                }
                                let s = s - pad;
                                let dst = &mut gx[(bi * l + s) * c..(bi * l + s + 1) * c];
                                dst.iter_mut().zip(&src_row[j * c..(j + 1) * c]).for_each(|(g, d)| *g += d);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref inv_std } => {
                let c = val(gamma).len();
                let gv = val(gamma);
                if wants(gamma) {
                    let gg = acc(grads, gamma, c);
                    for (dchunk, hchunk) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for ((g, d), h) in gg.iter_mut().zip(dchunk).zip(hchunk) {
                            *g += d * h;
                        }
                    }
                }
                if wants(beta) {
                    let gb = acc(grads, beta, c);
                    for dchunk in gout.chunks(c) {
                        gb.iter_mut().zip(dchunk).for_each(|(g, d)| *g += d);
                    }
                }
                if wants(x) {
                    let gx = acc(grads, x, gout.len());
                    let cf = c as f64;
                    for (r, (dchunk, hchunk)) in gout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = dchunk.iter().zip(gv).map(|(d, g)| d * g).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hchunk).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for ((g, d), h) in gx[r * c..(r + 1) * c].iter_mut().zip(&dh).zip(hchunk) {
                            *g += inv / cf * (cf * d - sum_dh - h * sum_dh_h);
                        }
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, ref xhat, ref inv_std } => {
                let c = val(gamma).len();
                let gv = val(gamma);
                let n = gout.len() / c;
                let mut sum_d = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                for (dchunk, hchunk) in gout.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_d[j] += dchunk[j];
                        sum_dh[j] += dchunk[j] * hchunk[j];
                    }
                }
                if wants(gamma) {
                    acc(grads, gamma, c).iter_mut().zip(&sum_dh).for_each(|(g, s)| *g += s);
                }
                if wants(beta) {
                    acc(grads, beta, c).iter_mut().zip(&sum_d).for_each(|(g, s)| *g += s);
                }
                if wants(x) {
                    let gx = acc(grads, x, gout.len());
                    let nf = n as f64;
                    for (r, (dchunk, hchunk)) in gout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            // dxhat = d·γ; the batch sums carry the same γ factor.
                            gx[r * c + j] += gv[j] * inv_std[j] / nf
                                * (nf * dchunk[j] - sum_d[j] - hchunk[j] * sum_dh[j]);
                        }
                    }
                }
            }
            Op::BatchNormEval { x, gamma, beta, ref xhat, ref inv_std } => {
                let c = val(gamma).len();
                let gv = val(gamma);
                if wants(gamma) {
                    let gg = acc(grads, gamma, c);
                    for (dchunk, hchunk) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for ((g, d), h) in gg.iter_mut().zip(dchunk).zip(hchunk) {
                            *g += d * h;
                        }
                    }
                }
                if wants(beta) {
                    let gb = acc(grads, beta, c);
                    for dchunk in gout.chunks(c) {
                        gb.iter_mut().zip(dchunk).for_each(|(g, d)| *g += d);
                    }
                }
                if wants(x) {
                    let gx = acc(grads, x, gout.len());
                    for (gchunk, dchunk) in gx.chunks_mut(c).zip(gout.chunks(c)) {
                        for j in 0..c {
                            gchunk[j] += dchunk[j] * gv[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(x) {
                    let c = *node.value.shape().last().unwrap();
                    let gx = acc(grads, x, gout.len());
                    for ((gchunk, dchunk), ychunk) in gx.chunks_mut(c).zip(gout.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = dchunk.iter().zip(ychunk).map(|(d, y)| d * y).sum();
                        for ((g, d), y) in gchunk.iter_mut().zip(dchunk).zip(ychunk) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if wants(x) {
                    let c = *node.value.shape().last().unwrap();
                    let gx = acc(grads, x, gout.len());
                    for ((gchunk, dchunk), ychunk) in gx.chunks_mut(c).zip(gout.chunks(c)).zip(out.chunks(c)) {
                        let total: f64 = dchunk.iter().sum();
                        for ((g, d), y) in gchunk.iter_mut().zip(dchunk).zip(ychunk) {
                            *g += d - y.exp() * total;
                        }
                    }
                }
            }
            Op::SwapMiddle { x, dims } => {
                if wants(x) {
                    let [a, b, c, d] = dims;
                    // the output has dims [a, c, b, d]; swapping back restores x's layout
                    let back = swap_middle(gout, [a, c, b, d]);
                    acc(grads, x, gout.len()).iter_mut().zip(&back).for_each(|(g, v)| *g += v);
                }
            }
            Op::ConcatCols { a, b, p, q } => {
                let n = gout.len() / (p + q);
                if wants(a) {
                    let ga = acc(grads, a, n * p);
                    for r in 0..n {
                        ga[r * p..(r + 1) * p]
                            .iter_mut()
                            .zip(&gout[r * (p + q)..r * (p + q) + p])
                            .for_each(|(g, d)| *g += d);
                    }
                }
                if wants(b) {
                    let gb = acc(grads, b, n * q);
                    for r in 0..n {
                        gb[r * q..(r + 1) * q]
                            .iter_mut()
                            .zip(&gout[r * (p + q) + p..(r + 1) * (p + q)])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sum { x } => {
                if wants(x) {
                    let n = val(x).len();
                    acc(grads, x, n).iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Mean { x } => {
                if wants(x) {
                    let n = val(x).len();
                    let d = gout[0] / n as f64;
                    acc(grads, x, n).iter_mut().for_each(|g| *g += d);
                }
            }
            Op::ColMean { x, rows, cols } => {
                if wants(x) {
                    let inv = 1.0 / rows as f64;
                    let gx = acc(grads, x, rows * cols);
                    for chunk in gx.chunks_mut(cols) {
                        chunk.iter_mut().zip(gout).for_each(|(g, d)| *g += d * inv);
                    }
                }
            }
            Op::ColVar { x, rows, cols, ref mean } => {
                if wants(x) {
                    let scale = 2.0 / rows as f64;
                    let xv = val(x);
                    let gx = acc(grads, x, rows * cols);
                    for (gchunk, xchunk) in gx.chunks_mut(cols).zip(xv.chunks(cols)) {
                        for j in 0..cols {
                            gchunk[j] += gout[j] * scale * (xchunk[j] - mean[j]);
                        }
                    }
                }
            }
            Op::RowSum { x, rows, cols } => {
                if wants(x) {
                    let gx = acc(grads, x, rows * cols);
                    for (chunk, d) in gx.chunks_mut(cols.max(1)).zip(gout) {
                        chunk.iter_mut().for_each(|g| *g += d);
                    }
                }
            }
        }
    }
}

fn column_means(xv: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in xv.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

fn swap_middle(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let s = ((ai * b + bi) * c + ci) * d;
                let t = ((ai * c + ci) * b + bi) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
