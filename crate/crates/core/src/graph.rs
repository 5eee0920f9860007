//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value and whatever it needs to run backwards;
//! node indices are therefore already a topological order, and
//! [`Graph::backward`] is a single reverse sweep that accumulates (`+=`)
//! gradients into every node that requires them.
//!
//! Storage is `f32`. Row reductions (means, variances, softmax
//! normalisers, attention dot products, losses) accumulate in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Epsilon inside the square root of batch and layer normalisation.
pub const NORM_EPS: f32 = 1e-5;
/// Weight of the newest batch in the batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Exponential moving averages used by batch norm in `Eval` mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    BatchTrain,
    BatchEval,
    Layer,
}

#[derive(Default)]
enum Op {
    #[default]
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Sum(Var),
    Tanh(Var),
    Relu(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
        divisor: f32,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        kind: NormKind,
    },
    CausalConv {
        x: Var,
        filters: Var,
        batch: usize,
        len: usize,
        c_in: usize,
        c_out: usize,
        taps: usize,
        dilation: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    TimeStep {
        x: Var,
        len: usize,
        dim: usize,
        t: usize,
    },
    Stack {
        parts: Vec<Var>,
        dim: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of tensor operations supporting one reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}


impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ----- operations -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.is_empty() || bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::MatMul { a, b, m, k, n },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out: Vec<f32> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(t, rg, Op::AddBias { x, bias }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| f64::from(v)).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s as f32), rg, Op::Sum(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, rg, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, rg, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Gathers rows of `table[V, d]`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sh = self.shape(table);
        if sh.len() != 2 {
            return Err(Error::shape("embedding", format!("table {sh:?}")));
        }
        let (rows, d) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "embedding",
                index: bad,
                limit: rows,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            t,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let n = src.last_dim();
        let mut out = vec![0.0f32; src.numel()];
        for (row, dst) in src.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(row, dst);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    /// Sum over rows of `-log softmax(logits)[target]`, divided by `divisor`.
    ///
    /// With `M` sequences of `N` positions flattened into `M·N` rows and
    /// `divisor = M`, this is the per-sequence summed, sequence-averaged
    /// cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], divisor: f32) -> Result<Var> {
        let src = self.value(logits);
        let v = src.last_dim();
        let rows = src.rows();
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                limit: v,
            });
        }
        if !src.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = vec![0.0f32; src.numel()];
        let mut total = 0.0f64;
        for ((row, dst), &t) in src.data().chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&l| f64::from(l - max).exp()).sum();
            let lse = f64::from(max) + z.ln();
            total += lse - f64::from(row[t]);
            for (p, &l) in dst.iter_mut().zip(row) {
                *p = (f64::from(l - max).exp() / z) as f32;
            }
        }
        let loss = (total / f64::from(divisor)) as f32;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                divisor,
            },
        ))
    }

    /// Batch normalisation over all leading axes, per channel of the last
    /// axis. In `Train` mode the returned [`BatchStats`] should be folded
    /// into `running` by the caller once the step is accepted.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: &RunningStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let src = self.value(x);
        let c = src.last_dim();
        let n = src.rows();
        self.check_affine("batch_norm", gamma, beta, c)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm", "running stats width"));
        }
        let (mean, var, kind) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in Train mode needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0f64; c];
                for row in src.data().chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += f64::from(v);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0f64; c];
                for row in src.data().chunks(c) {
                    for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (f64::from(v) - m).powi(2);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, NormKind::BatchTrain)
            }
            NormMode::Eval => (
                running.mean.iter().map(|&v| f64::from(v)).collect(),
                running.var.iter().map(|&v| f64::from(v)).collect(),
                NormKind::BatchEval,
            ),
        };
        let inv_std: Vec<f32> = var
            .iter()
            .map(|v| (1.0 / (v + f64::from(NORM_EPS)).sqrt()) as f32)
            .collect();
        let mut xhat = vec![0.0f32; src.numel()];
        for (row, dst) in src.data().chunks(c).zip(xhat.chunks_mut(c)) {
            for j in 0..c {
                dst[j] = ((f64::from(row[j]) - mean[j]) as f32) * inv_std[j];
            }
        }
        let out = affine(&xhat, self.data(gamma), self.data(beta));
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let stats = (kind == NormKind::BatchTrain).then(|| BatchStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
        });
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(
            t,
            rg,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
        );
        Ok((v, stats))
    }

    /// Normalises each row of `x[..., d]` to zero mean and unit variance,
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        self.check_affine("layer_norm", gamma, beta, d)?;
        let mut xhat = vec![0.0f32; src.numel()];
        let mut inv_std = Vec::with_capacity(src.rows());
        for (row, dst) in src.data().chunks(d).zip(xhat.chunks_mut(d)) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let is = (1.0 / (var + f64::from(NORM_EPS)).sqrt()) as f32;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = ((f64::from(v) - mean) as f32) * is;
            }
            inv_std.push(is);
        }
        let out = affine(&xhat, self.data(gamma), self.data(beta));
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
        ))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, width: usize) -> Result<()> {
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape(
                op,
                format!(
                    "gamma {:?} / beta {:?} for width {width}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    /// Dilated causal convolution.
    ///
    /// `x[B, T, c_in]`, `filters[K, c_in, c_out]`:
    /// `y[b, t] = Σ_k x[b, t - dilation·k] · filters[k]`, with `x` taken as
    /// zero before the start of each sequence.
    pub fn causal_conv1d(&mut self, x: Var, filters: Var, dilation: usize) -> Result<Var> {
        let (xs, fs) = (self.shape(x), self.shape(filters));
        if xs.len() != 3 || fs.len() != 3 || xs[2] != fs[1] || fs[0] == 0 || dilation == 0 {
            return Err(Error::shape(
                "causal_conv1d",
                format!("x {xs:?}, filters {fs:?}, dilation {dilation}"),
            ));
        }
        let (batch, len, c_in) = (xs[0], xs[1], xs[2]);
        let (taps, c_out) = (fs[0], fs[2]);
        let mut out = vec![0.0f32; batch * len * c_out];
        let xd = self.data(x);
        let fd = self.data(filters);
        for b in 0..batch {
            for k in 0..taps {
                let shift = k * dilation;
                if shift >= len {
                    break;
                }
                let m = len - shift;
                let src = &xd[b * len * c_in..(b * len + m) * c_in];
                let w = &fd[k * c_in * c_out..(k + 1) * c_in * c_out];
                let dst = &mut out[(b * len + shift) * c_out..(b + 1) * len * c_out];
                gemm(m, c_in, c_out, src, false, w, false, dst, true);
            }
        }
        let t = Tensor::new(vec![batch, len, c_out], out)?;
        let rg = self.needs(&[x, filters]);
        Ok(self.push(
            t,
            rg,
            Op::CausalConv {
                x,
                filters,
                batch,
                len,
                c_in,
                c_out,
                taps,
                dilation,
            },
        ))
    }

    /// Causally masked multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[B, T, d]` with `d` split into `heads` contiguous
    /// slices. Position `t` attends to positions `0..=t` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::shape(
                "causal_attention",
                format!("q {qs:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (batch, len, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; batch * heads * len * len];
        let mut out = vec![0.0f32; batch * len * d];
        let mut scores = vec![0.0f64; len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..len {
                    let qrow = &qd[(b * len + t) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let krow = &kd[(b * len + s) * d + off..][..dh];
                        let dot: f64 = qrow
                            .iter()
                            .zip(krow)
                            .map(|(&a, &c)| f64::from(a) * f64::from(c))
                            .sum();
                        scores[s] = dot * scale;
                        max = max.max(scores[s]);
                    }
                    let z: f64 = scores[..=t].iter().map(|s| (s - max).exp()).sum();
                    let prow = &mut probs[((b * heads + h) * len + t) * len..][..len];
                    for s in 0..=t {
                        prow[s] = ((scores[s] - max).exp() / z) as f32;
                    }
                    let orow = &mut out[(b * len + t) * d + off..][..dh];
                    for s in 0..=t {
                        let p = prow[s];
                        let vrow = &vd[(b * len + s) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, len, d], out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            t,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                len,
                heads,
                probs,
            },
        ))
    }

    /// Slice `x[B, T, D]` at time `t`, giving `[B, D]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let sh = self.shape(x);
        if sh.len() != 3 || t >= sh[1] {
            return Err(Error::shape("time_step", format!("{sh:?} at t={t}")));
        }
        let (batch, len, dim) = (sh[0], sh[1], sh[2]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            out.extend_from_slice(&src[(b * len + t) * dim..][..dim]);
        }
        let tensor = Tensor::new(vec![batch, dim], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(tensor, rg, Op::TimeStep { x, len, dim, t }))
    }

    /// Stacks `T` tensors of shape `[B, D]` into `[B, T, D]`.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack_steps", "no parts"))?;
        let sh = self.shape(*first).to_vec();
        if sh.len() != 2 || parts.iter().any(|p| self.shape(*p) != sh.as_slice()) {
            return Err(Error::shape("stack_steps", "parts must share a [B, D] shape"));
        }
        let (batch, dim) = (sh[0], sh[1]);
        let len = parts.len();
        let mut out = vec![0.0f32; batch * len * dim];
        for (t, p) in parts.iter().enumerate() {
            let src = self.data(*p);
            for b in 0..batch {
                out[(b * len + t) * dim..][..dim].copy_from_slice(&src[b * dim..][..dim]);
            }
        }
        let tensor = Tensor::new(vec![batch, len, dim], out)?;
        let rg = self.needs(parts);
        Ok(self.push(
            tensor,
            rg,
            Op::Stack {
                parts: parts.to_vec(),
                dim,
            },
        ))
    }

    // ----- backward ---------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::take(&mut self.nodes[i].op);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            node.grad
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.numel()]),
        )
    }

    fn put_grad(&mut self, v: Var, g: Vec<f32>) {
        self.nodes[v.0].grad = Some(g);
    }

    /// Accumulates `f(grad_buffer)` into `v` if it requires a gradient.
    fn accum(&mut self, v: Var, f: impl FnOnce(&Self, &mut [f32])) {
        if let Some(mut buf) = self.take_grad(v) {
            f(self, &mut buf);
            self.put_grad(v, buf);
        }
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                self.accum(a, |s, ga| gemm(m, n, k, g, false, s.data(b), true, ga, true));
                self.accum(b, |s, gb| gemm(k, m, n, s.data(a), true, g, false, gb, true));
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.accum(v, |_, ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            &Op::AddBias { x, bias } => {
                self.accum(x, |_, gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.accum(bias, |_, gb| {
                    let n = gb.len();
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += f64::from(v);
                        }
                    }
                    gb.iter_mut().zip(acc).for_each(|(d, s)| *d += s as f32);
                });
            }
            &Op::Mul(a, b) => {
                self.accum(a, |s, ga| {
                    for ((d, &gy), &y) in ga.iter_mut().zip(g).zip(s.data(b)) {
                        *d += gy * y;
                    }
                });
                self.accum(b, |s, gb| {
                    for ((d, &gy), &x) in gb.iter_mut().zip(g).zip(s.data(a)) {
                        *d += gy * x;
                    }
                });
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                self.accum(x, |_, gx| gx.iter_mut().for_each(|d| *d += g0));
            }
            &Op::Tanh(x) => {
                self.accum(x, |s, gx| {
                    let y = s.nodes[i].value.data();
                    for ((d, &gy), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gy * (1.0 - yv * yv);
                    }
                });
            }
            &Op::Relu(x) => {
                self.accum(x, |s, gx| {
                    for ((d, &gy), &xv) in gx.iter_mut().zip(g).zip(s.data(x)) {
                        if xv > 0.0 {
                            *d += gy;
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accum(x, |_, gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Embedding { table, ids } => {
                self.accum(*table, |_, gt| {
                    let d = g.len() / ids.len().max(1);
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (dst, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *dst += v;
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                self.accum(x, |s, gx| {
                    let y = s.nodes[i].value.data();
                    let n = s.nodes[i].value.last_dim();
                    for ((dst, gy), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gy
                            .iter()
                            .zip(yr)
                            .map(|(&a, &b)| f64::from(a) * f64::from(b))
                            .sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gy[j] - dot as f32);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                divisor,
            } => {
                let scale = g[0] / divisor;
                self.accum(*logits, |_, gl| {
                    let v = probs.len() / targets.len().max(1);
                    for ((dst, p), &t) in gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dst[j] += scale * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => self.norm_backward(*x, *gamma, *beta, xhat, inv_std, *kind, g),
            &Op::CausalConv {
                x,
                filters,
                batch,
                len,
                c_in,
                c_out,
                taps,
                dilation,
            } => {
                self.accum(x, |s, gx| {
                    let fd = s.data(filters);
                    for b in 0..batch {
                        for k in 0..taps {
                            let shift = k * dilation;
                            if shift >= len {
                                break;
                            }
                            let m = len - shift;
                            let gy = &g[(b * len + shift) * c_out..(b + 1) * len * c_out];
                            let w = &fd[k * c_in * c_out..(k + 1) * c_in * c_out];
                            let dst = &mut gx[b * len * c_in..(b * len + m) * c_in];
                            gemm(m, c_out, c_in, gy, false, w, true, dst, true);
                        }
                    }
                });
                self.accum(filters, |s, gf| {
                    let xd = s.data(x);
                    for b in 0..batch {
                        for k in 0..taps {
                            let shift = k * dilation;
                            if shift >= len {
                                break;
                            }
                            let m = len - shift;
                            let gy = &g[(b * len + shift) * c_out..(b + 1) * len * c_out];
                            let src = &xd[b * len * c_in..(b * len + m) * c_in];
                            let dst = &mut gf[k * c_in * c_out..(k + 1) * c_in * c_out];
                            gemm(c_in, m, c_out, src, true, gy, false, dst, true);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                len,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *len, *heads, probs, g),
            &Op::TimeStep { x, len, dim, t } => {
                self.accum(x, |_, gx| {
                    for (b, row) in g.chunks(dim).enumerate() {
                        let dst = &mut gx[(b * len + t) * dim..][..dim];
                        dst.iter_mut().zip(row).for_each(|(a, c)| *a += c);
                    }
                });
            }
            Op::Stack { parts, dim } => {
                let len = parts.len();
                let dim = *dim;
                for (t, p) in parts.iter().enumerate() {
                    self.accum(*p, |_, gp| {
                        for (b, dst) in gp.chunks_mut(dim).enumerate() {
                            let src = &g[(b * len + t) * dim..][..dim];
                            dst.iter_mut().zip(src).for_each(|(a, c)| *a += c);
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f32],
        inv_std: &[f32],
        kind: NormKind,
        g: &[f32],
    ) {
        let c = self.data(gamma).len();
        let rows = xhat.len() / c;
        self.accum(gamma, |_, gg| {
            let mut acc = vec![0.0f64; c];
            for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    acc[j] += f64::from(gr[j]) * f64::from(xr[j]);
                }
            }
            gg.iter_mut().zip(acc).for_each(|(d, s)| *d += s as f32);
        });
        self.accum(beta, |_, gb| {
            let mut acc = vec![0.0f64; c];
            for gr in g.chunks(c) {
                for (s, &v) in acc.iter_mut().zip(gr) {
                    *s += f64::from(v);
                }
            }
            gb.iter_mut().zip(acc).for_each(|(d, s)| *d += s as f32);
        });
        self.accum(x, |s, gx| {
            let gam = s.data(gamma);
            match kind {
                NormKind::BatchEval => {
                    for (dst, gr) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dst[j] += gr[j] * gam[j] * inv_std[j];
                        }
                    }
                }
                NormKind::BatchTrain => {
                    let mut sum_d = vec![0.0f64; c];
                    let mut sum_dx = vec![0.0f64; c];
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let d = f64::from(gr[j] * gam[j]);
                            sum_d[j] += d;
                            sum_dx[j] += d * f64::from(xr[j]);
                        }
                    }
                    let n = rows as f64;
                    for ((dst, gr), xr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let d = f64::from(gr[j] * gam[j]);
                            let v = f64::from(inv_std[j]) / n
                                * (n * d - sum_d[j] - f64::from(xr[j]) * sum_dx[j]);
                            dst[j] += v as f32;
                        }
                    }
                }
                NormKind::Layer => {
                    let n = c as f64;
                    for (((dst, gr), xr), &is) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(inv_std)
                    {
                        let mut sum_d = 0.0f64;
                        let mut sum_dx = 0.0f64;
                        for j in 0..c {
                            let d = f64::from(gr[j] * gam[j]);
                            sum_d += d;
                            sum_dx += d * f64::from(xr[j]);
                        }
                        for j in 0..c {
                            let d = f64::from(gr[j] * gam[j]);
                            let v = f64::from(is) / n * (n * d - sum_d - f64::from(xr[j]) * sum_dx);
                            dst[j] += v as f32;
                        }
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: &[f32],
        g: &[f32],
    ) {
        let d = self.value(q).last_dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0f32; qd.len()];
        let mut dk = vec![0.0f32; kd.len()];
        let mut dv = vec![0.0f32; vd.len()];
        let mut dp = vec![0.0f64; len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..len {
                    let prow = &probs[((b * heads + h) * len + t) * len..][..len];
                    let gout = &g[(b * len + t) * d + off..][..dh];
                    let mut dsum = 0.0f64;
                    for s in 0..=t {
                        let vrow = &vd[(b * len + s) * d + off..][..dh];
                        dp[s] = gout
                            .iter()
                            .zip(vrow)
                            .map(|(&a, &c)| f64::from(a) * f64::from(c))
                            .sum();
                        dsum += f64::from(prow[s]) * dp[s];
                        let dvrow = &mut dv[(b * len + s) * d + off..][..dh];
                        for (dst, &go) in dvrow.iter_mut().zip(gout) {
                            *dst += prow[s] * go;
                        }
                    }
                    for s in 0..=t {
                        let ds = (f64::from(prow[s]) * (dp[s] - dsum) * scale) as f32;
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..dh {
                            dq[(b * len + t) * d + off + j] += ds * kd[(b * len + s) * d + off + j];
                            dk[(b * len + s) * d + off + j] += ds * qd[(b * len + t) * d + off + j];
                        }
                    }
                }
            }
        }
        self.accum_all([(q, dq), (k, dk), (v, dv)]);
    }

    fn accum_all<const N: usize>(&mut self, items: [(Var, Vec<f32>); N]) {
        for (var, buf) in items {
            self.accum(var, |_, gv| gv.iter_mut().zip(&buf).for_each(|(a, c)| *a += c));
        }
    }
}

fn affine(xhat: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let c = gamma.len();
    xhat.chunks(c)
        .flat_map(|row| {
            row.iter()
                .zip(gamma)
                .zip(beta)
                .map(|((x, g), b)| x * g + b)
        })
        .collect()
}

/// Writes `softmax(row)` into `dst` using max subtraction.
pub fn softmax_into(row: &[f32], dst: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let z: f64 = row.iter().map(|&l| f64::from(l - max).exp()).sum();
    for (p, &l) in dst.iter_mut().zip(row) {
        *p = (f64::from(l - max).exp() / z) as f32;
    }
}
