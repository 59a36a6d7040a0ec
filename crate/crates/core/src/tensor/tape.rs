use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{gemm, window_out, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: (usize, usize),
    },
    AvgPool2d {
        input: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Elu {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Reshape {
        input: usize,
    },
    ConcatTime {
        a: usize,
        b: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Softmax {
        input: usize,
    },
    MatmulT {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Square {
        input: usize,
    },
    Sum {
        input: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation graph. Leaves may borrow their tensors (model parameters) for
/// the lifetime of the tape.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    stochastic: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` did not
    /// require gradients or is not connected to the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.idx).and_then(Option::take)
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::RankMismatch {
            op,
            expected: 4,
            shape: t.shape().to_vec(),
        }),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::RankMismatch {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        }),
    }
}

fn check_axis(op: &'static str, axis: usize, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            got,
        })
    }
}

/// Batch, feature and time extents of a rank-2 (`[F, T]`) or rank-3
/// (`[B, F, T]`) operand.
fn batched_ft(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [f, time] => Ok((1, f, time)),
        [b, f, time] => Ok((b, f, time)),
        _ => Err(Error::RankMismatch {
            op,
            expected: 3,
            shape: t.shape().to_vec(),
        }),
    }
}

#[inline]
fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Row-wise numerically stable softmax over the last axis.
pub(crate) fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (oh, ow): (usize, usize),
    col: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for r in 0..oh {
                    let src = ci * h * w + (r * sh + ki) * w + kj;
                    let out = &mut dst[r * ow..(r + 1) * ow];
                    if sw == 1 {
                        out.copy_from_slice(&x[src..src + ow]);
                    } else {
                        for (c, o) in out.iter_mut().enumerate() {
                            *o = x[src + c * sw];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for r in 0..oh {
                    let base = ci * h * w + (r * sh + ki) * w + kj;
                    for (c, &g) in src[r * ow..(r + 1) * ow].iter().enumerate() {
                        dx[base + c * sw] += g;
                    }
                }
            }
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any operation drew random numbers (training-mode dropout).
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.idx < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Records a constant input that never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Records an owned leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Records a borrowed leaf; `requires_grad` decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Current value of a recorded variable.
    ///
    /// # Panics
    /// When `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.idx(v).expect("Tape::value: variable from another tape");
        &self.nodes[idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].needs_grad).unwrap_or(false)
    }

    /// Valid cross-correlation. `input` is `[B, Cin, H, W]`, `weight` is
    /// `[Cout, Cin, kH, kW]` and `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: (usize, usize)) -> Result<Var> {
        const OP: &str = "conv2d";
        let (xi, wi, bi) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        let (batch, cin, h, width) = dims4(OP, x)?;
        let (cout, wcin, kh, kw) = dims4(OP, w)?;
        check_axis(OP, 1, wcin, cin)?;
        check_axis(OP, 0, cout, b.numel())?;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid(OP, "stride components must be >= 1"));
        }
        if kh > h {
            return Err(Error::ShapeMismatch { op: OP, axis: 2, expected: kh, got: h });
        }
        if kw > width {
            return Err(Error::ShapeMismatch { op: OP, axis: 3, expected: kw, got: width });
        }
        let oh = window_out(h, kh, stride.0);
        let ow = window_out(width, kw, stride.1);
        let (k, p) = (cin * kh * kw, oh * ow);
        let mut out = vec![0.0; batch * cout * p];
        let mut col = vec![0.0; k * p];
        let xs = cin * h * width;
        for n in 0..batch {
            im2col(
                &x.data()[n * xs..(n + 1) * xs],
                (cin, h, width),
                (kh, kw),
                stride,
                (oh, ow),
                &mut col,
            );
            let dst = &mut out[n * cout * p..(n + 1) * cout * p];
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
            gemm(cout, k, p, w.data(), false, &col, false, dst, 1.0);
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        Ok(self.push_op(
            value,
            Op::Conv2d { input: xi, weight: wi, bias: bi, stride },
            &[xi, wi, bi],
        ))
    }

    /// Mean over each `kernel` window, no padding.
    pub fn avg_pool2d(&mut self, input: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        const OP: &str = "avg_pool2d";
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let (batch, ch, h, w) = dims4(OP, x)?;
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid(OP, "kernel and stride must be >= 1"));
        }
        if kernel.0 > h {
            return Err(Error::ShapeMismatch { op: OP, axis: 2, expected: kernel.0, got: h });
        }
        if kernel.1 > w {
            return Err(Error::ShapeMismatch { op: OP, axis: 3, expected: kernel.1, got: w });
        }
        let oh = window_out(h, kernel.0, stride.0);
        let ow = window_out(w, kernel.1, stride.1);
        let norm = 1.0 / (kernel.0 * kernel.1) as f64;
        let mut out = vec![0.0; batch * ch * oh * ow];
        for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = 0.0;
                    for ki in 0..kernel.0 {
                        let start = (r * stride.0 + ki) * w + c * stride.1;
                        acc += plane[start..start + kernel.1].iter().sum::<f64>();
                    }
                    dst[r * ow + c] = acc * norm;
                }
            }
        }
        let value = Tensor::new(vec![batch, ch, oh, ow], out)?;
        Ok(self.push_op(value, Op::AvgPool2d { input: xi, kernel, stride }, &[xi]))
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| elu_scalar(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Elu { input: xi }, &[xi]))
    }

    /// `x · W + b` with `x: [B, N]`, `W: [N, M]`, `b: [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (xi, wi, bi) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        let (batch, n) = dims2(OP, x)?;
        let (wn, m) = dims2(OP, w)?;
        check_axis(OP, 1, wn, n)?;
        check_axis(OP, 0, m, b.numel())?;
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        gemm(batch, n, m, x.data(), false, w.data(), false, &mut out, 1.0);
        let value = Tensor::new(vec![batch, m], out)?;
        Ok(self.push_op(value, Op::Linear { input: xi, weight: wi, bias: bi }, &[xi, wi, bi]))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot view {:?} as {:?}", x.shape(), shape),
            ));
        }
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.push_op(value, Op::Reshape { input: xi }, &[xi]))
    }

    /// Collapses every axis after the first: `[B, ...] -> [B, N]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.nodes[self.idx(input)?].value.shape().to_vec();
        let batch = *shape.first().ok_or(Error::RankMismatch {
            op: "flatten",
            expected: 1,
            shape: shape.clone(),
        })?;
        let rest = shape[1..].iter().product();
        self.reshape(input, vec![batch, rest])
    }

    /// `[B, F, T1] ++ [B, F, T2] -> [B, F, T1 + T2]`, `a` first.
    pub fn concat_time(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_time";
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (ab, af, at) = match *av.shape() {
            [x, y, z] => (x, y, z),
            _ => return Err(Error::RankMismatch { op: OP, expected: 3, shape: av.shape().to_vec() }),
        };
        let (bb, bf, bt) = match *bv.shape() {
            [x, y, z] => (x, y, z),
            _ => return Err(Error::RankMismatch { op: OP, expected: 3, shape: bv.shape().to_vec() }),
        };
        check_axis(OP, 0, ab, bb)?;
        check_axis(OP, 1, af, bf)?;
        let t = at + bt;
        let mut out = Vec::with_capacity(ab * af * t);
        for (ra, rb) in av.data().chunks(at).zip(bv.data().chunks(bt)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![ab, af, t], out)?;
        Ok(self.push_op(value, Op::ConcatTime { a: ai, b: bi }, &[ai, bi]))
    }

    /// Inverted dropout. Outside training, or with `p == 0`, the input
    /// variable is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let xi = self.idx(input)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p);
        let x = &self.nodes[xi].value;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Dropout { input: xi, mask }, &[xi]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let width = *x.shape().last().ok_or(Error::RankMismatch {
            op: "softmax",
            expected: 2,
            shape: vec![],
        })?;
        let value = Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), width))?;
        Ok(self.push_op(value, Op::Softmax { input: xi }, &[xi]))
    }

    /// `aᵀ · b` for `a: [F, T1]`, `b: [F, T2]`, giving `[T1, T2]`. Rank-3
    /// operands `[B, F, T]` are multiplied sample by sample into `[B, T1, T2]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul_t";
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rank() != bv.rank() {
            return Err(Error::RankMismatch { op: OP, expected: av.rank(), shape: bv.shape().to_vec() });
        }
        let (batch, f, t1) = batched_ft(OP, av)?;
        let (bb, bf, t2) = batched_ft(OP, bv)?;
        let off = av.rank() - 2;
        if av.rank() == 3 {
            check_axis(OP, 0, batch, bb)?;
        }
        check_axis(OP, off, f, bf)?;
        let mut out = vec![0.0; batch * t1 * t2];
        for n in 0..batch {
            gemm(
                t1,
                f,
                t2,
                &av.data()[n * f * t1..(n + 1) * f * t1],
                true,
                &bv.data()[n * f * t2..(n + 1) * f * t2],
                false,
                &mut out[n * t1 * t2..(n + 1) * t1 * t2],
                0.0,
            );
        }
        let shape = if av.rank() == 3 { vec![batch, t1, t2] } else { vec![t1, t2] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::MatmulT { a: ai, b: bi }, &[ai, bi]))
    }

    fn same_shape(&self, op: &'static str, ai: usize, bi: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() != sb.len() {
            return Err(Error::RankMismatch { op, expected: sa.len(), shape: sb.to_vec() });
        }
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            check_axis(op, axis, x, y)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Scale { input: xi, factor }, &[xi]))
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Square { input: xi }, &[xi]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let total = self.nodes[xi].value.data().iter().sum();
        Ok(self.push_op(Tensor::scalar(total), Op::Sum { input: xi }, &[xi]))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.nodes[self.idx(input)?].value.numel() as f64;
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n)
    }

    /// Batch-mean cross-entropy of softmax(`logits`) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let li = self.idx(logits)?;
        let x = &self.nodes[li].value;
        let (batch, classes) = dims2(OP, x)?;
        check_axis(OP, 0, batch, targets.len())?;
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(OP, format!("label {bad} out of range for {classes} classes")));
        }
        let probs = softmax_rows(x.data(), classes);
        let mut total = 0.0;
        for (row, &t) in x.data().chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push_op(
            value,
            Op::CrossEntropy { logits: li, targets: targets.to_vec(), probs },
            &[li],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let shape = self.nodes[li].value.shape();
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[li].needs_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> &'g mut Vec<f64> {
        let len = self.nodes[idx].value.numel();
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contrib: impl Iterator<Item = f64>) {
        if !self.wants(idx) {
            return;
        }
        for (d, c) in self.buf(grads, idx).iter_mut().zip(contrib) {
            *d += c;
        }
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let (batch, cin, h, width) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let (k, p) = (cin * kh * kw, oh * ow);
                let xs = cin * h * width;
                if self.wants(*bias) {
                    let db = self.buf(grads, *bias);
                    for gb in g.chunks(cout * p) {
                        for (co, row) in gb.chunks(p).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                    }
                }
                let need_w = self.wants(*weight);
                let need_x = self.wants(*input);
                if !need_w && !need_x {
                    return;
                }
                let mut col = vec![0.0; k * p];
                for n in 0..batch {
                    let gn = &g[n * cout * p..(n + 1) * cout * p];
                    if need_w {
                        im2col(&x.data()[n * xs..(n + 1) * xs], (cin, h, width), (kh, kw), *stride, (oh, ow), &mut col);
                        let dw = self.buf(grads, *weight);
                        gemm(cout, p, k, gn, false, &col, true, dw, 1.0);
                    }
                    if need_x {
                        gemm(k, cout, p, w.data(), true, gn, false, &mut col, 0.0);
                        let dx = self.buf(grads, *input);
                        col2im_add(&col, (cin, h, width), (kh, kw), *stride, (oh, ow), &mut dx[n * xs..(n + 1) * xs]);
                    }
                }
            }
            Op::AvgPool2d { input, kernel, stride } => {
                if !self.wants(*input) {
                    return;
                }
                let x = &self.nodes[*input].value;
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let norm = 1.0 / (kernel.0 * kernel.1) as f64;
                let dx = self.buf(grads, *input);
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for r in 0..oh {
                        for c in 0..ow {
                            let v = gp[r * ow + c] * norm;
                            for ki in 0..kernel.0 {
                                let start = (r * stride.0 + ki) * w + c * stride.1;
                                for d in &mut plane[start..start + kernel.1] {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::Elu { input } => {
                let x = self.nodes[*input].value.data();
                let y = node.value.data();
                let contrib = g.iter().zip(x.iter().zip(y)).map(|(gv, (&xv, &yv))| {
                    // derivative at exactly zero is taken as 1
                    if xv >= 0.0 { *gv } else { gv * (yv + 1.0) }
                });
                self.accumulate(grads, *input, contrib);
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let (batch, n) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[1];
                if self.wants(*bias) {
                    let db = self.buf(grads, *bias);
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if self.wants(*weight) {
                    let dw = self.buf(grads, *weight);
                    gemm(n, batch, m, x.data(), true, g, false, dw, 1.0);
                }
                if self.wants(*input) {
                    let dx = self.buf(grads, *input);
                    gemm(batch, m, n, g, false, w.data(), true, dx, 1.0);
                }
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g.iter().copied());
            }
            Op::ConcatTime { a, b } => {
                let at = *self.nodes[*a].value.shape().last().unwrap_or(&1);
                let bt = *self.nodes[*b].value.shape().last().unwrap_or(&1);
                let rows = g.chunks(at + bt);
                if self.wants(*a) {
                    let contrib = rows.clone().flat_map(|r| r[..at].iter().copied());
                    self.accumulate(grads, *a, contrib);
                }
                if self.wants(*b) {
                    let contrib = rows.flat_map(|r| r[at..].iter().copied());
                    self.accumulate(grads, *b, contrib);
                }
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g.iter().zip(mask).map(|(a, b)| a * b));
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(width).zip(g.chunks(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *input, dx.into_iter());
            }
            Op::MatmulT { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (batch, f, t1) = batched_ft("matmul_t", av).expect("validated in forward");
                let t2 = *bv.shape().last().unwrap_or(&1);
                for n in 0..batch {
                    let gn = &g[n * t1 * t2..(n + 1) * t1 * t2];
                    if self.wants(*a) {
                        let da = self.buf(grads, *a);
                        gemm(f, t2, t1, &bv.data()[n * f * t2..(n + 1) * f * t2], false, gn, true, &mut da[n * f * t1..(n + 1) * f * t1], 1.0);
                    }
                    if self.wants(*b) {
                        let db = self.buf(grads, *b);
                        gemm(f, t1, t2, &av.data()[n * f * t1..(n + 1) * f * t1], false, gn, false, &mut db[n * f * t2..(n + 1) * f * t2], 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y));
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y));
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.iter().map(|v| v * factor));
            }
            Op::Square { input } => {
                let x = self.nodes[*input].value.data();
                self.accumulate(grads, *input, g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv));
            }
            Op::Sum { input } => {
                let n = self.nodes[*input].value.numel();
                self.accumulate(grads, *input, std::iter::repeat_n(g[0], n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                let contrib = probs.chunks(classes).zip(targets).flat_map(|(row, &t)| {
                    row.iter().enumerate().map(move |(c, &p)| {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        (p - onehot) * scale
                    })
                });
                self.accumulate(grads, *logits, contrib);
            }
        }
    }
}
