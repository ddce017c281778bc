//! Dense `f64` tensors and a reverse-mode automatic differentiation tape.
//!
//! A [`Tape`] owns every value produced during a forward pass in an arena of
//! nodes; [`Var`] is an index into that arena. Calling [`Tape::backward`] on
//! a scalar node replays the recorded operations in reverse and accumulates
//! `d loss / d node` into each node's gradient slot.
//!
//! Conventions:
//! - All storage is 64-bit, row-major, contiguous.
//! - Reductions run in a fixed sequential order, so forward results are
//!   bitwise deterministic for fixed inputs.
//! - Broadcasting is right-aligned: a shape may be expanded against a target
//!   when each of its dimensions equals the target dimension or 1 (missing
//!   leading dimensions are treated as 1).
//! - At non-differentiable kinks (`relu`/`max_const` at the threshold, and
//!   anything built from them such as the pinball loss) the subgradient 0 is
//!   used.
//! - In debug builds every forward op asserts its output is finite; release
//!   builds compile the check out and rely on the trainer's NaN abort.
//!
//! A `Tape` and its nodes are single-threaded; independent tapes may live on
//! different threads.

use rand::Rng;
use rand_distr::StandardNormal;

/// Plain dense tensor: a shape and row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and data; `product(shape)` must equal `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match {} values", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { data: vec![0.0; n], shape }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { data: vec![value; n], shape }
    }

    /// Scalar tensor (empty shape, one element).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// Standard normal draws.
    pub fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape;
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    MaxConst { x: Var, c: f64 },
    MulScalar { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum(Var),
    Mean(Var),
    Broadcast { x: Var },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Deconv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
}

/// Reverse-mode tape; see module docs.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {} (first offender at index {:?})",
            op_name(&op),
            data.iter().position(|v| !v.is_finite())
        );
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, grad: None, op });
        Var(id)
    }

    /// Record an input/parameter value.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.nodes[v.0].shape.clone(), data: self.nodes[v.0].data.clone() }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- elementwise binary ----

    fn zip2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{}: shape mismatch {:?} vs {:?}",
            op_name(&op),
            self.nodes[a.0].shape,
            self.nodes[b.0].shape
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(vec![m, n], data, Op::Matmul { a, b, m, k, n })
    }

    // ---- elementwise unary ----

    fn map1(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map1(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; non-positive inputs produce non-finite values caught by
    /// the debug check (and by the trainer's NaN abort in release).
    pub fn log(&mut self, x: Var) -> Var {
        self.map1(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map1(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map1(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map1(x, |v| -v, Op::Neg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map1(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map1(x, sigmoid, Op::Sigmoid(x))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.map1(x, |v| v.max(c), Op::MaxConst { x, c })
    }

    /// Elementwise `min(x, c)`, composed as `-max(-x, -c)`.
    pub fn min_const(&mut self, x: Var, c: f64) -> Var {
        let nx = self.neg(x);
        let m = self.max_const(nx, -c);
        self.neg(m)
    }

    /// Elementwise clamp to `[lo, hi]`; subgradient 0 outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let upper = self.min_const(x, hi);
        self.max_const(upper, lo)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map1(x, |v| v * c, Op::MulScalar { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map1(x, |v| v + c, Op::AddScalar { x })
    }

    // ---- reductions ----

    /// Sum of all elements (sequential order), scalar result.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0;
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        self.push(vec![], vec![acc], Op::Sum(x))
    }

    /// Mean of all elements, scalar result.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let mut acc = 0.0;
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        self.push(vec![], vec![acc / n as f64], Op::Mean(x))
    }

    // ---- shape ----

    /// Right-aligned broadcast of `x` to `target`.
    pub fn broadcast(&mut self, x: Var, target: &[usize]) -> Var {
        let from = self.nodes[x.0].shape.clone();
        assert!(
            broadcast_compatible(&from, target),
            "broadcast: cannot expand {from:?} to {target:?}"
        );
        let data = broadcast_data(&self.nodes[x.0].data, &from, target);
        self.push(target.to_vec(), data, Op::Broadcast { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.nodes[x.0].data.len(),
            "reshape: {:?} to {shape:?}",
            self.nodes[x.0].shape
        );
        let data = self.nodes[x.0].data.clone();
        self.push(shape, data, Op::Reshape(x))
    }

    /// Contiguous window `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        assert!(axis < shape.len(), "slice: axis {axis} out of rank {}", shape.len());
        assert!(start + len <= shape[axis], "slice: window out of bounds");
        let (outer, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = &self.nodes[x.0].data;
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        self.push(out_shape, data, Op::Slice { x, axis, start, len })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let first = self.nodes[xs[0].0].shape.clone();
        assert!(axis < first.len(), "concat: axis {axis} out of rank {}", first.len());
        let mut axis_total = 0;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: shape mismatch at dim {d}");
            }
            axis_total += s[axis];
        }
        let (outer, inner) = split_at_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in xs {
                let s = &self.nodes[v.0].shape;
                let base = o * s[axis] * inner;
                data.extend_from_slice(&self.nodes[v.0].data[base..base + s[axis] * inner]);
            }
        }
        self.push(out_shape, data, Op::Concat { xs: xs.to_vec(), axis })
    }

    // ---- structured ops ----

    /// Cross-correlation (no kernel flip): `x [B,Cin,H,W]`, `w
    /// [Cout,Cin,KH,KW]`, `b [Cout]`, zero padding. Output spatial size is
    /// `(H + 2*pad - KH) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: need 4-d input and weight");
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert_eq!(self.nodes[b.0].shape, vec![cout], "conv2d: bias shape");
        let (oh, ow) = conv_out_size(h, wd, kh, kw, stride, pad);
        let ckk = cin * kh * kw;
        let mut out = vec![0.0; bsz * cout * oh * ow];
        let wmat = &self.nodes[w.0].data;
        let bias = &self.nodes[b.0].data;
        for i in 0..bsz {
            let xi = &self.nodes[x.0].data[i * cin * h * wd..(i + 1) * cin * h * wd];
            let cols = im2col(xi, cin, h, wd, kh, kw, stride, pad);
            let y = matmul(wmat, &cols, cout, ckk, oh * ow);
            let dst = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            for c in 0..cout {
                for p in 0..oh * ow {
                    dst[c * oh * ow + p] = y[c * oh * ow + p] + bias[c];
                }
            }
        }
        self.push(vec![bsz, cout, oh, ow], out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]): `x
    /// [B,Cin,H,W]`, `w [Cin,Cout,KH,KW]`, `b [Cout]`. Output spatial size
    /// is `(H - 1)*stride - 2*pad + KH`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        assert!(xs.len() == 4 && ws.len() == 4, "deconv2d: need 4-d input and weight");
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (wcin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, wcin, "deconv2d: channel mismatch");
        assert_eq!(self.nodes[b.0].shape, vec![cout], "deconv2d: bias shape");
        assert!((h - 1) * stride + kh > 2 * pad, "deconv2d: incompatible geometry");
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        // Geometry must invert: a conv over the output recovers the input size.
        let (back_h, back_w) = conv_out_size(oh, ow, kh, kw, stride, pad);
        assert_eq!((back_h, back_w), (h, wd), "deconv2d: incompatible geometry");
        let ckk = cout * kh * kw;
        let mut out = vec![0.0; bsz * cout * oh * ow];
        let wdat = &self.nodes[w.0].data;
        let bias = &self.nodes[b.0].data;
        for i in 0..bsz {
            let xi = &self.nodes[x.0].data[i * cin * h * wd..(i + 1) * cin * h * wd];
            // cols = W^T (viewed [cin, cout*kh*kw]) times x (viewed [cin, h*w])
            let cols = matmul_transpose_a(wdat, xi, cin, ckk, h * wd);
            let img = col2im(&cols, cout, oh, ow, kh, kw, stride, pad);
            let dst = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            for c in 0..cout {
                for p in 0..oh * ow {
                    dst[c * oh * ow + p] = img[c * oh * ow + p] + bias[c];
                }
            }
        }
        self.push(vec![bsz, cout, oh, ow], out, Op::Deconv2d { x, w, b, stride, pad })
    }

    /// Batch normalization over `(B,H,W)` per channel using batch
    /// statistics. Returns the output plus the per-channel batch mean and
    /// biased variance so the caller can update running statistics.
    /// Requires batch size >= 2.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xs = self.nodes[x.0].shape.clone();
        assert_eq!(xs.len(), 4, "batchnorm: need [B,C,H,W]");
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(bsz >= 2, "batchnorm: batch of {bsz} in train mode (need >= 2)");
        assert_eq!(self.nodes[gamma.0].shape, vec![c], "batchnorm: gamma shape");
        assert_eq!(self.nodes[beta.0].shape, vec![c], "batchnorm: beta shape");
        let n = bsz * h * w;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let xd = &self.nodes[x.0].data;
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..bsz {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    acc += xd[base + p];
                }
            }
            mean[ch] = acc / n as f64;
            let mut vacc = 0.0;
            for i in 0..bsz {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    let d = xd[base + p] - mean[ch];
                    vacc += d * d;
                }
            }
            var[ch] = vacc / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; xd.len()];
        for i in 0..bsz {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    let xhat = (xd[base + p] - mean[ch]) * inv_std[ch];
                    out[base + p] = gd[ch] * xhat + bd[ch];
                }
            }
        }
        let v = self.push(
            xs,
            out,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), inv_std },
        );
        (v, mean, var)
    }

    // ---- backward ----

    /// Populate gradients of every node reachable from `loss`.
    ///
    /// Panics if `loss` is not scalar or if called twice on the same tape.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward: loss must be scalar");
        assert!(!self.backward_done, "backward: called twice on the same tape");
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(d_out) = self.nodes[id].grad.clone() else { continue };
            // backward runs once per tape, so ops can be consumed in place.
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(a, &d_out);
                    self.acc(b, &d_out);
                }
                Op::Sub(a, b) => {
                    self.acc(a, &d_out);
                    let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                    self.acc(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        d_out.iter().zip(&self.nodes[b.0].data).map(|(d, v)| d * v).collect();
                    let db: Vec<f64> =
                        d_out.iter().zip(&self.nodes[a.0].data).map(|(d, v)| d * v).collect();
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Matmul { a, b, m, k, n } => {
                    // dA = dY B^T ; dB = A^T dY
                    let da = matmul_transpose_b(&d_out, &self.nodes[b.0].data, m, n, k);
                    let db = matmul_transpose_a(&self.nodes[a.0].data, &d_out, m, k, n);
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Exp(x) => {
                    let d: Vec<f64> =
                        d_out.iter().zip(&self.nodes[id].data).map(|(d, y)| d * y).collect();
                    self.acc(x, &d);
                }
                Op::Log(x) => {
                    let d: Vec<f64> =
                        d_out.iter().zip(&self.nodes[x.0].data).map(|(d, v)| d / v).collect();
                    self.acc(x, &d);
                }
                Op::Square(x) => {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(d, v)| 2.0 * v * d)
                        .collect();
                    self.acc(x, &d);
                }
                Op::Sqrt(x) => {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(d, y)| 0.5 / y * d)
                        .collect();
                    self.acc(x, &d);
                }
                Op::Neg(x) => {
                    let d: Vec<f64> = d_out.iter().map(|v| -v).collect();
                    self.acc(x, &d);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    self.acc(x, &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(d, y)| d * y * (1.0 - y))
                        .collect();
                    self.acc(x, &d);
                }
                Op::MaxConst { x, c } => {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(d, &v)| if v > c { *d } else { 0.0 })
                        .collect();
                    self.acc(x, &d);
                }
                Op::MulScalar { x, c } => {
                    let d: Vec<f64> = d_out.iter().map(|v| v * c).collect();
                    self.acc(x, &d);
                }
                Op::AddScalar { x } => {
                    self.acc(x, &d_out);
                }
                Op::Sum(x) => {
                    let d = vec![d_out[0]; self.nodes[x.0].data.len()];
                    self.acc(x, &d);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].data.len();
                    let d = vec![d_out[0] / n as f64; n];
                    self.acc(x, &d);
                }
                Op::Broadcast { x } => {
                    let d = reduce_to_shape(&d_out, &self.nodes[id].shape, &self.nodes[x.0].shape);
                    self.acc(x, &d);
                }
                Op::Reshape(x) => {
                    self.acc(x, &d_out);
                }
                Op::Slice { x, axis, start, len } => {
                    let shape = self.nodes[x.0].shape.clone();
                    let (outer, inner) = split_at_axis(&shape, axis);
                    let mut d = vec![0.0; self.nodes[x.0].data.len()];
                    for o in 0..outer {
                        let dst = (o * shape[axis] + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&d_out[src..src + len * inner]);
                    }
                    self.acc(x, &d);
                }
                Op::Concat { xs, axis } => {
                    let out_shape = self.nodes[id].shape.clone();
                    let (outer, inner) = split_at_axis(&out_shape, axis);
                    let mut offset = 0;
                    for &v in &xs {
                        let s = self.nodes[v.0].shape.clone();
                        let mut d = vec![0.0; self.nodes[v.0].data.len()];
                        for o in 0..outer {
                            let src = (o * out_shape[axis] + offset) * inner;
                            let dst = o * s[axis] * inner;
                            d[dst..dst + s[axis] * inner]
                                .copy_from_slice(&d_out[src..src + s[axis] * inner]);
                        }
                        self.acc(v, &d);
                        offset += s[axis];
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.backward_conv2d(id, x, w, b, stride, pad, &d_out);
                }
                Op::Deconv2d { x, w, b, stride, pad } => {
                    self.backward_deconv2d(id, x, w, b, stride, pad, &d_out);
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                    self.backward_batchnorm(id, x, gamma, beta, &mean, &inv_std, &d_out);
                }
            }
        }
    }

    fn acc(&mut self, v: Var, g: &[f64]) {
        debug_assert_eq!(g.len(), self.nodes[v.0].data.len());
        match &mut self.nodes[v.0].grad {
            Some(existing) => {
                for (e, &d) in existing.iter_mut().zip(g) {
                    *e += d;
                }
            }
            None => self.nodes[v.0].grad = Some(g.to_vec()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &mut self,
        out: usize,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        d_out: &[f64],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let ckk = cin * kh * kw;
        let mut dw = vec![0.0; self.nodes[w.0].data.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; self.nodes[x.0].data.len()];
        for i in 0..bsz {
            let xi = &self.nodes[x.0].data[i * cin * h * wd..(i + 1) * cin * h * wd];
            let cols = im2col(xi, cin, h, wd, kh, kw, stride, pad);
            let dyi = &d_out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            // dW += dY cols^T
            let dwi = matmul_transpose_b(dyi, &cols, cout, oh * ow, ckk);
            for (a, v) in dw.iter_mut().zip(&dwi) {
                *a += v;
            }
            // db += row sums of dY
            for c in 0..cout {
                for p in 0..oh * ow {
                    db[c] += dyi[c * oh * ow + p];
                }
            }
            // dcols = W^T dY, then scatter back to the input image
            let dcols = matmul_transpose_a(&self.nodes[w.0].data, dyi, cout, ckk, oh * ow);
            let dxi = col2im(&dcols, cin, h, wd, kh, kw, stride, pad);
            let dst = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
            for (a, v) in dst.iter_mut().zip(&dxi) {
                *a += v;
            }
        }
        self.acc(w, &dw);
        self.acc(b, &db);
        self.acc(x, &dx);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_deconv2d(
        &mut self,
        out: usize,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        d_out: &[f64],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (_, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let ckk = cout * kh * kw;
        let mut dw = vec![0.0; self.nodes[w.0].data.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; self.nodes[x.0].data.len()];
        for i in 0..bsz {
            let dyi = &d_out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            let dcols = im2col(dyi, cout, oh, ow, kh, kw, stride, pad);
            // dX = W dcols  (W viewed [cin, cout*kh*kw])
            let dxi = matmul(&self.nodes[w.0].data, &dcols, cin, ckk, h * wd);
            let dst = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
            for (a, v) in dst.iter_mut().zip(&dxi) {
                *a += v;
            }
            // dW += X dcols^T  (X viewed [cin, h*w])
            let xi = &self.nodes[x.0].data[i * cin * h * wd..(i + 1) * cin * h * wd];
            let dwi = matmul_transpose_b(xi, &dcols, cin, h * wd, ckk);
            for (a, v) in dw.iter_mut().zip(&dwi) {
                *a += v;
            }
            for c in 0..cout {
                for p in 0..oh * ow {
                    db[c] += dyi[c * oh * ow + p];
                }
            }
        }
        self.acc(w, &dw);
        self.acc(b, &db);
        self.acc(x, &dx);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batchnorm(
        &mut self,
        out: usize,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        d_out: &[f64],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let _ = out;
        let plane = h * w;
        let n = (bsz * plane) as f64;
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; xd.len()];
        for ch in 0..c {
            // First pass: per-channel reductions of dy and dy*xhat.
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..bsz {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    let xhat = (xd[base + p] - mean[ch]) * inv_std[ch];
                    let dy = d_out[base + p];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            // dx = gamma*inv_std/n * (n*dy - sum(dy) - xhat*sum(dy*xhat))
            let scale = gd[ch] * inv_std[ch] / n;
            for i in 0..bsz {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    let xhat = (xd[base + p] - mean[ch]) * inv_std[ch];
                    let dy = d_out[base + p];
                    dx[base + p] = scale * (n * dy - sum_dy - xhat * sum_dy_xhat);
                }
            }
        }
        self.acc(gamma, &dgamma);
        self.acc(beta, &dbeta);
        self.acc(x, &dx);
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Matmul { .. } => "matmul",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::Neg(..) => "neg",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::MaxConst { .. } => "max_const",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddScalar { .. } => "add_scalar",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Broadcast { .. } => "broadcast",
        Op::Reshape(..) => "reshape",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Conv2d { .. } => "conv2d",
        Op::Deconv2d { .. } => "deconv2d",
        Op::BatchNorm { .. } => "batchnorm",
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- raw kernels ----

/// `C[m,n] = A[m,k] B[k,n]`, sequential accumulation order.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C[m,n] = A[m,k] B[n,k]^T`.
pub(crate) fn matmul_transpose_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `C[k,n] = A[m,k]^T B[m,n]`.
pub(crate) fn matmul_transpose_a(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn conv_out_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    assert!(stride >= 1, "conv: stride must be >= 1");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv: kernel larger than padded input");
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Unfold `x [c,h,w]` into patch columns `[c*kh*kw, oh*ow]` (zero padding).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_size(h, w, kh, kw, stride, pad);
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_size(h, w, kh, kw, stride, pad);
    let mut img = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[(ch * h + iy as usize) * w + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    img
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn broadcast_compatible(from: &[usize], target: &[usize]) -> bool {
    if from.len() > target.len() {
        return false;
    }
    let offset = target.len() - from.len();
    from.iter().zip(&target[offset..]).all(|(&f, &t)| f == t || f == 1)
}

fn broadcast_data(src: &[f64], from: &[usize], target: &[usize]) -> Vec<f64> {
    let rank = target.len();
    let mut padded = vec![1usize; rank];
    padded[rank - from.len()..].copy_from_slice(from);
    let total: usize = target.iter().product();
    let mut out = vec![0.0; total];
    let src_strides = strides(&padded);
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % target[d];
            rem /= target[d];
        }
        let mut idx = 0;
        for d in 0..rank {
            let cc = if padded[d] == 1 { 0 } else { coords[d] };
            idx += cc * src_strides[d];
        }
        *slot = src[idx];
    }
    out
}

/// Sum `grad` (shaped `from`) down to `to` by summing broadcast axes.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let mut padded = vec![1usize; rank];
    padded[rank - to.len()..].copy_from_slice(to);
    let to_total: usize = to.iter().product();
    let mut out = vec![0.0; to_total];
    let dst_strides = strides(&padded);
    let mut coords = vec![0usize; rank];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % from[d];
            rem /= from[d];
        }
        let mut idx = 0;
        for d in 0..rank {
            let cc = if padded[d] == 1 { 0 } else { coords[d] };
            idx += cc * dst_strides[d];
        }
        out[idx] += g;
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}
