use crate::kernels::ConvGeometry;
use crate::ops::{self, split_axis, split_ncl, NormStats};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the value folded into running statistics.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    Gelu(Var),
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
        train: bool,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelScale {
        x: Var,
        scale: Var,
    },
    Softmax(Var),
    MatMul {
        a: Var,
        b: Var,
        dims: (usize, usize, usize, usize),
        ta: bool,
        tb: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    ResizeNearest(Var),
    AdaptivePool(Var),
    RepeatBatch(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// A define-by-run computation tape.
///
/// Every operation evaluates eagerly and records enough to run its adjoint.
/// Nodes whose inputs do not require gradients are never visited in
/// [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs keep only their value.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * ops::sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    // ---------------------------------------------------------------- linear

    /// Channel-mixing linear map: `x: [N, C, rest...]`, `w: [O, C]`,
    /// `b: [O]` gives `[N, O, rest...]`. With a rank-2 input this is an
    /// ordinary fully connected layer.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, l) = split_ncl(&xs);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "pointwise weight must be [O, C], got {ws:?}");
        assert_eq!(
            ws[1], c,
            "pointwise weight {ws:?} does not match input channels {c}"
        );
        let o = ws[0];
        let y = ops::pointwise_forward(
            self.data(x),
            (n, c, l),
            self.data(w),
            o,
            b.map(|b| self.data(b)),
        );
        let mut shape = xs;
        shape[1] = o;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, y), Op::Pointwise { x, w, b }, &inputs)
    }

    /// Square-kernel 2-D convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
        assert_eq!(
            ws.len(),
            4,
            "conv2d weight must be [O, C, k, k], got {ws:?}"
        );
        assert_eq!(
            ws[1], xs[1],
            "conv2d weight {ws:?} does not match input {xs:?}"
        );
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geo = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let y = ops::conv2d_forward(
            self.data(x),
            xs[0],
            &geo,
            self.data(w),
            ws[0],
            b.map(|b| self.data(b)),
        );
        let shape = vec![xs[0], ws[0], geo.out_height(), geo.out_width()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, y), Op::Conv2d { x, w, b, geo }, &inputs)
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]` operands, with
    /// either operand optionally stored transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_.len(), 3, "matmul expects rank-3 operands, got {as_:?}");
        assert_eq!(bs.len(), 3, "matmul expects rank-3 operands, got {bs:?}");
        assert_eq!(as_[0], bs[0], "matmul batch mismatch");
        let (m, k) = if ta {
            (as_[2], as_[1])
        } else {
            (as_[1], as_[2])
        };
        let (k2, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {as_:?} x {bs:?}");
        let batch = as_[0];
        let y = ops::batched_matmul(self.data(a), self.data(b), batch, m, k, n, ta, tb);
        let dims = (batch, m, k, n);
        self.push(
            Tensor::new([batch, m, n], y),
            Op::MatMul { a, b, dims, ta, tb },
            &[a, b],
        )
    }

    // ----------------------------------------------------------- normalizers

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let ncl = split_ncl(&xs);
        assert_eq!(
            ncl.1 % groups,
            0,
            "{} channels not divisible into {groups} groups",
            ncl.1
        );
        let (y, stats) = ops::group_norm_forward(
            self.data(x),
            ncl,
            groups,
            self.data(gamma),
            self.data(beta),
            eps,
        );
        self.push(
            Tensor::new(xs, y),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Layer norm across channels at every position of `[N, C, rest...]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let ncl = split_ncl(&xs);
        let (y, stats) =
            ops::channel_norm_forward(self.data(x), ncl, self.data(gamma), self.data(beta), eps);
        self.push(
            Tensor::new(xs, y),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch norm. With `running = None` batch statistics are used and
    /// returned; otherwise the given running (mean, var) normalize.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let xs = self.shape(x).to_vec();
        let ncl = split_ncl(&xs);
        let (mean, var, observed) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = ops::channel_moments(self.data(x), ncl);
                let count = (ncl.0 * ncl.2) as f64;
                let unbiased = if count > 1.0 {
                    v.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    v.clone()
                };
                let stats = BatchStats {
                    mean: m.clone(),
                    var: unbiased,
                };
                (m, v, Some(stats))
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = ops::channel_standardize(
            self.data(x),
            ncl,
            &mean,
            &rstd,
            self.data(gamma),
            self.data(beta),
        );
        let train = observed.is_some();
        let var_out = self.push(
            Tensor::new(xs, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                train,
            },
            &[x, gamma, beta],
        );
        (var_out, observed)
    }

    /// `x · (1 + scale) + shift` with `scale, shift: [N, C]` broadcast over
    /// the positions of `x: [N, C, rest...]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, l) = split_ncl(&xs);
        assert_eq!(self.shape(scale), &[n, c], "channel_affine scale shape");
        assert_eq!(self.shape(shift), &[n, c], "channel_affine shift shape");
        let (xd, sd, td) = (self.data(x), self.data(scale), self.data(shift));
        let mut y = vec![0.0; xd.len()];
        for (row, (yr, xr)) in y.chunks_mut(l).zip(xd.chunks(l)).enumerate() {
            let (s, t) = (1.0 + sd[row], td[row]);
            yr.iter_mut().zip(xr).for_each(|(o, v)| *o = v * s + t);
        }
        self.push(
            Tensor::new(xs, y),
            Op::ChannelAffine { x, scale, shift },
            &[x, scale, shift],
        )
    }

    /// `x · scale[c]` with `scale: [C]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (_, c, l) = split_ncl(&xs);
        assert_eq!(self.shape(scale), &[c], "channel_scale shape");
        let (xd, sd) = (self.data(x), self.data(scale));
        let mut y = vec![0.0; xd.len()];
        for (row, (yr, xr)) in y.chunks_mut(l).zip(xd.chunks(l)).enumerate() {
            let s = sd[row % c];
            yr.iter_mut().zip(xr).for_each(|(o, v)| *o = v * s);
        }
        self.push(
            Tensor::new(xs, y),
            Op::ChannelScale { x, scale },
            &[x, scale],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().expect("softmax of a scalar");
        let y = ops::softmax_rows(self.data(x), width);
        self.push(Tensor::new(xs, y), Op::Softmax(x), &[x])
    }

    // ---------------------------------------------------------------- layout

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (a, b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat shape mismatch on axis {d}: {s:?} vs {first:?}"
                );
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                y.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, y),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(
            start + len <= xs[axis],
            "slice {start}+{len} out of range for {xs:?} axis {axis}"
        );
        let (outer, dim, inner) = split_axis(&xs, axis);
        let src = self.data(x);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            y.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        self.push(Tensor::new(shape, y), Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(x).reshape(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Nearest-neighbour resampling of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "resize expects [N, C, H, W]");
        let y = ops::resize_nearest_forward(self.data(x), xs[0] * xs[1], (xs[2], xs[3]), (oh, ow));
        self.push(
            Tensor::new([xs[0], xs[1], oh, ow], y),
            Op::ResizeNearest(x),
            &[x],
        )
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "pool expects [N, C, H, W]");
        let y = ops::adaptive_pool_forward(self.data(x), xs[0] * xs[1], (xs[2], xs[3]), (oh, ow));
        self.push(
            Tensor::new([xs[0], xs[1], oh, ow], y),
            Op::AdaptivePool(x),
            &[x],
        )
    }

    /// Tile a `[1, rest...]` tensor `n` times along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs[0], 1, "repeat_batch expects a leading axis of 1");
        let src = self.data(x);
        let mut y = Vec::with_capacity(n * src.len());
        for _ in 0..n {
            y.extend_from_slice(src);
        }
        let mut shape = xs;
        shape[0] = n;
        self.push(Tensor::new(shape, y), Op::RepeatBatch(x), &[x])
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let ls = self.shape(logits).to_vec();
        assert_eq!(ls.len(), 2, "cross_entropy expects [N, K] logits");
        assert_eq!(ls[0], labels.len(), "cross_entropy label count mismatch");
        assert!(
            labels.iter().all(|&l| l < ls[1]),
            "label out of range for {} classes",
            ls[1]
        );
        let (loss, probs) = ops::cross_entropy_forward(self.data(logits), ls[1], labels);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from `root`, seeded with ones. Returns gradients of
    /// every leaf that requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads: leaf_grads };
        }
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), gy));
                }
                continue;
            }
            self.propagate(node, &gy, &mut grads);
        }
        Gradients { grads: leaf_grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, gy.iter().map(|g| g * f).collect()),
            Op::Silu(a) => {
                let d = gy
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| {
                        let s = ops::sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = gy
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = gy
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * ops::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Pointwise { x, w, b } => {
                let ncl = split_ncl(self.shape(*x));
                let o = self.shape(*w)[0];
                let need = (
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                let r = ops::pointwise_backward(gy, self.data(*x), ncl, self.data(*w), o, need);
                self.scatter3(grads, (*x, *w, *b), r);
            }
            Op::Conv2d { x, w, b, geo } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let need = (
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                let r = ops::conv2d_backward(gy, self.data(*x), n, geo, self.data(*w), o, need);
                self.scatter3(grads, (*x, *w, *b), r);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let ncl = split_ncl(self.shape(*x));
                let (dx, dg, db) = ops::group_norm_backward(
                    gy,
                    self.data(*x),
                    ncl,
                    *groups,
                    self.data(*gamma),
                    stats,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let ncl = split_ncl(self.shape(*x));
                let (dx, dg, db) =
                    ops::channel_norm_backward(gy, self.data(*x), ncl, self.data(*gamma), stats);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                train,
            } => {
                let ncl = split_ncl(self.shape(*x));
                let (dx, dg, db) = ops::batch_norm_backward(
                    gy,
                    self.data(*x),
                    ncl,
                    self.data(*gamma),
                    mean,
                    rstd,
                    *train,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, l) = split_ncl(self.shape(*x));
                let (xd, sd) = (self.data(*x), self.data(*scale));
                if self.needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for (row, (dr, gr)) in dx.chunks_mut(l).zip(gy.chunks(l)).enumerate() {
                        let s = 1.0 + sd[row];
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d = g * s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                let mut ds = vec![0.0; n * c];
                let mut dt = vec![0.0; n * c];
                for (row, (gr, xr)) in gy.chunks(l).zip(xd.chunks(l)).enumerate() {
                    ds[row] = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    dt[row] = gr.iter().sum();
                }
                self.accumulate(grads, *scale, ds);
                self.accumulate(grads, *shift, dt);
            }
            Op::ChannelScale { x, scale } => {
                let (_, c, l) = split_ncl(self.shape(*x));
                let (xd, sd) = (self.data(*x), self.data(*scale));
                let mut dx = vec![0.0; xd.len()];
                let mut ds = vec![0.0; c];
                for (row, ((dr, gr), xr)) in dx
                    .chunks_mut(l)
                    .zip(gy.chunks(l))
                    .zip(xd.chunks(l))
                    .enumerate()
                {
                    let s = sd[row % c];
                    dr.iter_mut().zip(gr).for_each(|(d, g)| *d = g * s);
                    ds[row % c] += gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>();
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *scale, ds);
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().unwrap();
                let dx = ops::softmax_rows_backward(gy, node.value.data(), width);
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul { a, b, dims, ta, tb } => {
                let (batch, m, k, n) = *dims;
                let need = (self.needs(*a), self.needs(*b));
                let (da, db) = ops::batched_matmul_backward(
                    gy,
                    self.data(*a),
                    self.data(*b),
                    batch,
                    (m, k, n),
                    *ta,
                    *tb,
                    need,
                );
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::ResizeNearest(x) => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let dx =
                    ops::resize_nearest_backward(gy, xs[0] * xs[1], (xs[2], xs[3]), (ys[2], ys[3]));
                self.accumulate(grads, *x, dx);
            }
            Op::AdaptivePool(x) => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let dx =
                    ops::adaptive_pool_backward(gy, xs[0] * xs[1], (xs[2], xs[3]), (ys[2], ys[3]));
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatBatch(x) => {
                let per = self.value(*x).numel();
                let mut dx = vec![0.0; per];
                for chunk in gy.chunks(per) {
                    dx.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gy[0] / n as f64; n]);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let scale = 2.0 * gy[0] / n;
                let d: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gy[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    fn scatter3(
        &self,
        grads: &mut [Option<Vec<f64>>],
        (x, w, b): (Var, Var, Option<Var>),
        r: ops::PointwiseGrads,
    ) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, dw);
        }
        if let (Some(b), Some(db)) = (b, r.db) {
            self.accumulate(grads, b, db);
        }
    }
}
