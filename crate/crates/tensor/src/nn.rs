//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamLayout`] at construction and reads them from a [`Binding`] at
//! evaluation time.

use crate::graph::{BatchStats, Graph, Var};
use crate::params::{Binding, Init, ParamId, ParamLayout, ParamStore};

/// Default bound for weights and biases: `1/√fan_in`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Fully connected / channel-mixing layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        Self::with_init(
            layout,
            name,
            in_features,
            out_features,
            Init::Uniform(fan_in_bound(in_features)),
        )
    }

    /// Weight and bias both initialized with `init`.
    pub fn with_init(
        layout: &mut ParamLayout,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
    ) -> Self {
        let weight = layout.add(format!("{name}.weight"), [out_features, in_features], init);
        let bias = Some(layout.add(format!("{name}.bias"), [out_features], init));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features
            + if self.bias.is_some() {
                self.out_features
            } else {
                0
            }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.pointwise(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `kernel × kernel` convolution with "same" padding at stride 1.
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        Self::with_init(
            layout,
            name,
            cin,
            cout,
            kernel,
            Init::Uniform(fan_in_bound(cin * kernel * kernel)),
        )
    }

    pub fn with_init(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
    ) -> Self {
        let weight = layout.add(format!("{name}.weight"), [cout, cin, kernel, kernel], init);
        let bias = layout.add(format!("{name}.bias"), [cout], init);
        Self {
            weight,
            bias,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        if self.kernel == 1 && self.stride == 1 {
            let w = p.var(self.weight);
            let o = g.shape(w)[0];
            let c = g.shape(w)[1];
            let w2 = g.reshape(w, [o, c]);
            return g.pointwise(x, w2, Some(p.var(self.bias)));
        }
        g.conv2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.pad,
        )
    }
}

/// Largest group count ≤ `preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = layout.add(format!("{name}.weight"), [channels], Init::Ones);
        let beta = layout.add(format!("{name}.bias"), [channels], Init::Zeros);
        Self {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.group_norm(
            x,
            p.var(self.gamma),
            p.var(self.beta),
            self.groups,
            Self::EPS,
        )
    }
}

/// Layer norm over channels at each position.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let gamma = layout.add(format!("{name}.weight"), [channels], Init::Ones);
        let beta = layout.add(format!("{name}.bias"), [channels], Init::Zeros);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.channel_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// Batch norm with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let gamma = layout.add(format!("{name}.weight"), [channels], Init::Ones);
        let beta = layout.add(format!("{name}.bias"), [channels], Init::Zeros);
        let running_mean =
            layout.add_buffer(format!("{name}.running_mean"), [channels], Init::Zeros);
        let running_var = layout.add_buffer(format!("{name}.running_var"), [channels], Init::Ones);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Training mode normalizes with batch statistics and returns them;
    /// evaluation mode uses the running statistics from `store`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        store: &ParamStore,
        x: Var,
        train: bool,
    ) -> (Var, Option<BatchStats>) {
        let running = (!train).then(|| {
            (
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
            )
        });
        g.batch_norm(x, p.var(self.gamma), p.var(self.beta), running, Self::EPS)
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| (1.0 - Self::MOMENTUM) * o + Self::MOMENTUM * n)
                .collect()
        };
        let mean = blend(store.get(self.running_mean).data(), &stats.mean);
        let var = blend(store.get(self.running_var).data(), &stats.var);
        let shape = store.get(self.running_mean).shape().to_vec();
        store.set(self.running_mean, crate::Tensor::new(shape.clone(), mean));
        store.set(self.running_var, crate::Tensor::new(shape, var));
    }
}

/// Multi-head self-attention over a channel-first sequence `[N, C, L]`.
///
/// No normalization or residual is applied here; callers add both.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        channels: usize,
        heads: usize,
        zero_proj: bool,
    ) -> Self {
        assert!(
            heads > 0 && channels.is_multiple_of(heads),
            "{channels} channels not divisible by {heads} heads"
        );
        let qkv = Linear::new(layout, &format!("{name}.qkv"), channels, 3 * channels);
        let proj = if zero_proj {
            Linear::with_init(
                layout,
                &format!("{name}.proj_out"),
                channels,
                channels,
                Init::Zeros,
            )
        } else {
            Linear::new(layout, &format!("{name}.proj_out"), channels, channels)
        };
        Self {
            qkv,
            proj,
            heads,
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count() + self.proj.param_count()
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (n, c, len) = (shape[0], shape[1], shape[2]);
        let head_dim = c / self.heads;
        let qkv = self.qkv.forward(g, p, x); // [N, 3C, L]
                                             // Rows are grouped as [q | k | v] per head after this reshape.
        let qkv = g.reshape(qkv, [n * self.heads, 3 * head_dim, len]);
        let q = g.slice(qkv, 1, 0, head_dim);
        let k = g.slice(qkv, 1, head_dim, head_dim);
        let v = g.slice(qkv, 1, 2 * head_dim, head_dim);
        let scale = 1.0 / (head_dim as f64).sqrt().sqrt();
        let q = g.scale(q, scale);
        let k = g.scale(k, scale);
        let logits = g.matmul(q, k, true, false); // [B', L, L]
        let weights = g.softmax(logits);
        let out = g.matmul(v, weights, false, true); // [B', d, L]
        let out = g.reshape(out, [n, c, len]);
        self.proj.forward(g, p, out)
    }
}
