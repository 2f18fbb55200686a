//! Classification heads over diffusion features and the probe-training
//! protocol.
//!
//! Flat heads (linear, MLP) see the flattened feature; the CNN head keeps
//! the spatial map. The attention head tokenizes a map (pool, layer norm,
//! 1×1 projection), prepends a learned CLS token, runs pre-norm transformer
//! layers without positional embeddings, and classifies the CLS output.
//! [`DifFormer`] generalizes it to several blocks per timestep and several
//! timesteps sharing one tokenizer set and transformer.

use diffrep_tensor::nn::{ChannelNorm, Conv2d, Linear, SelfAttention};
use diffrep_tensor::rng::stream;
use diffrep_tensor::{Binding, Graph, Init, ParamId, ParamLayout, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::harness::optim::{adam_update, AdamState};

// ------------------------------------------------------------- tokenizer

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub norm: ChannelNorm,
    pub proj: Linear,
    pub channels: usize,
    pub pool_threshold: usize,
}

/// Tokens of one feature map: `[K, d_model]` rows.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub has_cls: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of tokens a `side × side` map yields.
pub fn token_count(side: usize, pool_threshold: usize) -> usize {
    let s = side.min(pool_threshold);
    s * s
}

impl Tokenizer {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        channels: usize,
        d_model: usize,
        pool_threshold: usize,
    ) -> Self {
        Self {
            norm: ChannelNorm::new(layout, &format!("{name}.norm"), channels),
            proj: Linear::new(layout, &format!("{name}.proj"), channels, d_model),
            channels,
            pool_threshold,
        }
    }

    fn pooled(&self, g: &mut Graph, map: Var) -> Var {
        let s = g.shape(map).to_vec();
        let side = self.pool_threshold;
        if s[2] > side || s[3] > side {
            g.adaptive_avg_pool(map, s[2].min(side), s[3].min(side))
        } else {
            map
        }
    }

    /// Layer-normalized positions `[N, C, L]` before projection.
    pub fn normalized(&self, g: &mut Graph, p: &Binding, map: Var) -> Var {
        let h = self.pooled(g, map);
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, [s[0], s[1], s[2] * s[3]]);
        self.norm.forward(g, p, h)
    }

    /// `[N, C, H, W]` → `[N, d_model, L]` tokens in row-major position order.
    pub fn forward(&self, g: &mut Graph, p: &Binding, map: Var) -> Var {
        let h = self.normalized(g, p, map);
        self.proj.forward(g, p, h)
    }
}

/// Tokenize a single `[C, H, W]` map without a CLS token.
pub fn tokenize(map: &Tensor, tokenizer: &Tokenizer, store: &ParamStore) -> Result<TokenSequence> {
    if map.rank() != 3 || map.dim(0) != tokenizer.channels {
        return Err(Error::shape(
            "feature map",
            &[tokenizer.channels, 0, 0],
            map.shape(),
        ));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(map.reshape([&[1], map.shape()].concat()));
    let y = tokenizer.forward(&mut g, &p, x);
    let s = g.shape(y).to_vec();
    let (d, l) = (s[1], s[2]);
    let src = g.value(y).data();
    let mut tokens = Vec::with_capacity(d * l);
    for k in 0..l {
        tokens.extend((0..d).map(|c| src[c * l + k]));
    }
    Ok(TokenSequence {
        tokens: Tensor::new([l, d], tokens),
        has_cls: false,
    })
}

// ---------------------------------------------------------- transformer

#[derive(Clone, Debug)]
struct TransformerLayer {
    attn_norm: ChannelNorm,
    attn: SelfAttention,
    mlp_norm: ChannelNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    fn new(layout: &mut ParamLayout, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            attn_norm: ChannelNorm::new(layout, &format!("{name}.attn_norm"), d),
            attn: SelfAttention::new(layout, &format!("{name}.attn"), d, heads, false),
            mlp_norm: ChannelNorm::new(layout, &format!("{name}.mlp_norm"), d),
            fc1: Linear::new(layout, &format!("{name}.fc1"), d, d * mlp_ratio),
            fc2: Linear::new(layout, &format!("{name}.fc2"), d * mlp_ratio, d),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let h = self.attn_norm.forward(g, p, x);
        let h = self.attn.forward(g, p, h);
        let x = g.add(x, h);
        let h = self.mlp_norm.forward(g, p, x);
        let h = self.fc1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionHeadConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub pool_threshold: usize,
}

impl Default for AttentionHeadConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 128,
            num_heads: 4,
            mlp_ratio: 4,
            pool_threshold: 16,
        }
    }
}

impl AttentionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Parameter {
                field: "num_heads",
                reason: format!(
                    "d_model {} is not divisible by {} heads",
                    self.d_model, self.num_heads
                ),
            });
        }
        if self.pool_threshold == 0 || self.mlp_ratio == 0 {
            return Err(Error::Parameter {
                field: "pool_threshold",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One tapped block as seen by a fusion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInput {
    pub block: usize,
    pub channels: usize,
    pub side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifFormerConfig {
    pub times: Vec<usize>,
    pub blocks: Vec<BlockInput>,
    pub head: AttentionHeadConfig,
    pub num_classes: usize,
}

impl DifFormerConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.times.is_empty() {
            return Err(Error::Parameter {
                field: "times",
                reason: "must not be empty".into(),
            });
        }
        if self.blocks.is_empty() {
            return Err(Error::Parameter {
                field: "blocks",
                reason: "must not be empty".into(),
            });
        }
        if self.num_classes == 0 {
            return Err(Error::Parameter {
                field: "num_classes",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Width of the vector fed to the classifier.
    pub fn pre_classifier_dim(&self) -> usize {
        self.head.d_model * self.times.len()
    }

    /// Tokens per timestep, excluding CLS.
    pub fn tokens_per_time(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| token_count(b.side, self.head.pool_threshold))
            .sum()
    }
}

/// Shared-weight transformer fusion over `|times| × |blocks|` feature maps.
/// With one timestep and one block this is the attention head.
#[derive(Clone, Debug)]
pub struct DifFormer {
    pub config: DifFormerConfig,
    tokenizers: Vec<Tokenizer>,
    cls: ParamId,
    layers: Vec<TransformerLayer>,
    final_norm: ChannelNorm,
    pub classifier: Linear,
}

impl DifFormer {
    pub fn layout(config: &DifFormerConfig) -> Result<(ParamLayout, Self)> {
        config.validate()?;
        let h = &config.head;
        let mut layout = ParamLayout::new();
        let tokenizers = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Tokenizer::new(
                    &mut layout,
                    &format!("tokenizer{i}"),
                    b.channels,
                    h.d_model,
                    h.pool_threshold,
                )
            })
            .collect();
        let cls = layout.add("cls", [h.d_model], Init::Normal(0.02));
        let layers = (0..h.num_layers)
            .map(|i| {
                TransformerLayer::new(
                    &mut layout,
                    &format!("layer{i}"),
                    h.d_model,
                    h.num_heads,
                    h.mlp_ratio,
                )
            })
            .collect();
        let final_norm = ChannelNorm::new(&mut layout, "final_norm", h.d_model);
        let classifier = Linear::new(
            &mut layout,
            "classifier",
            config.pre_classifier_dim(),
            config.num_classes,
        );
        Ok((
            layout,
            Self {
                config: config.clone(),
                tokenizers,
                cls,
                layers,
                final_norm,
                classifier,
            },
        ))
    }

    pub fn tokenizer(&self, index: usize) -> &Tokenizer {
        &self.tokenizers[index]
    }

    /// Transformer over `[N, d, K]` tokens with CLS at position 0; returns
    /// the normalized CLS output `[N, d]`.
    pub fn encode(&self, g: &mut Graph, p: &Binding, tokens: Var) -> Var {
        let mut h = tokens;
        for layer in &self.layers {
            h = layer.forward(g, p, h);
        }
        let cls = g.slice(h, 2, 0, 1);
        let cls = self.final_norm.forward(g, p, cls);
        let n = g.shape(cls)[0];
        g.reshape(cls, [n, self.config.head.d_model])
    }

    /// Prepend the CLS token to `[N, d, K]` tokens.
    pub fn with_cls(&self, g: &mut Graph, p: &Binding, tokens: Var) -> Var {
        let n = g.shape(tokens)[0];
        let d = self.config.head.d_model;
        let cls = g.reshape(p.var(self.cls), [1, d, 1]);
        let cls = g.repeat_batch(cls, n);
        g.concat(&[cls, tokens], 2)
    }

    /// Logits from maps ordered time-major: `maps[ti · |blocks| + bi]`,
    /// each `[N, C_b, H_b, W_b]`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, maps: &[Var]) -> Var {
        let nb = self.config.blocks.len();
        assert_eq!(
            maps.len(),
            self.config.times.len() * nb,
            "one map per (time, block)"
        );
        let mut pooled = Vec::with_capacity(self.config.times.len());
        for per_time in maps.chunks(nb) {
            let tokens: Vec<Var> = per_time
                .iter()
                .zip(&self.tokenizers)
                .map(|(&m, tk)| tk.forward(g, p, m))
                .collect();
            let tokens = if tokens.len() == 1 {
                tokens[0]
            } else {
                g.concat(&tokens, 2)
            };
            let tokens = self.with_cls(g, p, tokens);
            pooled.push(self.encode(g, p, tokens));
        }
        let fused = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled, 1)
        };
        self.classifier.forward(g, p, fused)
    }
}

/// Logits of an attention head for one token sequence that already carries
/// its CLS token in row 0.
pub fn attention_head_forward(
    head: &DifFormer,
    store: &ParamStore,
    seq: &TokenSequence,
) -> Result<Vec<f64>> {
    if !seq.has_cls {
        return Err(Error::Invalid("token sequence has no CLS token".into()));
    }
    let (k, d) = (seq.tokens.dim(0), seq.tokens.dim(1));
    if d != head.config.head.d_model {
        return Err(Error::shape(
            "tokens",
            &[k, head.config.head.d_model],
            seq.tokens.shape(),
        ));
    }
    let mut channel_first = vec![0.0; k * d];
    for (row, tok) in seq.tokens.data().chunks(d).enumerate() {
        for (c, v) in tok.iter().enumerate() {
            channel_first[c * k + row] = *v;
        }
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::new([1, d, k], channel_first));
    let cls = head.encode(&mut g, &p, x);
    let logits = head.classifier.forward(&mut g, &p, cls);
    Ok(g.value(logits).data().to_vec())
}

/// The CLS vector of a head as a token row, for assembling sequences.
pub fn cls_token(head: &DifFormer, store: &ParamStore) -> Tensor {
    let t = store.get(head.cls);
    t.reshape([1, t.numel()])
}

// ---------------------------------------------------------------- heads

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Mlp {
        hidden: Vec<usize>,
    },
    /// 3×3 conv to `mid` channels, 1×1 conv to `out`, global average pool,
    /// linear classifier.
    Cnn {
        mid: usize,
        out: usize,
    },
    Attention(AttentionHeadConfig),
}

#[derive(Clone, Debug)]
enum HeadNet {
    Flat(Vec<Linear>),
    Cnn {
        conv1: Conv2d,
        conv2: Conv2d,
        classifier: Linear,
    },
    Attention(DifFormer),
}

/// A single-input classification head.
#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub feature_shape: Vec<usize>,
    pub num_classes: usize,
    pub params: ParamStore,
    net: HeadNet,
}

fn head_layout(
    kind: &HeadKind,
    feature_shape: &[usize],
    num_classes: usize,
) -> Result<(ParamLayout, HeadNet)> {
    if num_classes == 0 {
        return Err(Error::Parameter {
            field: "num_classes",
            reason: "must be positive".into(),
        });
    }
    if feature_shape.is_empty() || feature_shape.contains(&0) {
        return Err(Error::Invalid(format!(
            "feature shape {feature_shape:?} is empty"
        )));
    }
    let mut layout = ParamLayout::new();
    let flat: usize = feature_shape.iter().product();
    let net = match kind {
        HeadKind::Linear => HeadNet::Flat(vec![Linear::new(&mut layout, "fc0", flat, num_classes)]),
        HeadKind::Mlp { hidden } => {
            let mut widths = vec![flat];
            widths.extend(hidden);
            widths.push(num_classes);
            HeadNet::Flat(
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Linear::new(&mut layout, &format!("fc{i}"), w[0], w[1]))
                    .collect(),
            )
        }
        HeadKind::Cnn { mid, out } => {
            if feature_shape.len() != 3 {
                return Err(Error::Invalid(format!(
                    "cnn head needs a [C, H, W] feature, got {feature_shape:?}"
                )));
            }
            HeadNet::Cnn {
                conv1: Conv2d::new(&mut layout, "conv1", feature_shape[0], *mid, 3),
                conv2: Conv2d::new(&mut layout, "conv2", *mid, *out, 1),
                classifier: Linear::new(&mut layout, "classifier", *out, num_classes),
            }
        }
        HeadKind::Attention(cfg) => {
            if feature_shape.len() != 3 {
                return Err(Error::Invalid(format!(
                    "attention head needs a [C, H, W] feature, got {feature_shape:?}"
                )));
            }
            let config = DifFormerConfig {
                times: vec![0],
                blocks: vec![BlockInput {
                    block: 0,
                    channels: feature_shape[0],
                    side: feature_shape[1],
                }],
                head: cfg.clone(),
                num_classes,
            };
            let (l, head) = DifFormer::layout(&config)?;
            layout = l;
            HeadNet::Attention(head)
        }
    };
    Ok((layout, net))
}

/// Parameter count of a head without allocating it.
pub fn head_parameter_count(
    kind: &HeadKind,
    feature_shape: &[usize],
    num_classes: usize,
) -> Result<usize> {
    Ok(head_layout(kind, feature_shape, num_classes)?.0.count())
}

pub fn build_head(
    kind: &HeadKind,
    feature_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Head> {
    let (layout, net) = head_layout(kind, feature_shape, num_classes)?;
    Ok(Head {
        kind: kind.clone(),
        feature_shape: feature_shape.to_vec(),
        num_classes,
        params: layout.materialize(seed),
        net,
    })
}

impl Head {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// The attention head's transformer, when this is one.
    pub fn fusion(&self) -> Option<&DifFormer> {
        match &self.net {
            HeadNet::Attention(h) => Some(h),
            _ => None,
        }
    }

    /// Logits `[N, classes]` for features `[N, feature_shape...]`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        match &self.net {
            HeadNet::Flat(layers) => {
                let n = g.shape(x)[0];
                let flat = g.value(x).numel() / n;
                let mut h = g.reshape(x, [n, flat]);
                for (i, layer) in layers.iter().enumerate() {
                    if i > 0 {
                        h = g.gelu(h);
                    }
                    h = layer.forward(g, p, h);
                }
                h
            }
            HeadNet::Cnn {
                conv1,
                conv2,
                classifier,
            } => {
                let h = conv1.forward(g, p, x);
                let h = g.gelu(h);
                let h = conv2.forward(g, p, h);
                let h = g.gelu(h);
                let s = g.shape(h).to_vec();
                let h = g.adaptive_avg_pool(h, 1, 1);
                let h = g.reshape(h, [s[0], s[1]]);
                classifier.forward(g, p, h)
            }
            HeadNet::Attention(head) => head.forward(g, p, &[x]),
        }
    }
}

// --------------------------------------------------------- probe training

/// Anything trainable by [`train_probe`].
pub trait ProbeModel {
    /// Parameter stores optimized by the probe loop.
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;

    /// Logits `[N, classes]`. `bindings` follow [`ProbeModel::stores`].
    fn logits(
        &mut self,
        g: &mut Graph,
        bindings: &[Binding],
        inputs: &[Var],
        train: bool,
    ) -> Result<Var>;

    /// Hook after each optimizer step, e.g. to fold in batch statistics.
    fn after_step(&mut self) {}

    /// Switch backbone fine-tuning on or off.
    fn set_finetune(&mut self, on: bool) -> Result<()> {
        if on {
            return Err(Error::Invalid(
                "this model has no backbone to fine-tune".into(),
            ));
        }
        Ok(())
    }

    fn describe(&self) -> serde_json::Value;
}

impl ProbeModel for Head {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }

    fn logits(
        &mut self,
        g: &mut Graph,
        bindings: &[Binding],
        inputs: &[Var],
        _: bool,
    ) -> Result<Var> {
        let [x] = inputs else {
            return Err(Error::CountMismatch {
                what: "head inputs",
                left: inputs.len(),
                right: 1,
            });
        };
        Ok(self.forward(g, &bindings[0], *x))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "head": self.kind,
            "feature_shape": self.feature_shape,
            "classes": self.num_classes,
            "parameters": self.parameter_count(),
        })
    }
}

/// A [`DifFormer`] with its parameters, taking `|times| · |blocks|` inputs.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub head: DifFormer,
    pub params: ParamStore,
}

pub fn build_difformer(config: &DifFormerConfig, seed: u64) -> Result<FusionModel> {
    let (layout, head) = DifFormer::layout(config)?;
    Ok(FusionModel {
        head,
        params: layout.materialize(seed),
    })
}

/// Logits of a fusion head for one image: `maps[ti · |blocks| + bi]` are
/// `[C, H, W]` features.
pub fn difformer_forward(model: &FusionModel, maps: &[Tensor]) -> Result<Vec<f64>> {
    let cfg = &model.head.config;
    if maps.len() != cfg.times.len() * cfg.blocks.len() {
        return Err(Error::CountMismatch {
            what: "feature maps vs times × blocks",
            left: maps.len(),
            right: cfg.times.len() * cfg.blocks.len(),
        });
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let vars: Vec<Var> = maps
        .iter()
        .map(|m| g.constant(m.reshape([&[1], m.shape()].concat())))
        .collect();
    let logits = model.head.forward(&mut g, &p, &vars);
    Ok(g.value(logits).data().to_vec())
}

impl ProbeModel for FusionModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }

    fn logits(
        &mut self,
        g: &mut Graph,
        bindings: &[Binding],
        inputs: &[Var],
        _: bool,
    ) -> Result<Var> {
        let cfg = &self.head.config;
        let want = cfg.times.len() * cfg.blocks.len();
        if inputs.len() != want {
            return Err(Error::CountMismatch {
                what: "fusion inputs",
                left: inputs.len(),
                right: want,
            });
        }
        Ok(self.head.forward(g, &bindings[0], inputs))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "head": "difformer", "config": self.head.config, "parameters": self.params.count() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Frozen,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeProtocol {
    pub epochs: usize,
    pub lr: f64,
    pub step_gamma: f64,
    pub step_every: usize,
    pub batch_size: usize,
}

impl Default for ProbeProtocol {
    fn default() -> Self {
        Self {
            epochs: 28,
            lr: 1e-3,
            step_gamma: 0.1,
            step_every: 7,
            batch_size: 32,
        }
    }
}

impl ProbeProtocol {
    /// Learning rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch.max(1) - 1) / self.step_every.max(1);
        self.lr * self.step_gamma.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter {
                field: "batch_size",
                reason: "must be positive".into(),
            });
        }
        if self.step_every == 0 {
            return Err(Error::Parameter {
                field: "step_every",
                reason: "must be positive".into(),
            });
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter {
                field: "lr",
                reason: format!("{} must be positive", self.lr),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub epoch_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub train: Accuracy,
    pub eval: Option<Accuracy>,
    pub protocol: ProbeProtocol,
    pub mode: ProbeMode,
    pub seed: u64,
    pub model: serde_json::Value,
    pub source: serde_json::Value,
}

/// Classes ranked by logit, highest first; equal logits keep the lower
/// class index first.
pub fn rank_classes(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// Count top-1 and top-5 hits of `[N, K]` logits.
pub fn topk_hits(logits: &Tensor, labels: &[usize]) -> (usize, usize) {
    let k = logits.dim(1);
    let (mut h1, mut h5) = (0, 0);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let ranked = rank_classes(row);
        h1 += usize::from(ranked[0] == label);
        h5 += usize::from(ranked.iter().take(5).any(|&c| c == label));
    }
    (h1, h5)
}

/// Top-1/top-5 of `model` on every example of `source`, evaluated in
/// fixed index order.
pub fn evaluate_head(
    model: &mut dyn ProbeModel,
    source: &mut dyn FeatureSource,
    batch_size: usize,
) -> Result<Accuracy> {
    source.prepare(None)?;
    let n = source.labels().len();
    if n == 0 {
        return Ok(Accuracy::default());
    }
    let labels = source.labels().to_vec();
    let order: Vec<usize> = (0..n).collect();
    let (mut h1, mut h5) = (0, 0);
    for idx in order.chunks(batch_size.max(1)) {
        let inputs = source.batch(idx)?;
        let mut g = Graph::new();
        let bindings: Vec<Binding> = model
            .stores()
            .iter()
            .map(|s| s.bind(&mut g, false))
            .collect();
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
        let logits = model.logits(&mut g, &bindings, &vars, false)?;
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (a, b) = topk_hits(g.value(logits), &batch_labels);
        h1 += a;
        h5 += b;
    }
    Ok(Accuracy {
        top1: h1 as f64 / n as f64,
        top5: h5 as f64 / n as f64,
        count: n,
    })
}

/// Minimize cross-entropy with Adam under a step learning-rate schedule.
/// Examples are reshuffled every epoch from `seed`.
pub fn train_probe(
    model: &mut dyn ProbeModel,
    train: &mut dyn FeatureSource,
    eval: Option<&mut dyn FeatureSource>,
    protocol: &ProbeProtocol,
    mode: ProbeMode,
    seed: u64,
) -> Result<ProbeReport> {
    protocol.validate()?;
    if mode == ProbeMode::Finetune && !train.is_live() {
        return Err(Error::Invalid(
            "fine-tuning needs a live backbone, not a precomputed feature store".into(),
        ));
    }
    model.set_finetune(mode == ProbeMode::Finetune)?;
    let labels = train.labels().to_vec();
    let n = labels.len();
    if n == 0 {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut states: Vec<AdamState> = model.stores().iter().map(|s| AdamState::new(s)).collect();
    let mut epoch_losses = Vec::with_capacity(protocol.epochs);
    let mut lr_trace = Vec::with_capacity(protocol.epochs);
    for epoch in 1..=protocol.epochs {
        let lr = protocol.lr_at(epoch);
        lr_trace.push(lr);
        train.prepare(Some(epoch))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, "probe-shuffle", epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(protocol.batch_size) {
            let inputs = train.batch(idx)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bindings: Vec<Binding> = model
                .stores()
                .iter()
                .map(|s| s.bind(&mut g, true))
                .collect();
            let vars: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
            let logits = model.logits(&mut g, &bindings, &vars, true)?;
            let loss = g.cross_entropy(logits, &batch_labels);
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    name: format!("epoch {epoch}"),
                });
            }
            total += value * idx.len() as f64;
            let grads = g.backward(loss);
            for ((store, binding), state) in model
                .stores_mut()
                .into_iter()
                .zip(&bindings)
                .zip(&mut states)
            {
                adam_update(store, &binding.grads(&grads), state, lr)?;
            }
            model.after_step();
        }
        epoch_losses.push(total / n as f64);
    }
    let train_acc = evaluate_head(model, train, protocol.batch_size)?;
    let eval_acc = match eval {
        Some(source) => Some(evaluate_head(model, source, protocol.batch_size)?),
        None => None,
    };
    Ok(ProbeReport {
        epoch_losses,
        lr_trace,
        train: train_acc,
        eval: eval_acc,
        protocol: protocol.clone(),
        mode,
        seed,
        model: model.describe(),
        source: train.describe(),
    })
}
