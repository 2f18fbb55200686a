//! Noise-prediction U-Net with ordinally numbered, tappable blocks.
//!
//! Blocks are numbered in execution order, one id per residual unit:
//! the input convolution is block 1, then every encoder residual unit
//! (downsampling units included), the middle unit, and every decoder unit.
//! Attention is fused into the unit it follows. A decoder level that changes
//! resolution starts with its upsampling residual block, so decoder block
//! `d` and encoder block `2M − d` always share a spatial size, and the skip
//! consumed by `d` is exactly the output of `2M − d`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use diffrep_tensor::nn::{fan_in_bound, group_count, Conv2d, GroupNorm, Linear, SelfAttention};
use diffrep_tensor::{Binding, Graph, Init, ParamLayout, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::ddpm::Denoiser;
use crate::error::{Error, Result};

const NORM_GROUPS: usize = 32;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub attention_sizes: Vec<usize>,
    pub time_embed_dim: usize,
    pub num_heads: usize,
    /// Fixed channels per attention head; overrides `num_heads` when set.
    #[serde(default)]
    pub head_channels: Option<usize>,
    /// Length of the diffusion chain the model is conditioned on.
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
}

fn default_timesteps() -> usize {
    1000
}

impl UNetConfig {
    /// The 256×256 unconditional guided-diffusion architecture.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            base_channels: 256,
            channel_mults: vec![1, 1, 2, 2, 4, 4],
            res_blocks_per_stage: 2,
            attention_sizes: vec![32, 16, 8],
            time_embed_dim: 1024,
            num_heads: 4,
            head_channels: Some(64),
            timesteps: 1000,
        }
    }

    /// Small CPU-friendly model used as the default in tests and configs.
    pub fn reference_toy() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            res_blocks_per_stage: 1,
            attention_sizes: vec![8],
            time_embed_dim: 128,
            num_heads: 4,
            head_channels: None,
            timesteps: 1000,
        }
    }

    /// Tiny model for finite-difference gradient checks.
    pub fn miniature() -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2],
            res_blocks_per_stage: 1,
            attention_sizes: vec![4],
            time_embed_dim: 16,
            num_heads: 2,
            head_channels: None,
            timesteps: 1000,
        }
    }

    /// The reference layout at 16×16 with half the width, for end-to-end
    /// training runs on a single core.
    pub fn desk() -> Self {
        Self {
            image_size: 16,
            in_channels: 3,
            base_channels: 16,
            channel_mults: vec![1, 2, 2],
            res_blocks_per_stage: 1,
            attention_sizes: vec![4],
            time_embed_dim: 64,
            num_heads: 4,
            head_channels: None,
            timesteps: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("res_blocks_per_stage", self.res_blocks_per_stage),
            ("time_embed_dim", self.time_embed_dim),
            ("num_heads", self.num_heads),
            ("timesteps", self.timesteps),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Parameter {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.channel_mults.is_empty() {
            return Err(Error::Parameter {
                field: "channel_mults",
                reason: "must not be empty".into(),
            });
        }
        if self.channel_mults.contains(&0) {
            return Err(Error::Parameter {
                field: "channel_mults",
                reason: "multipliers must be positive".into(),
            });
        }
        let factor = 1usize << (self.channel_mults.len() - 1);
        if self.image_size % factor != 0 {
            return Err(Error::Parameter {
                field: "image_size",
                reason: format!("{} is not divisible by {factor}", self.image_size),
            });
        }
        if self.head_channels == Some(0) {
            return Err(Error::Parameter {
                field: "head_channels",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    fn heads_for(&self, channels: usize) -> usize {
        match self.head_channels {
            Some(hc) => (channels / hc).max(1),
            None => self.num_heads,
        }
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Mid,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub id: usize,
    pub stage: Stage,
    /// Side length of the block output.
    pub spatial: usize,
    pub channels: usize,
    /// Resolution level, 0 at full size; the mid block sits on the deepest level.
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCatalog {
    entries: Vec<BlockEntry>,
}

impl BlockCatalog {
    pub fn entries(&self) -> &[BlockEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&BlockEntry> {
        id.checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .ok_or(Error::UnknownBlock(id))
    }

    pub fn mid_id(&self) -> usize {
        self.entries
            .iter()
            .find(|e| e.stage == Stage::Mid)
            .expect("catalog has a mid block")
            .id
    }

    pub fn ids(&self, stage: Stage) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.id)
            .collect()
    }

    pub fn decoder_ids(&self) -> Vec<usize> {
        self.ids(Stage::Decoder)
    }

    pub fn encoder_ids(&self) -> Vec<usize> {
        self.ids(Stage::Encoder)
    }

    /// Decoder ids grouped by resolution level, deepest level first.
    pub fn decoder_levels(&self) -> Vec<Vec<usize>> {
        let mut levels: Vec<Vec<usize>> = Vec::new();
        let mut current = None;
        for e in self.entries.iter().filter(|e| e.stage == Stage::Decoder) {
            if current != Some(e.level) {
                levels.push(Vec::new());
                current = Some(e.level);
            }
            levels.last_mut().unwrap().push(e.id);
        }
        levels
    }

    /// Encoder block mirroring decoder block `decoder_id`: `2M − decoder_id`.
    pub fn symmetric_partner(&self, decoder_id: usize) -> Result<usize> {
        let entry = self.get(decoder_id)?;
        if entry.stage != Stage::Decoder {
            return Err(Error::NotDecoder(decoder_id));
        }
        Ok(2 * self.mid_id() - decoder_id)
    }

    /// Catalog of the model `config` describes; no weights are built.
    pub fn from_config(config: &UNetConfig) -> Self {
        let mut entries = Vec::new();
        let mut push = |stage, spatial, channels, level| {
            let id = entries.len() + 1;
            entries.push(BlockEntry {
                id,
                stage,
                spatial,
                channels,
                level,
            });
        };
        let levels = config.channel_mults.len();
        let r = config.res_blocks_per_stage;
        let mut size = config.image_size;
        push(Stage::Encoder, size, config.base_channels, 0);
        for level in 0..levels {
            let ch = config.level_channels(level);
            for _ in 0..r {
                push(Stage::Encoder, size, ch, level);
            }
            if level + 1 < levels {
                size /= 2;
                push(Stage::Encoder, size, ch, level);
            }
        }
        push(
            Stage::Mid,
            size,
            config.level_channels(levels - 1),
            levels - 1,
        );
        for level in (0..levels).rev() {
            if level + 1 < levels {
                size *= 2;
            }
            for _ in 0..=r {
                push(Stage::Decoder, size, config.level_channels(level), level);
            }
        }
        Self { entries }
    }
}

/// Sinusoidal embedding `[sin(t·f_0..f_{h−1}) | cos(t·f_0..f_{h−1})]` with
/// `f_i = 10000^{−i/h}` and `h = dim/2`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Parameter {
            field: "dim",
            reason: format!("{dim} must be even and positive"),
        });
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-MAX_PERIOD.ln() * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Keep,
    Down,
    Up,
}

#[derive(Clone, Debug)]
struct ResBlock {
    in_norm: GroupNorm,
    in_conv: Conv2d,
    emb: Linear,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    skip: Option<Conv2d>,
    resample: Resample,
    out_channels: usize,
}

impl ResBlock {
    fn new(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        resample: Resample,
    ) -> Self {
        Self {
            in_norm: GroupNorm::new(
                layout,
                &format!("{name}.in_norm"),
                cin,
                group_count(cin, NORM_GROUPS),
            ),
            in_conv: Conv2d::new(layout, &format!("{name}.in_conv"), cin, cout, 3),
            emb: Linear::new(layout, &format!("{name}.emb"), emb_dim, 2 * cout),
            out_norm: GroupNorm::new(
                layout,
                &format!("{name}.out_norm"),
                cout,
                group_count(cout, NORM_GROUPS),
            ),
            out_conv: Conv2d::with_init(
                layout,
                &format!("{name}.out_conv"),
                cout,
                cout,
                3,
                Init::Zeros,
            ),
            skip: (cin != cout).then(|| {
                Conv2d::with_init(
                    layout,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    1,
                    Init::Uniform(fan_in_bound(cin)),
                )
            }),
            resample,
            out_channels: cout,
        }
    }

    fn resample(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        match self.resample {
            Resample::Keep => x,
            Resample::Down => g.adaptive_avg_pool(x, s[2] / 2, s[3] / 2),
            Resample::Up => g.resize_nearest(x, s[2] * 2, s[3] * 2),
        }
    }

    /// `emb` is the activated time embedding `[N, E]`.
    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, emb: Var) -> Var {
        let h = self.in_norm.forward(g, p, x);
        let h = g.silu(h);
        let h = self.resample(g, h);
        let x = self.resample(g, x);
        let h = self.in_conv.forward(g, p, h);
        let e = self.emb.forward(g, p, emb);
        let scale = g.slice(e, 1, 0, self.out_channels);
        let shift = g.slice(e, 1, self.out_channels, self.out_channels);
        let h = self.out_norm.forward(g, p, h);
        let h = g.channel_affine(h, scale, shift);
        let h = g.silu(h);
        let h = self.out_conv.forward(g, p, h);
        let x = match &self.skip {
            Some(conv) => conv.forward(g, p, x),
            None => x,
        };
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl AttnBlock {
    fn new(layout: &mut ParamLayout, name: &str, channels: usize, heads: usize) -> Self {
        Self {
            norm: GroupNorm::new(
                layout,
                &format!("{name}.norm"),
                channels,
                group_count(channels, NORM_GROUPS),
            ),
            attn: SelfAttention::new(layout, name, channels, heads, true),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let h = self.norm.forward(g, p, x);
        let h = g.reshape(h, [s[0], s[1], s[2] * s[3]]);
        let h = self.attn.forward(g, p, h);
        let h = g.reshape(h, s);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
enum Unit {
    Input(Conv2d),
    Encoder {
        res: ResBlock,
        attn: Option<AttnBlock>,
    },
    Mid {
        first: ResBlock,
        attn: AttnBlock,
        second: ResBlock,
    },
    Decoder {
        up: Option<ResBlock>,
        res: ResBlock,
        attn: Option<AttnBlock>,
    },
}

#[derive(Clone, Debug)]
struct Architecture {
    time_in: Linear,
    time_out: Linear,
    units: Vec<Unit>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

fn architecture(config: &UNetConfig) -> (ParamLayout, Architecture, BlockCatalog) {
    let catalog = BlockCatalog::from_config(config);
    let mut layout = ParamLayout::new();
    let base = config.base_channels;
    let emb = config.time_embed_dim;
    let time_in = Linear::new(&mut layout, "time.0", base, emb);
    let time_out = Linear::new(&mut layout, "time.1", emb, emb);

    let mut units = Vec::with_capacity(catalog.len());
    let mut skip_channels = Vec::new();
    let levels = config.channel_mults.len();
    let r = config.res_blocks_per_stage;
    let attn_at = |size: usize| config.attention_sizes.contains(&size);
    let mut size = config.image_size;
    let mut ch = base;

    units.push(Unit::Input(Conv2d::new(
        &mut layout,
        "b1.conv",
        config.in_channels,
        base,
        3,
    )));
    skip_channels.push(ch);
    for level in 0..levels {
        let out = config.level_channels(level);
        for _ in 0..r {
            let name = format!("b{}", units.len() + 1);
            let res = ResBlock::new(
                &mut layout,
                &format!("{name}.res"),
                ch,
                out,
                emb,
                Resample::Keep,
            );
            ch = out;
            let attn = attn_at(size).then(|| {
                AttnBlock::new(
                    &mut layout,
                    &format!("{name}.attn"),
                    ch,
                    config.heads_for(ch),
                )
            });
            units.push(Unit::Encoder { res, attn });
            skip_channels.push(ch);
        }
        if level + 1 < levels {
            let name = format!("b{}", units.len() + 1);
            let res = ResBlock::new(
                &mut layout,
                &format!("{name}.down"),
                ch,
                ch,
                emb,
                Resample::Down,
            );
            size /= 2;
            units.push(Unit::Encoder { res, attn: None });
            skip_channels.push(ch);
        }
    }
    let name = format!("b{}", units.len() + 1);
    units.push(Unit::Mid {
        first: ResBlock::new(
            &mut layout,
            &format!("{name}.res0"),
            ch,
            ch,
            emb,
            Resample::Keep,
        ),
        attn: AttnBlock::new(
            &mut layout,
            &format!("{name}.attn"),
            ch,
            config.heads_for(ch),
        ),
        second: ResBlock::new(
            &mut layout,
            &format!("{name}.res1"),
            ch,
            ch,
            emb,
            Resample::Keep,
        ),
    });
    for level in (0..levels).rev() {
        let out = config.level_channels(level);
        for i in 0..=r {
            let name = format!("b{}", units.len() + 1);
            let up = (i == 0 && level + 1 < levels).then(|| {
                size *= 2;
                ResBlock::new(
                    &mut layout,
                    &format!("{name}.up"),
                    ch,
                    ch,
                    emb,
                    Resample::Up,
                )
            });
            let skip = skip_channels.pop().expect("one skip per decoder block");
            let res = ResBlock::new(
                &mut layout,
                &format!("{name}.res"),
                ch + skip,
                out,
                emb,
                Resample::Keep,
            );
            ch = out;
            let attn = attn_at(size).then(|| {
                AttnBlock::new(
                    &mut layout,
                    &format!("{name}.attn"),
                    ch,
                    config.heads_for(ch),
                )
            });
            units.push(Unit::Decoder { up, res, attn });
        }
    }
    let out_norm = GroupNorm::new(&mut layout, "out.norm", ch, group_count(ch, NORM_GROUPS));
    let out_conv = Conv2d::with_init(
        &mut layout,
        "out.conv",
        ch,
        config.in_channels,
        3,
        Init::Zeros,
    );
    (
        layout,
        Architecture {
            time_in,
            time_out,
            units,
            out_norm,
            out_conv,
        },
        catalog,
    )
}

/// Scalar parameter count of the model `config` describes, without
/// allocating any weights.
pub fn count_parameters(config: &UNetConfig) -> Result<usize> {
    config.validate()?;
    Ok(architecture(config).0.count())
}

/// Observes and optionally rewrites block outputs during a forward pass.
pub trait BlockHooks {
    /// Called with the output of block `id`; the returned value replaces it.
    fn after_block(&mut self, g: &mut Graph, id: usize, out: Var) -> Var;

    /// Stop the pass once this block has run.
    fn last_block(&self) -> Option<usize> {
        None
    }
}

pub struct NoHooks;

impl BlockHooks for NoHooks {
    fn after_block(&mut self, _: &mut Graph, _: usize, out: Var) -> Var {
        out
    }
}

/// Records the graph handles of selected blocks.
#[derive(Debug, Default)]
pub struct Taps {
    wanted: BTreeSet<usize>,
    stop_early: bool,
    pub found: BTreeMap<usize, Var>,
}

impl Taps {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            wanted: ids.into_iter().collect(),
            stop_early: false,
            found: BTreeMap::new(),
        }
    }

    /// Skip every block after the deepest tap.
    pub fn stopping(mut self) -> Self {
        self.stop_early = true;
        self
    }
}

impl BlockHooks for Taps {
    fn after_block(&mut self, _: &mut Graph, id: usize, out: Var) -> Var {
        if self.wanted.contains(&id) {
            self.found.insert(id, out);
        }
        out
    }

    fn last_block(&self) -> Option<usize> {
        if self.stop_early {
            self.wanted.iter().next_back().copied()
        } else {
            None
        }
    }
}

/// A U-Net with its parameters and block catalog.
#[derive(Debug)]
pub struct DenoiserModel {
    pub config: UNetConfig,
    pub catalog: BlockCatalog,
    pub params: ParamStore,
    arch: Architecture,
    forwards: AtomicUsize,
}

impl Clone for DenoiserModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            catalog: self.catalog.clone(),
            params: self.params.clone(),
            arch: self.arch.clone(),
            forwards: AtomicUsize::new(self.forward_count()),
        }
    }
}

/// Build a model with parameters initialized deterministically from `seed`.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<DenoiserModel> {
    config.validate()?;
    let (layout, arch, catalog) = architecture(config);
    let params = layout.materialize(seed);
    Ok(DenoiserModel {
        config: config.clone(),
        catalog,
        params,
        arch,
        forwards: AtomicUsize::new(0),
    })
}

impl DenoiserModel {
    /// Rebuild a model around existing parameter tensors.
    pub fn from_tensors(config: &UNetConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, arch, catalog) = architecture(config);
        let params = ParamStore::from_tensors(&layout, tensors)?;
        Ok(Self {
            config: config.clone(),
            catalog,
            params,
            arch,
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Number of forward passes started since construction.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Shape of one input image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.config.image_size;
        [self.config.in_channels, s, s]
    }

    /// Accept `[C, H, W]` or `[N, C, H, W]`; returns the batched tensor and
    /// whether the input was a single image.
    pub fn batched(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        let image = self.image_shape();
        match x.rank() {
            3 if x.shape() == image => Ok((x.reshape([&[1], &image[..]].concat()), true)),
            4 if x.shape()[1..] == image => Ok((x.clone(), false)),
            _ => Err(Error::shape(
                "model input",
                &[&[0usize][..], &image[..]].concat(),
                x.shape(),
            )),
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::Timestep {
                t,
                max: self.config.timesteps,
            });
        }
        Ok(())
    }

    fn time_features(&self, ts: &[usize]) -> Tensor {
        let dim = self.config.base_channels;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend(time_embedding(t as f64, dim).expect("base channels validated even"));
        }
        Tensor::new([ts.len(), dim], data)
    }

    /// Run the network on graph values. `x` is `[N, C, H, W]` and `ts` holds
    /// one timestep per item. Returns `None` when the hooks stop the pass
    /// before the output layer.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Binding,
        x: Var,
        ts: &[usize],
        hooks: &mut dyn BlockHooks,
    ) -> Option<Var> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let a = &self.arch;
        let temb = g.constant(self.time_features(ts));
        let emb = a.time_in.forward(g, p, temb);
        let emb = g.silu(emb);
        let emb = a.time_out.forward(g, p, emb);
        let emb = g.silu(emb);

        let stop = hooks.last_block();
        let mut skips = Vec::new();
        let mut h = x;
        for (index, unit) in a.units.iter().enumerate() {
            let id = index + 1;
            h = match unit {
                Unit::Input(conv) => conv.forward(g, p, h),
                Unit::Encoder { res, attn } => {
                    let h = res.forward(g, p, h, emb);
                    match attn {
                        Some(attn) => attn.forward(g, p, h),
                        None => h,
                    }
                }
                Unit::Mid {
                    first,
                    attn,
                    second,
                } => {
                    let h = first.forward(g, p, h, emb);
                    let h = attn.forward(g, p, h);
                    second.forward(g, p, h, emb)
                }
                Unit::Decoder { up, res, attn } => {
                    let h = match up {
                        Some(up) => up.forward(g, p, h, emb),
                        None => h,
                    };
                    let skip = skips.pop().expect("skip stack matches decoder blocks");
                    let h = g.concat(&[h, skip], 1);
                    let h = res.forward(g, p, h, emb);
                    match attn {
                        Some(attn) => attn.forward(g, p, h),
                        None => h,
                    }
                }
            };
            h = hooks.after_block(g, id, h);
            if matches!(unit, Unit::Input(_) | Unit::Encoder { .. }) {
                skips.push(h);
            }
            if stop == Some(id) {
                return None;
            }
        }
        let h = a.out_norm.forward(g, p, h);
        let h = g.silu(h);
        Some(a.out_conv.forward(g, p, h))
    }

    fn validated_batch(&self, x_t: &Tensor, ts: &[usize]) -> Result<(Tensor, bool)> {
        let (x, single) = self.batched(x_t)?;
        if ts.len() != x.dim(0) {
            return Err(Error::CountMismatch {
                what: "timesteps vs batch",
                left: ts.len(),
                right: x.dim(0),
            });
        }
        for &t in ts {
            self.check_timestep(t)?;
        }
        Ok((x, single))
    }

    /// Predicted noise for a batch with one timestep per item.
    pub fn forward_denoise_batch(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (x, single) = self.validated_batch(x_t, ts)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let out = self
            .forward_graph(&mut g, &p, xv, ts, &mut NoHooks)
            .expect("no early stop");
        let out = g.value(out).clone();
        Ok(if single {
            out.reshape(x_t.shape().to_vec())
        } else {
            out
        })
    }

    /// Predicted noise for `[C, H, W]` or `[N, C, H, W]` input at timestep `t`.
    pub fn forward_denoise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let n = if x_t.rank() == 4 { x_t.dim(0) } else { 1 };
        self.forward_denoise_batch(x_t, &vec![t; n])
    }

    /// Predicted noise plus the activations of the requested blocks, each
    /// with a leading batch axis.
    pub fn forward_with_taps(
        &self,
        x_t: &Tensor,
        t: usize,
        taps: &[usize],
    ) -> Result<(BTreeMap<usize, Tensor>, Tensor)> {
        for &id in taps {
            self.catalog.get(id)?;
        }
        let n = if x_t.rank() == 4 { x_t.dim(0) } else { 1 };
        let ts = vec![t; n];
        let (x, single) = self.validated_batch(x_t, &ts)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let mut hooks = Taps::new(taps.iter().copied());
        let out = self
            .forward_graph(&mut g, &p, xv, &ts, &mut hooks)
            .expect("no early stop");
        let features = hooks
            .found
            .iter()
            .map(|(&id, &v)| (id, g.value(v).clone()))
            .collect();
        let out = g.value(out).clone();
        Ok((
            features,
            if single {
                out.reshape(x_t.shape().to_vec())
            } else {
                out
            },
        ))
    }

    /// Activations of `taps` for a batch, skipping every block after the
    /// deepest tap.
    pub fn tap_blocks(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        taps: &[usize],
    ) -> Result<BTreeMap<usize, Tensor>> {
        for &id in taps {
            self.catalog.get(id)?;
        }
        let (x, _) = self.validated_batch(x_t, ts)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let mut hooks = Taps::new(taps.iter().copied()).stopping();
        self.forward_graph(&mut g, &p, xv, ts, &mut hooks);
        Ok(hooks
            .found
            .iter()
            .map(|(&id, &v)| (id, g.value(v).clone()))
            .collect())
    }
}

impl Denoiser for DenoiserModel {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.forward_denoise(x_t, t)
    }
}
