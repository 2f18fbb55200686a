//! Two-pass feedback extraction. A first pass stores selected decoder
//! activations; a small network maps each onto an encoder block, and a
//! second pass adds those maps to the encoder outputs before tapping the
//! final feature.

use std::collections::BTreeMap;

use diffrep_tensor::nn::{fan_in_bound, BatchNorm, Conv2d};
use diffrep_tensor::{
    BatchStats, Binding, Graph, Init, ParamId, ParamLayout, ParamStore, Tensor, Var,
};
use serde::{Deserialize, Serialize};

use crate::ddpm::{forward_noise_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::{chunked, concat_batches, image_noise, FeatureMap};
use crate::heads::{
    build_difformer, AttentionHeadConfig, BlockInput, DifFormerConfig, FusionModel, ProbeModel,
};
use crate::unet::{BlockCatalog, BlockHooks, DenoiserModel, Taps};

/// Decoder blocks in the windowed strategies.
pub const WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    All,
    Bottleneck,
    Windowed,
    MultiScale,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Strategy::All),
            "bottleneck" => Ok(Strategy::Bottleneck),
            "windowed" => Ok(Strategy::Windowed),
            "multi-scale" => Ok(Strategy::MultiScale),
            other => Err(Error::Parameter {
                field: "strategy",
                reason: format!(
                    "unknown strategy {other:?}; expected all, bottleneck, windowed or multi-scale"
                ),
            }),
        }
    }
}

/// Which decoder blocks feed back, where each one lands, and what the
/// second pass returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPlan {
    pub strategy: Strategy,
    /// Source blocks in execution order.
    pub decoder_blocks: Vec<usize>,
    /// Decoder id to the encoder block whose output receives its feedback.
    pub injection: BTreeMap<usize, usize>,
    pub final_block: usize,
    pub t: usize,
}

impl FeedbackPlan {
    /// Check the plan against a catalog.
    pub fn validate(&self, catalog: &BlockCatalog) -> Result<()> {
        let decoders = catalog.decoder_ids();
        if !decoders.contains(&self.final_block) {
            return Err(Error::NotDecoder(self.final_block));
        }
        if self.decoder_blocks.is_empty() {
            return Err(Error::Invalid(
                "feedback plan selects no decoder blocks".into(),
            ));
        }
        for &d in &self.decoder_blocks {
            if !decoders.contains(&d) {
                return Err(Error::NotDecoder(d));
            }
            let target = *self.injection.get(&d).ok_or_else(|| {
                Error::Invalid(format!("decoder block {d} has no injection target"))
            })?;
            let entry = catalog.get(target)?;
            if entry.stage != crate::unet::Stage::Encoder {
                return Err(Error::Invalid(format!(
                    "injection target {target} is not an encoder block"
                )));
            }
        }
        if self.injection.len() != self.decoder_blocks.len() {
            return Err(Error::CountMismatch {
                what: "injection entries vs decoder blocks",
                left: self.injection.len(),
                right: self.decoder_blocks.len(),
            });
        }
        Ok(())
    }

    /// Deepest block the first pass must reach.
    pub fn first_pass_depth(&self) -> usize {
        self.decoder_blocks.iter().copied().max().unwrap_or(0)
    }
}

/// Select decoder blocks and injection targets for `strategy`.
pub fn make_feedback_plan(
    strategy: Strategy,
    catalog: &BlockCatalog,
    final_block: usize,
    t: usize,
) -> Result<FeedbackPlan> {
    if t == 0 {
        return Err(Error::Timestep { t, max: usize::MAX });
    }
    let decoders = catalog.decoder_ids();
    if !decoders.contains(&final_block) {
        catalog.get(final_block)?;
        return Err(Error::NotDecoder(final_block));
    }
    let decoder_blocks: Vec<usize> = match strategy {
        Strategy::All => decoders.clone(),
        Strategy::Bottleneck => catalog
            .decoder_levels()
            .iter()
            .map(|level| level[level.len() / 2])
            .collect(),
        Strategy::Windowed | Strategy::MultiScale => {
            if decoders.len() < WINDOW {
                return Err(Error::Invalid(format!(
                    "{strategy:?} feedback needs {WINDOW} decoder blocks, catalog has {}",
                    decoders.len()
                )));
            }
            decoders[..WINDOW].to_vec()
        }
    };
    let injection = match strategy {
        Strategy::MultiScale => {
            let target = catalog.symmetric_partner(decoder_blocks[WINDOW - 1])?;
            decoder_blocks.iter().map(|&d| (d, target)).collect()
        }
        _ => decoder_blocks
            .iter()
            .map(|&d| Ok((d, catalog.symmetric_partner(d)?)))
            .collect::<Result<_>>()?,
    };
    let plan = FeedbackPlan {
        strategy,
        decoder_blocks,
        injection,
        final_block,
        t,
    };
    plan.validate(catalog)?;
    Ok(plan)
}

/// Transform for one decoder block: optional nearest resampling, a 1×1
/// convolution to the target's channels, batch norm, ReLU and a
/// per-channel gate.
#[derive(Clone, Debug)]
pub struct FeedbackUnit {
    pub decoder: usize,
    pub target: usize,
    /// Spatial side of the target block.
    pub side: usize,
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub gate: ParamId,
}

impl FeedbackUnit {
    /// Feedback map `[N, C_target, side, side]` from a decoder activation.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        store: &ParamStore,
        decoder_map: Var,
        train: bool,
    ) -> (Var, Option<BatchStats>) {
        let s = g.shape(decoder_map).to_vec();
        let h = if s[2] != self.side || s[3] != self.side {
            g.resize_nearest(decoder_map, self.side, self.side)
        } else {
            decoder_map
        };
        let h = self.conv.forward(g, p, h);
        let (h, stats) = self.norm.forward(g, p, store, h, train);
        let h = g.relu(h);
        (g.channel_scale(h, p.var(self.gate)), stats)
    }
}

#[derive(Clone, Debug)]
pub struct FeedbackNet {
    pub plan: FeedbackPlan,
    pub units: Vec<FeedbackUnit>,
    pub params: ParamStore,
}

fn feedback_layout(
    plan: &FeedbackPlan,
    catalog: &BlockCatalog,
) -> Result<(ParamLayout, Vec<FeedbackUnit>)> {
    plan.validate(catalog)?;
    let mut layout = ParamLayout::new();
    let mut units = Vec::with_capacity(plan.decoder_blocks.len());
    for &d in &plan.decoder_blocks {
        let target = plan.injection[&d];
        let (src, dst) = (catalog.get(d)?, catalog.get(target)?);
        let name = format!("fb{d}");
        let conv = Conv2d::with_init(
            &mut layout,
            &format!("{name}.conv"),
            src.channels,
            dst.channels,
            1,
            Init::Uniform(fan_in_bound(src.channels)),
        );
        let norm = BatchNorm::new(&mut layout, &format!("{name}.norm"), dst.channels);
        let gate = layout.add(format!("{name}.gate"), [dst.channels], Init::Zeros);
        units.push(FeedbackUnit {
            decoder: d,
            target,
            side: dst.spatial,
            conv,
            norm,
            gate,
        });
    }
    Ok((layout, units))
}

/// Feedback network for `plan`. Gates start at zero, so the untrained net
/// contributes exactly nothing.
pub fn build_feedback_net(
    plan: &FeedbackPlan,
    catalog: &BlockCatalog,
    seed: u64,
) -> Result<FeedbackNet> {
    let (layout, units) = feedback_layout(plan, catalog)?;
    Ok(FeedbackNet {
        plan: plan.clone(),
        units,
        params: layout.materialize(seed),
    })
}

/// Trainable parameter count of the feedback net for `plan`, without
/// allocating it.
pub fn feedback_parameter_count(plan: &FeedbackPlan, catalog: &BlockCatalog) -> Result<usize> {
    Ok(feedback_layout(plan, catalog)?.0.count())
}

impl FeedbackNet {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Feedback per injection target, summed over the decoder blocks that
    /// share it. `decoder_maps` must hold every planned decoder block.
    pub fn feedback(
        &self,
        g: &mut Graph,
        p: &Binding,
        decoder_maps: &BTreeMap<usize, Var>,
        train: bool,
    ) -> Result<(BTreeMap<usize, Var>, Vec<(usize, BatchStats)>)> {
        let mut by_target: BTreeMap<usize, Var> = BTreeMap::new();
        let mut stats = Vec::new();
        for (index, unit) in self.units.iter().enumerate() {
            let map = *decoder_maps
                .get(&unit.decoder)
                .ok_or(Error::UnknownBlock(unit.decoder))?;
            let (fb, s) = unit.forward(g, p, &self.params, map, train);
            if let Some(s) = s {
                stats.push((index, s));
            }
            let merged = match by_target.get(&unit.target) {
                Some(&prev) => g.add(prev, fb),
                None => fb,
            };
            by_target.insert(unit.target, merged);
        }
        Ok((by_target, stats))
    }

    /// Fold batch statistics from a training step into the running ones.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        for (index, s) in stats {
            self.units[*index].norm.update_running(&mut self.params, s);
        }
    }
}

/// Second-pass hooks: add feedback after each target block and keep the
/// final block's output.
struct Inject {
    feedback: BTreeMap<usize, Var>,
    final_block: usize,
    found: Option<Var>,
}

impl BlockHooks for Inject {
    fn after_block(&mut self, g: &mut Graph, id: usize, out: Var) -> Var {
        let out = match self.feedback.get(&id) {
            Some(&fb) => g.add(out, fb),
            None => out,
        };
        if id == self.final_block {
            self.found = Some(out);
        }
        out
    }

    fn last_block(&self) -> Option<usize> {
        Some(self.final_block)
    }
}

/// Both passes for a noised batch `x_t: [N, C, H, W]` at the plan's
/// timestep. The first pass runs on its own graph; the second is built in
/// `g` so gradients reach the feedback net. Returns the final-block map
/// and any batch statistics gathered in training mode.
pub fn two_pass_graph(
    model: &DenoiserModel,
    net: &FeedbackNet,
    g: &mut Graph,
    backbone: &Binding,
    feedback: &Binding,
    x_t: Var,
    train: bool,
) -> Result<(Var, Vec<(usize, BatchStats)>)> {
    let plan = &net.plan;
    let n = g.shape(x_t)[0];
    let ts = vec![plan.t; n];
    let first = model.tap_blocks(g.value(x_t), &ts, &plan.decoder_blocks)?;
    let maps: BTreeMap<usize, Var> = first
        .into_iter()
        .map(|(id, m)| (id, g.constant(m)))
        .collect();
    let (fb, stats) = net.feedback(g, feedback, &maps, train)?;
    let mut hooks = Inject {
        feedback: fb,
        final_block: plan.final_block,
        found: None,
    };
    model.forward_graph(g, backbone, x_t, &ts, &mut hooks);
    let out = hooks.found.ok_or(Error::UnknownBlock(plan.final_block))?;
    Ok((out, stats))
}

fn check_consistency(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    net: &FeedbackNet,
    plan: &FeedbackPlan,
) -> Result<()> {
    if &net.plan != plan {
        return Err(Error::Invalid(
            "feedback net was built for a different plan".into(),
        ));
    }
    plan.validate(&model.catalog)?;
    schedule.check_timestep(plan.t)?;
    model.check_timestep(plan.t)
}

/// Final-block features of a batch after both passes, in evaluation mode.
/// `seeds` holds one noise seed per image.
pub fn diffeed_extract_batch(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    net: &FeedbackNet,
    images: &Tensor,
    seeds: &[u64],
    draw: u64,
) -> Result<Tensor> {
    let (x0, _) = model.batched(images)?;
    let n = x0.dim(0);
    if seeds.len() != n {
        return Err(Error::CountMismatch {
            what: "seeds vs images",
            left: seeds.len(),
            right: n,
        });
    }
    let shape = model.image_shape();
    let eps = Tensor::stack(
        &seeds
            .iter()
            .map(|&s| image_noise(s, draw, &shape))
            .collect::<Vec<_>>(),
    );
    let ts = vec![net.plan.t; n];
    let x_t = forward_noise_batch(schedule, &x0, &ts, &eps)?;
    let mut g = Graph::new();
    let backbone = model.params.bind(&mut g, false);
    let feedback = net.params.bind(&mut g, false);
    let xv = g.constant(x_t);
    let (out, _) = two_pass_graph(model, net, &mut g, &backbone, &feedback, xv, false)?;
    Ok(g.value(out).clone())
}

/// Feedback feature of one `[C, H, W]` image noised with `seed` (draw 0).
/// Performs exactly two backbone passes.
pub fn diffeed_extract(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    net: &FeedbackNet,
    plan: &FeedbackPlan,
    x0: &Tensor,
    seed: u64,
) -> Result<FeatureMap> {
    check_consistency(model, schedule, net, plan)?;
    if x0.shape() != model.image_shape() {
        return Err(Error::shape("image", &model.image_shape(), x0.shape()));
    }
    let map = diffeed_extract_batch(model, schedule, net, x0, &[seed], 0)?;
    Ok(FeatureMap {
        data: map.index_batch(0),
        t: plan.t,
        block: plan.final_block,
        noise_seed: seed,
        noise_draw: 0,
    })
}

/// Feedback features for a dataset in fixed-size chunks; `seeds[i]` is the
/// noise seed of image `i`.
pub fn diffeed_extract_dataset(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    net: &FeedbackNet,
    images: &Tensor,
    seeds: &[u64],
    draw: u64,
) -> Result<Tensor> {
    check_consistency(model, schedule, net, &net.plan)?;
    let parts = chunked(images.dim(0), |idx| {
        let batch = images.gather_batch(idx);
        let s: Vec<u64> = idx.iter().map(|&i| seeds[i]).collect();
        diffeed_extract_batch(model, schedule, net, &batch, &s, draw)
    })?;
    Ok(concat_batches(&parts))
}

/// Feedback net plus an attention head on the final block, trained on
/// noised images with the backbone frozen.
pub struct DifFeedProbe<'a> {
    pub model: &'a DenoiserModel,
    pub net: FeedbackNet,
    pub head: FusionModel,
    /// When false the feedback net is held fixed and only the head trains.
    pub train_feedback: bool,
    pending: Vec<(usize, BatchStats)>,
}

impl<'a> DifFeedProbe<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        net: FeedbackNet,
        head: AttentionHeadConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let entry = model.catalog.get(net.plan.final_block)?;
        let config = DifFormerConfig {
            times: vec![net.plan.t],
            blocks: vec![BlockInput {
                block: entry.id,
                channels: entry.channels,
                side: entry.spatial,
            }],
            head,
            num_classes,
        };
        let head = build_difformer(&config, seed)?;
        Ok(Self {
            model,
            net,
            head,
            train_feedback: true,
            pending: Vec::new(),
        })
    }
}

impl ProbeModel for DifFeedProbe<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        if self.train_feedback {
            vec![&self.net.params, &self.head.params]
        } else {
            vec![&self.head.params]
        }
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        if self.train_feedback {
            vec![&mut self.net.params, &mut self.head.params]
        } else {
            vec![&mut self.head.params]
        }
    }

    fn logits(
        &mut self,
        g: &mut Graph,
        bindings: &[Binding],
        inputs: &[Var],
        train: bool,
    ) -> Result<Var> {
        if inputs.len() != 1 {
            return Err(Error::CountMismatch {
                what: "feedback probe inputs",
                left: inputs.len(),
                right: 1,
            });
        }
        let backbone = self.model.params.bind(g, false);
        let fixed;
        let feedback = if self.train_feedback {
            &bindings[0]
        } else {
            fixed = self.net.params.bind(g, false);
            &fixed
        };
        let learn = train && self.train_feedback;
        let (map, stats) = two_pass_graph(
            self.model, &self.net, g, &backbone, feedback, inputs[0], learn,
        )?;
        if learn {
            self.pending = stats;
        }
        Ok(self
            .head
            .head
            .forward(g, bindings.last().expect("head binding"), &[map]))
    }

    fn after_step(&mut self) {
        let stats = std::mem::take(&mut self.pending);
        self.net.update_running(&stats);
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "head": "diffeed",
            "plan": self.net.plan,
            "feedback_parameters": self.net.parameter_count(),
            "train_feedback": self.train_feedback,
            "head_parameters": self.head.params.count(),
            "head_config": self.head.head.config,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalBlockRow {
    pub block: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalBlockSweep {
    pub rows: Vec<FinalBlockRow>,
    pub selected: usize,
}

/// Score every candidate final block with `evaluate` and pick the most
/// accurate, preferring the lowest id on ties.
pub fn choose_final_block<F>(
    catalog: &BlockCatalog,
    candidates: &[usize],
    mut evaluate: F,
) -> Result<FinalBlockSweep>
where
    F: FnMut(usize) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidate final blocks".into()));
    }
    let decoders = catalog.decoder_ids();
    for &c in candidates {
        if !decoders.contains(&c) {
            catalog.get(c)?;
            return Err(Error::NotDecoder(c));
        }
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for &block in candidates {
        rows.push(FinalBlockRow {
            block,
            accuracy: evaluate(block)?,
        });
    }
    let best = rows
        .iter()
        .max_by(|a, b| {
            a.accuracy
                .total_cmp(&b.accuracy)
                .then(b.block.cmp(&a.block))
        })
        .expect("non-empty");
    let selected = best.block;
    Ok(FinalBlockSweep { rows, selected })
}

/// Plain first-pass taps of the planned decoder blocks, for inspection.
pub fn first_pass_taps(
    model: &DenoiserModel,
    x_t: &Tensor,
    plan: &FeedbackPlan,
) -> Result<BTreeMap<usize, Tensor>> {
    let (x, _) = model.batched(x_t)?;
    let ts = vec![plan.t; x.dim(0)];
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let xv = g.constant(x);
    let mut taps = Taps::new(plan.decoder_blocks.iter().copied()).stopping();
    model.forward_graph(&mut g, &p, xv, &ts, &mut taps);
    Ok(taps
        .found
        .iter()
        .map(|(&id, &v)| (id, g.value(v).clone()))
        .collect())
}
