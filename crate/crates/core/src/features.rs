//! Diffusion features: noise an image to step `t`, run the U-Net, and keep
//! the activation after block `b`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use diffrep_tensor::rng::{derive_seed, stream};
use diffrep_tensor::{Binding, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::ddpm::{forward_noise_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::heads::{Head, ProbeModel};
use crate::unet::{DenoiserModel, Taps};

/// Images per U-Net call during dataset extraction. Fixed so results never
/// depend on how work is split between workers.
pub const EXTRACT_CHUNK: usize = 16;

/// Where the noise for a feature comes from.
#[derive(Clone, Debug)]
pub enum NoisePolicy {
    /// The same draw for an image every time.
    Fixed,
    /// A new draw on every extraction, counted from zero per policy value.
    Fresh(Arc<AtomicU64>),
}

impl NoisePolicy {
    pub fn fresh() -> Self {
        NoisePolicy::Fresh(Arc::new(AtomicU64::new(0)))
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoisePolicy::Fixed => "fixed",
            NoisePolicy::Fresh(_) => "fresh",
        }
    }

    /// Draw index for the next extraction. Fixed noise is draw 0; fresh
    /// draws start at 1.
    fn next_draw(&self) -> u64 {
        match self {
            NoisePolicy::Fixed => 0,
            NoisePolicy::Fresh(counter) => counter.fetch_add(1, Ordering::Relaxed) + 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureRequest {
    pub t: usize,
    pub block: usize,
    /// Target side length for adaptive average pooling.
    pub pool: Option<usize>,
    pub noise: NoisePolicy,
}

impl FeatureRequest {
    pub fn new(t: usize, block: usize) -> Self {
        Self {
            t,
            block,
            pool: None,
            noise: NoisePolicy::Fixed,
        }
    }

    pub fn pooled(mut self, side: usize) -> Self {
        self.pool = Some(side);
        self
    }

    pub fn validate(&self, model: &DenoiserModel, schedule: &NoiseSchedule) -> Result<()> {
        schedule.check_timestep(self.t)?;
        model.catalog.get(self.block)?;
        if self.pool == Some(0) {
            return Err(Error::Parameter {
                field: "pool",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// `[C, H, W]`.
    pub data: Tensor,
    pub t: usize,
    pub block: usize,
    pub noise_seed: u64,
    pub noise_draw: u64,
}

/// Seed of image `index` under a master seed.
pub fn image_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, "image", index as u64)
}

/// Gaussian noise for one image and draw.
pub fn image_noise(seed: u64, draw: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), &mut stream(seed, "noise", draw))
}

/// Adaptive average pooling of `[.., H, W]` to `out × out`. Maps no larger
/// than `out` are returned unchanged.
pub fn adaptive_avg_pool(map: &Tensor, out: usize) -> Tensor {
    let s = map.shape();
    let r = s.len();
    assert!(r >= 2, "pooling needs spatial axes");
    let (h, w) = (s[r - 2], s[r - 1]);
    if out == 0 || (out >= h && out >= w) {
        return map.clone();
    }
    let (oh, ow) = (out.min(h), out.min(w));
    let planes = map.numel() / (h * w);
    let src = map.data();
    let mut data = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (r0, r1) = ((i * h) / oh, ((i + 1) * h).div_ceil(oh));
            for j in 0..ow {
                let (c0, c1) = ((j * w) / ow, ((j + 1) * w).div_ceil(ow));
                let mut sum = 0.0;
                for row in plane[r0 * w..r1 * w].chunks(w) {
                    sum += row[c0..c1].iter().sum::<f64>();
                }
                data.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, data)
}

/// Noise each image of `images: [N, C, H, W]` with its own seed and draw,
/// then tap `blocks` at timestep `t`. Maps are pooled to `pool` when given.
pub fn extract_batch(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    images: &Tensor,
    seeds: &[u64],
    draw: u64,
    t: usize,
    blocks: &[usize],
    pool: Option<usize>,
) -> Result<BTreeMap<usize, Tensor>> {
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
    let eps: Vec<Tensor> = seeds
        .iter()
        .map(|&s| image_noise(s, draw, &shape))
        .collect();
    let eps = Tensor::stack(&eps);
    let ts = vec![t; n];
    let x_t = forward_noise_batch(schedule, &x0, &ts, &eps)?;
    let taps = model.tap_blocks(&x_t, &ts, blocks)?;
    Ok(taps
        .into_iter()
        .map(|(id, map)| {
            (
                id,
                pool.map_or_else(|| map.clone(), |p| adaptive_avg_pool(&map, p)),
            )
        })
        .collect())
}

/// Feature of a single `[C, H, W]` image.
pub fn extract_feature(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    request: &FeatureRequest,
    seed: u64,
) -> Result<FeatureMap> {
    request.validate(model, schedule)?;
    if x0.shape() != model.image_shape() {
        return Err(Error::shape("image", &model.image_shape(), x0.shape()));
    }
    let draw = request.noise.next_draw();
    let mut maps = extract_batch(
        model,
        schedule,
        x0,
        &[seed],
        draw,
        request.t,
        &[request.block],
        request.pool,
    )?;
    let map = maps.remove(&request.block).expect("requested tap present");
    Ok(FeatureMap {
        data: map.index_batch(0),
        t: request.t,
        block: request.block,
        noise_seed: seed,
        noise_draw: draw,
    })
}

/// Features of a whole dataset, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    /// `[N, C, H, W]`, or `[N, D]` when flattened.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureStore {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn flattened(&self) -> Tensor {
        let n = self.features.dim(0);
        self.features.reshape([n, self.features.numel() / n.max(1)])
    }
}

/// Run `f` over fixed-size chunks of `0..n` and concatenate the results in
/// index order. Chunk boundaries never depend on the worker count.
pub(crate) fn chunked<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[usize]) -> Result<T> + Sync,
{
    let indices: Vec<usize> = (0..n).collect();
    indices.par_chunks(EXTRACT_CHUNK).map(|c| f(c)).collect()
}

pub(crate) fn concat_batches(parts: &[Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// Extract `request` for every image of `images: [N, C, H, W]`. Image `i`
/// uses seed [`image_seed`]`(seed, i)`, so row `i` equals
/// `extract_feature(images[i], request, image_seed(seed, i))` under fixed
/// noise. Runs on the current rayon pool.
pub fn precompute_features(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    images: &Tensor,
    labels: &[usize],
    request: &FeatureRequest,
    seed: u64,
    flatten: bool,
) -> Result<FeatureStore> {
    request.validate(model, schedule)?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Invalid("empty dataset".into()));
    }
    if images.rank() != 4 || images.dim(0) != n {
        return Err(Error::CountMismatch {
            what: "images vs labels",
            left: images.shape().first().copied().unwrap_or(0),
            right: n,
        });
    }
    let draw = request.noise.next_draw();
    let parts = chunked(n, |idx| {
        let batch = images.gather_batch(idx);
        let seeds: Vec<u64> = idx.iter().map(|&i| image_seed(seed, i)).collect();
        let mut maps = extract_batch(
            model,
            schedule,
            &batch,
            &seeds,
            draw,
            request.t,
            &[request.block],
            request.pool,
        )?;
        Ok(maps.remove(&request.block).expect("requested tap present"))
    })?;
    let mut features = concat_batches(&parts);
    if flatten {
        features = features.reshape([n, features.numel() / n]);
    }
    Ok(FeatureStore {
        features,
        labels: labels.to_vec(),
    })
}

/// `max(1, round(fraction · class size))` indices per class, drawn without
/// replacement and returned in ascending order.
pub fn class_balanced_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter {
            field: "fraction",
            reason: format!("{fraction} is outside (0, 1]"),
        });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut picked = Vec::new();
    for (class, mut members) in by_class {
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(&mut stream(seed, "subsample", class as u64));
        picked.extend_from_slice(&members[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Supplies minibatches of model inputs.
pub trait FeatureSource {
    fn labels(&self) -> &[usize];

    /// True when inputs are produced on demand from a backbone rather than
    /// read from a precomputed store.
    fn is_live(&self) -> bool {
        false
    }

    /// Called before each training epoch (1-based) and with `None` before
    /// evaluation.
    fn prepare(&mut self, epoch: Option<usize>) -> Result<()> {
        let _ = epoch;
        Ok(())
    }

    /// Inputs for the examples `indices`, one tensor per model input.
    fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor>>;

    fn describe(&self) -> serde_json::Value;
}

/// Precomputed inputs held in memory.
#[derive(Clone, Debug)]
pub struct StoredFeatures {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl StoredFeatures {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        for t in &inputs {
            if t.rank() == 0 || t.dim(0) != labels.len() {
                return Err(Error::CountMismatch {
                    what: "feature rows vs labels",
                    left: t.shape().first().copied().unwrap_or(0),
                    right: labels.len(),
                });
            }
        }
        Ok(Self { inputs, labels })
    }
}

impl FeatureSource for StoredFeatures {
    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor>> {
        Ok(self
            .inputs
            .iter()
            .map(|t| t.gather_batch(indices))
            .collect())
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "source": "stored", "shapes": self.inputs.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>() })
    }
}

/// Per-dimension affine map to zero mean and unit variance, fitted on a
/// `[N, ...]` batch. Constant dimensions are only centred.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Invalid(
                "cannot fit a standardizer on no rows".into(),
            ));
        }
        let d = x.numel() / n;
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| if *s > 0.0 { (n as f64 / s).sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.rank() == 0 || x.numel() != x.dim(0) * d {
            return Err(Error::shape(
                "standardized input",
                &[x.shape().first().copied().unwrap_or(0), d],
                x.shape(),
            ));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        Ok(Tensor::new(x.shape().to_vec(), out))
    }
}

/// Fit one standardizer per model input on every example of `source`,
/// using its evaluation-time inputs.
pub fn fit_standardizers(source: &mut dyn FeatureSource) -> Result<Vec<Standardizer>> {
    source.prepare(None)?;
    let all: Vec<usize> = (0..source.labels().len()).collect();
    source.batch(&all)?.iter().map(Standardizer::fit).collect()
}

/// A source whose inputs pass through fixed standardizers.
pub struct Standardized<S> {
    pub inner: S,
    pub maps: Vec<Standardizer>,
}

impl<S: FeatureSource> FeatureSource for Standardized<S> {
    fn labels(&self) -> &[usize] {
        self.inner.labels()
    }

    fn is_live(&self) -> bool {
        self.inner.is_live()
    }

    fn prepare(&mut self, epoch: Option<usize>) -> Result<()> {
        self.inner.prepare(epoch)
    }

    fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor>> {
        let inputs = self.inner.batch(indices)?;
        if inputs.len() != self.maps.len() {
            return Err(Error::CountMismatch {
                what: "inputs vs standardizers",
                left: inputs.len(),
                right: self.maps.len(),
            });
        }
        inputs
            .iter()
            .zip(&self.maps)
            .map(|(x, m)| m.apply(x))
            .collect()
    }

    fn describe(&self) -> serde_json::Value {
        let mut d = self.inner.describe();
        if let serde_json::Value::Object(map) = &mut d {
            map.insert("standardized".into(), true.into());
        }
        d
    }
}

/// Noise draw used for `epoch` (1-based) under a policy; evaluation and
/// fixed noise use draw 0.
pub fn epoch_draw(fresh: bool, epoch: Option<usize>) -> u64 {
    match (fresh, epoch) {
        (true, Some(e)) => e as u64,
        _ => 0,
    }
}

/// Backbone features of a labelled image set, extracted for a list of
/// `(t, block)` taps and cached per noise draw. With `fresh` set every
/// training epoch sees new noise; evaluation always uses draw 0.
pub struct ExtractedFeatures<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Index of each image in its dataset, used to derive its noise seed.
    pub image_ids: Vec<usize>,
    pub taps: Vec<(usize, usize)>,
    pub pool: Option<usize>,
    pub seed: u64,
    pub fresh: bool,
    cache: Option<(u64, Vec<Tensor>)>,
}

impl<'a> ExtractedFeatures<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        schedule: &'a NoiseSchedule,
        images: Tensor,
        labels: Vec<usize>,
        taps: Vec<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::CountMismatch {
                what: "images vs labels",
                left: images.shape().first().copied().unwrap_or(0),
                right: labels.len(),
            });
        }
        if taps.is_empty() {
            return Err(Error::Invalid("no feature taps requested".into()));
        }
        for &(t, b) in &taps {
            schedule.check_timestep(t)?;
            model.catalog.get(b)?;
        }
        let image_ids = (0..labels.len()).collect();
        Ok(Self {
            model,
            schedule,
            images,
            labels,
            image_ids,
            taps,
            pool: None,
            seed,
            fresh: false,
            cache: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), self.labels.len(), "one id per image");
        self.image_ids = ids;
        self.cache = None;
        self
    }

    pub fn pooled(mut self, pool: Option<usize>) -> Self {
        self.pool = pool;
        self.cache = None;
        self
    }

    pub fn fresh(mut self, fresh: bool) -> Self {
        self.fresh = fresh;
        self
    }

    /// Extract every tap of every image for one noise draw.
    pub fn extract_all(&self, draw: u64) -> Result<Vec<Tensor>> {
        let mut times: Vec<usize> = self.taps.iter().map(|&(t, _)| t).collect();
        times.sort_unstable();
        times.dedup();
        let parts = chunked(self.labels.len(), |idx| {
            let batch = self.images.gather_batch(idx);
            let seeds: Vec<u64> = idx
                .iter()
                .map(|&i| image_seed(self.seed, self.image_ids[i]))
                .collect();
            let mut by_tap = BTreeMap::new();
            for &t in &times {
                let blocks: Vec<usize> = self
                    .taps
                    .iter()
                    .filter(|(tt, _)| *tt == t)
                    .map(|&(_, b)| b)
                    .collect();
                let maps = extract_batch(
                    self.model,
                    self.schedule,
                    &batch,
                    &seeds,
                    draw,
                    t,
                    &blocks,
                    self.pool,
                )?;
                for (b, m) in maps {
                    by_tap.insert((t, b), m);
                }
            }
            Ok(self
                .taps
                .iter()
                .map(|k| by_tap[k].clone())
                .collect::<Vec<Tensor>>())
        })?;
        Ok((0..self.taps.len())
            .map(|k| concat_batches(&parts.iter().map(|p| p[k].clone()).collect::<Vec<_>>()))
            .collect())
    }
}

impl FeatureSource for ExtractedFeatures<'_> {
    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn prepare(&mut self, epoch: Option<usize>) -> Result<()> {
        let draw = epoch_draw(self.fresh, epoch);
        if self.cache.as_ref().map(|(d, _)| *d) != Some(draw) {
            let features = self.extract_all(draw)?;
            self.cache = Some((draw, features));
        }
        Ok(())
    }

    fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor>> {
        let (_, features) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Invalid("features not prepared".into()))?;
        Ok(features.iter().map(|t| t.gather_batch(indices)).collect())
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "source": "extracted",
            "taps": self.taps,
            "pool": self.pool,
            "noise": if self.fresh { "fresh per epoch, fixed for evaluation" } else { "fixed" },
            "seed": self.seed,
        })
    }
}

/// Images noised to a single timestep, for models that run the backbone
/// themselves.
pub struct NoisedImages<'a> {
    pub schedule: &'a NoiseSchedule,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub image_ids: Vec<usize>,
    pub t: usize,
    pub seed: u64,
    pub fresh: bool,
    draw: u64,
}

impl<'a> NoisedImages<'a> {
    pub fn new(
        schedule: &'a NoiseSchedule,
        images: Tensor,
        labels: Vec<usize>,
        t: usize,
        seed: u64,
    ) -> Result<Self> {
        schedule.check_timestep(t)?;
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::CountMismatch {
                what: "images vs labels",
                left: images.shape().first().copied().unwrap_or(0),
                right: labels.len(),
            });
        }
        let image_ids = (0..labels.len()).collect();
        Ok(Self {
            schedule,
            images,
            labels,
            image_ids,
            t,
            seed,
            fresh: false,
            draw: 0,
        })
    }

    pub fn with_ids(mut self, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), self.labels.len(), "one id per image");
        self.image_ids = ids;
        self
    }

    pub fn fresh(mut self, fresh: bool) -> Self {
        self.fresh = fresh;
        self
    }
}

impl FeatureSource for NoisedImages<'_> {
    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn is_live(&self) -> bool {
        true
    }

    fn prepare(&mut self, epoch: Option<usize>) -> Result<()> {
        self.draw = epoch_draw(self.fresh, epoch);
        Ok(())
    }

    fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor>> {
        let x0 = self.images.gather_batch(indices);
        let shape = &x0.shape()[1..];
        let eps: Vec<Tensor> = indices
            .iter()
            .map(|&i| image_noise(image_seed(self.seed, self.image_ids[i]), self.draw, shape))
            .collect();
        let ts = vec![self.t; indices.len()];
        Ok(vec![forward_noise_batch(
            self.schedule,
            &x0,
            &ts,
            &Tensor::stack(&eps),
        )?])
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "source": "noised-images",
            "t": self.t,
            "noise": if self.fresh { "fresh per epoch, fixed for evaluation" } else { "fixed" },
            "seed": self.seed,
        })
    }
}

/// A head on a live backbone tap, fed by [`NoisedImages`]. In fine-tune
/// mode the U-Net weights train together with the head.
pub struct LiveProbe {
    pub model: DenoiserModel,
    pub head: Head,
    pub t: usize,
    pub block: usize,
    pub pool: Option<usize>,
    finetune: bool,
}

impl LiveProbe {
    pub fn new(
        model: DenoiserModel,
        head: Head,
        t: usize,
        block: usize,
        pool: Option<usize>,
    ) -> Result<Self> {
        model.check_timestep(t)?;
        let entry = model.catalog.get(block)?;
        let side = pool.map_or(entry.spatial, |p| p.min(entry.spatial));
        let expected = [entry.channels, side, side];
        let flat: usize = expected.iter().product();
        if head.feature_shape != expected && head.feature_shape != [flat] {
            return Err(Error::shape("head input", &expected, &head.feature_shape));
        }
        Ok(Self {
            model,
            head,
            t,
            block,
            pool,
            finetune: false,
        })
    }
}

impl ProbeModel for LiveProbe {
    fn stores(&self) -> Vec<&ParamStore> {
        if self.finetune {
            vec![&self.model.params, &self.head.params]
        } else {
            vec![&self.head.params]
        }
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        if self.finetune {
            vec![&mut self.model.params, &mut self.head.params]
        } else {
            vec![&mut self.head.params]
        }
    }

    fn logits(
        &mut self,
        g: &mut Graph,
        bindings: &[Binding],
        inputs: &[Var],
        _: bool,
    ) -> Result<Var> {
        let [x_t] = inputs else {
            return Err(Error::CountMismatch {
                what: "live probe inputs",
                left: inputs.len(),
                right: 1,
            });
        };
        let fixed;
        let backbone = if self.finetune {
            &bindings[0]
        } else {
            fixed = self.model.params.bind(g, false);
            &fixed
        };
        let ts = vec![self.t; g.shape(*x_t)[0]];
        let mut taps = Taps::new([self.block]).stopping();
        self.model.forward_graph(g, backbone, *x_t, &ts, &mut taps);
        let mut map = *taps
            .found
            .get(&self.block)
            .ok_or(Error::UnknownBlock(self.block))?;
        let side = g.shape(map)[2];
        if let Some(p) = self.pool.filter(|&p| p > 0 && p < side) {
            map = g.adaptive_avg_pool(map, p, p);
        }
        Ok(self
            .head
            .forward(g, bindings.last().expect("head binding"), map))
    }

    fn set_finetune(&mut self, on: bool) -> Result<()> {
        self.finetune = on;
        Ok(())
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "head": self.head.describe(),
            "t": self.t,
            "block": self.block,
            "pool": self.pool,
            "finetune": self.finetune,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_hand_values() {
        let map = Tensor::new([1, 4, 4], (1..=16).map(f64::from).collect());
        assert_eq!(adaptive_avg_pool(&map, 2).data(), &[3.5, 5.5, 11.5, 13.5]);
        let map = Tensor::full([2, 8, 8], 0.25);
        let pooled = adaptive_avg_pool(&map, 3);
        assert_eq!(pooled.shape(), &[2, 3, 3]);
        assert!(pooled.data().iter().all(|v| *v == 0.25));
        assert!(adaptive_avg_pool(&map, 16).bitwise_eq(&map));
    }

    #[test]
    fn subsample_counts() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let idx = class_balanced_subsample(&labels, 0.01, 3).unwrap();
        assert_eq!(idx.len(), 10);
        let all = class_balanced_subsample(&labels, 1.0, 3).unwrap();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!(class_balanced_subsample(&[], 0.5, 0).is_err());
        assert!(class_balanced_subsample(&labels, 0.0, 0).is_err());
    }

    #[test]
    fn standardizer_hand_values() {
        let x = Tensor::new([4, 2], vec![1.0, 5.0, 3.0, 5.0, 5.0, 5.0, 7.0, 5.0]);
        let s = Standardizer::fit(&x).unwrap();
        assert_eq!(s.mean, vec![4.0, 5.0]);
        let y = s.apply(&x).unwrap();
        let r = 5f64.sqrt();
        let expected = [-3.0 / r, 0.0, -1.0 / r, 0.0, 1.0 / r, 0.0, 3.0 / r, 0.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(s.apply(&Tensor::zeros([2, 3])).is_err());
        assert!(Standardizer::fit(&Tensor::zeros([0, 3])).is_err());
    }
}
