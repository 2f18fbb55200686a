//! Representation analysis: linear CKA between feature sets, k-nearest
//! neighbour evaluation, and probe sweeps over (timestep, block, pool).

use std::cmp::Ordering;

use diffrep_tensor::gemm;
use diffrep_tensor::rng::derive_seed;
use diffrep_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpm::NoiseSchedule;
use crate::error::{Error, Result};
use crate::features::{precompute_features, ExtractedFeatures, FeatureRequest, StoredFeatures};
use crate::heads::{build_head, train_probe, Accuracy, HeadKind, ProbeMode, ProbeProtocol};
use crate::unet::DenoiserModel;

fn as_matrix(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    if x.rank() < 1 {
        return Err(Error::Invalid(format!(
            "{what} must have a leading sample axis"
        )));
    }
    let n = x.dim(0);
    Ok((n, if n == 0 { 0 } else { x.numel() / n }))
}

/// Column-centred copy of an `n × p` matrix.
fn center_columns(data: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut mean = vec![0.0; p];
    for row in data.chunks(p) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = data.to_vec();
    for row in out.chunks_mut(p) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

fn frobenius_sq(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum()
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, p) = as_matrix(x, "X")?;
    let (m, q) = as_matrix(y, "Y")?;
    if n != m {
        return Err(Error::CountMismatch {
            what: "CKA rows",
            left: n,
            right: m,
        });
    }
    if n < 2 {
        return Err(Error::Invalid(format!(
            "CKA needs at least 2 samples, got {n}"
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite {
            what: "CKA input",
            name: String::new(),
        });
    }
    Ok((n, p, q))
}

/// Linear CKA of `X: [n, …]` and `Y: [n, …]`, trailing axes flattened:
/// `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` on column-centred matrices, or 0 when
/// either centred matrix vanishes.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, q) = check_pair(x, y)?;
    let xc = center_columns(x.data(), n, p);
    let yc = center_columns(y.data(), n, q);
    if xc.iter().all(|v| *v == 0.0) || yc.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let mut yx = vec![0.0; q * p];
    gemm(q, n, p, &yc, true, &xc, false, &mut yx, 0.0);
    let mut xx = vec![0.0; p * p];
    gemm(p, n, p, &xc, true, &xc, false, &mut xx, 0.0);
    let mut yy = vec![0.0; q * q];
    gemm(q, n, q, &yc, true, &yc, false, &mut yy, 0.0);
    let denom = frobenius_sq(&xx).sqrt() * frobenius_sq(&yy).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((frobenius_sq(&yx) / denom).clamp(0.0, 1.0))
}

/// Doubly centred Gram matrix `H X Xᵀ H` of `[n, …]` features.
pub fn centered_gram(x: &Tensor) -> Result<Vec<f64>> {
    let (n, p) = as_matrix(x, "X")?;
    let mut k = vec![0.0; n * n];
    gemm(n, p, n, x.data(), false, x.data(), true, &mut k, 0.0);
    let row_mean: Vec<f64> = k
        .chunks(n)
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += total - row_mean[i] - row_mean[j];
        }
    }
    Ok(k)
}

/// CKA from two centred Gram matrices (normalized HSIC).
pub fn cka_from_grams(k: &[f64], l: &[f64]) -> f64 {
    let kl: f64 = k.iter().zip(l).map(|(a, b)| a * b).sum();
    let denom = frobenius_sq(k).sqrt() * frobenius_sq(l).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (kl / denom).clamp(0.0, 1.0)
    }
}

/// Linear CKA via centred Gram matrices; equal to [`linear_cka`] in exact
/// arithmetic and cheaper when features are wider than the sample.
pub fn gram_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    Ok(cka_from_grams(&centered_gram(x)?, &centered_gram(y)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `values[i][j]` compares row `i` with column `j`.
    pub values: Vec<Vec<f64>>,
    /// Dataset indices of the images used.
    pub sample_ids: Vec<usize>,
    pub timestep: Option<usize>,
    pub note: String,
}

/// What a CKA grid compares.
#[derive(Clone, Debug)]
pub enum CkaAxis {
    /// Blocks against each other at one timestep.
    Blocks { t: usize, blocks: Vec<usize> },
    /// Timesteps against each other at one block.
    Timesteps { block: usize, times: Vec<usize> },
    /// Blocks at one timestep against named external features, one
    /// `[n, …]` tensor per name with rows matching the sample.
    External {
        t: usize,
        blocks: Vec<usize>,
        features: Vec<(String, Tensor)>,
    },
}

/// CKA between taps of `model` on `images` (`sample_ids` are their dataset
/// indices, used for noise seeds). Noise is fixed per image; activations
/// are flattened without pooling.
pub fn cka_grid(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    images: &Tensor,
    sample_ids: &[usize],
    axis: &CkaAxis,
    seed: u64,
) -> Result<CkaMatrix> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Invalid(format!(
            "CKA needs at least 2 images, got {n}"
        )));
    }
    if sample_ids.len() != n {
        return Err(Error::CountMismatch {
            what: "sample ids vs images",
            left: sample_ids.len(),
            right: n,
        });
    }
    let (taps, labels, timestep): (Vec<(usize, usize)>, Vec<String>, Option<usize>) = match axis {
        CkaAxis::Blocks { t, blocks } | CkaAxis::External { t, blocks, .. } => (
            blocks.iter().map(|&b| (*t, b)).collect(),
            blocks.iter().map(|b| format!("b{b}")).collect(),
            Some(*t),
        ),
        CkaAxis::Timesteps { block, times } => (
            times.iter().map(|&t| (t, *block)).collect(),
            times.iter().map(|t| format!("t{t}")).collect(),
            None,
        ),
    };
    if taps.is_empty() {
        return Err(Error::Invalid("CKA axis is empty".into()));
    }
    let source = ExtractedFeatures::new(model, schedule, images.clone(), vec![0; n], taps, seed)?
        .with_ids(sample_ids.to_vec());
    let maps = source.extract_all(0)?;
    let grams: Vec<Vec<f64>> = maps.par_iter().map(centered_gram).collect::<Result<_>>()?;
    let (cols, col_grams) = match axis {
        CkaAxis::External { features, .. } => {
            if features.is_empty() {
                return Err(Error::Invalid("no external features".into()));
            }
            let mut g = Vec::with_capacity(features.len());
            for (name, f) in features {
                if f.shape().first() != Some(&n) {
                    return Err(Error::Invalid(format!(
                        "external feature {name:?} does not have {n} rows"
                    )));
                }
                g.push(centered_gram(f)?);
            }
            (features.iter().map(|(name, _)| name.clone()).collect(), g)
        }
        _ => (labels.clone(), grams.clone()),
    };
    let symmetric = !matches!(axis, CkaAxis::External { .. });
    let mut values = vec![vec![0.0; cols.len()]; labels.len()];
    for i in 0..labels.len() {
        for j in 0..cols.len() {
            values[i][j] = if symmetric && j < i {
                values[j][i]
            } else {
                cka_from_grams(&grams[i], &col_grams[j])
            };
        }
    }
    Ok(CkaMatrix {
        rows: labels,
        cols,
        values,
        sample_ids: sample_ids.to_vec(),
        timestep,
        note: "raw tap activations flattened per image, no pooling; linear kernel".into(),
    })
}

// -------------------------------------------------------------------- kNN

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnOutput {
    pub predictions: Vec<usize>,
    /// Per query, the voted classes ranked best first.
    pub rankings: Vec<Vec<usize>>,
    pub k: usize,
    pub metric: Metric,
}

impl KnnOutput {
    pub fn accuracy(&self, labels: &[usize]) -> Result<Accuracy> {
        if labels.len() != self.predictions.len() {
            return Err(Error::CountMismatch {
                what: "query labels",
                left: labels.len(),
                right: self.predictions.len(),
            });
        }
        let n = labels.len();
        let h1 = self
            .predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let h5 = self
            .rankings
            .iter()
            .zip(labels)
            .filter(|(r, l)| r.iter().take(5).any(|c| c == *l))
            .count();
        let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
        Ok(Accuracy {
            top1: frac(h1),
            top5: frac(h5),
            count: n,
        })
    }
}

fn unit_rows(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Majority vote among the `k` nearest training rows. Votes tie-break on
/// smaller summed distance, then lower class index; equidistant neighbours
/// are ordered by label so the result never depends on row order.
pub fn knn_classify(
    train: &Tensor,
    train_labels: &[usize],
    queries: &Tensor,
    k: usize,
    metric: Metric,
) -> Result<KnnOutput> {
    let (n, d) = as_matrix(train, "training features")?;
    let (_, dq) = as_matrix(queries, "queries")?;
    if train_labels.len() != n {
        return Err(Error::CountMismatch {
            what: "training labels",
            left: train_labels.len(),
            right: n,
        });
    }
    if d != dq {
        return Err(Error::CountMismatch {
            what: "feature dimension",
            left: d,
            right: dq,
        });
    }
    if k == 0 || k > n {
        return Err(Error::Parameter {
            field: "k",
            reason: format!("{k} must be in 1..={n}"),
        });
    }
    let (train_rows, query_rows) = match metric {
        Metric::Euclidean => (train.data().to_vec(), queries.data().to_vec()),
        Metric::Cosine => (unit_rows(train.data(), d), unit_rows(queries.data(), d)),
    };
    let classes = train_labels.iter().copied().max().map_or(0, |m| m + 1);
    let ranked: Vec<Vec<usize>> = query_rows
        .par_chunks(d.max(1))
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = train_rows
                .chunks(d.max(1))
                .zip(train_labels)
                .map(|(x, &l)| {
                    (
                        x.iter()
                            .zip(q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt(),
                        l,
                    )
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![(0usize, 0.0f64); classes];
            for &(dd, l) in &dist[..k] {
                votes[l].0 += 1;
                votes[l].1 += dd;
            }
            let mut order: Vec<usize> = (0..classes).filter(|&c| votes[c].0 > 0).collect();
            order.sort_by(|&a, &b| {
                votes[b]
                    .0
                    .cmp(&votes[a].0)
                    .then(votes[a].1.total_cmp(&votes[b].1))
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();
    Ok(KnnOutput {
        predictions: ranked.iter().map(|r| r[0]).collect(),
        rankings: ranked,
        k,
        metric,
    })
}

// ------------------------------------------------------------ grid search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_values: Vec<usize>,
    pub b_values: Vec<usize>,
    /// Pooled side lengths; `None` keeps the full map.
    pub pool_sizes: Vec<Option<usize>>,
    pub protocol: ProbeProtocol,
    #[serde(default = "linear_head")]
    pub head: HeadKind,
}

fn linear_head() -> HeadKind {
    HeadKind::Linear
}

impl GridSpec {
    pub fn validate(&self, model: &DenoiserModel, schedule: &NoiseSchedule) -> Result<()> {
        for (field, empty) in [
            ("t_values", self.t_values.is_empty()),
            ("b_values", self.b_values.is_empty()),
            ("pool_sizes", self.pool_sizes.is_empty()),
        ] {
            if empty {
                return Err(Error::Parameter {
                    field,
                    reason: "must not be empty".into(),
                });
            }
        }
        for &t in &self.t_values {
            schedule.check_timestep(t)?;
        }
        for &b in &self.b_values {
            model.catalog.get(b)?;
        }
        if self.pool_sizes.contains(&Some(0)) {
            return Err(Error::Parameter {
                field: "pool_sizes",
                reason: "sizes must be positive".into(),
            });
        }
        self.protocol.validate()
    }

    /// Cells in `(t, b, pool)` lexicographic order.
    pub fn cells(&self) -> Vec<(usize, usize, Option<usize>)> {
        let mut pools = self.pool_sizes.clone();
        pools.sort();
        let mut out = Vec::new();
        let mut ts = self.t_values.clone();
        ts.sort_unstable();
        let mut bs = self.b_values.clone();
        bs.sort_unstable();
        for &t in &ts {
            for &b in &bs {
                for &p in &pools {
                    out.push((t, b, p));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub t: usize,
    pub block: usize,
    pub pool: Option<usize>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    /// Successful rows by decreasing top-1, ties in `(t, b, pool)` order,
    /// then failed rows.
    pub rows: Vec<GridRow>,
    pub best: Option<(usize, usize, Option<usize>)>,
    pub spec: GridSpec,
    pub seed: u64,
}

/// Labelled images for a probe split.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
}

/// Seed of the probe head in every grid cell.
pub fn grid_head_seed(seed: u64) -> u64 {
    derive_seed(seed, "grid-head", 0)
}

/// Train one probe per cell and score it on `eval` (or the training split
/// when absent). Every cell uses the same feature noise, head seed and
/// shuffle seed; failures become error rows.
pub fn grid_search(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    train: Split<'_>,
    eval: Option<Split<'_>>,
    spec: &GridSpec,
    seed: u64,
) -> Result<GridReport> {
    spec.validate(model, schedule)?;
    let classes = train
        .labels
        .iter()
        .chain(eval.iter().flat_map(|e| e.labels.iter()))
        .max()
        .map_or(1, |m| m + 1);
    let run_cell = |(t, b, pool): (usize, usize, Option<usize>)| -> Result<Accuracy> {
        let mut request = FeatureRequest::new(t, b);
        request.pool = pool;
        let flatten = !matches!(spec.head, HeadKind::Cnn { .. } | HeadKind::Attention(_));
        let tr = precompute_features(
            model,
            schedule,
            train.images,
            train.labels,
            &request,
            seed,
            flatten,
        )?;
        let mut head = build_head(
            &spec.head,
            &tr.features.shape()[1..],
            classes,
            grid_head_seed(seed),
        )?;
        let mut train_src = StoredFeatures::new(vec![tr.features], tr.labels)?;
        let report = match eval {
            Some(ev) => {
                let es = precompute_features(
                    model,
                    schedule,
                    ev.images,
                    ev.labels,
                    &request,
                    derive_seed(seed, "eval", 0),
                    flatten,
                )?;
                let mut eval_src = StoredFeatures::new(vec![es.features], es.labels)?;
                train_probe(
                    &mut head,
                    &mut train_src,
                    Some(&mut eval_src),
                    &spec.protocol,
                    ProbeMode::Frozen,
                    seed,
                )?
            }
            None => train_probe(
                &mut head,
                &mut train_src,
                None,
                &spec.protocol,
                ProbeMode::Frozen,
                seed,
            )?,
        };
        Ok(report.eval.unwrap_or(report.train))
    };
    let cells = spec.cells();
    let results: Vec<GridRow> = cells
        .par_iter()
        .map(|&cell| {
            let (t, block, pool) = cell;
            match run_cell(cell) {
                Ok(acc) => GridRow {
                    t,
                    block,
                    pool,
                    top1: Some(acc.top1),
                    top5: Some(acc.top5),
                    error: None,
                },
                Err(e) => GridRow {
                    t,
                    block,
                    pool,
                    top1: None,
                    top5: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut rows = results;
    rows.sort_by(|a, b| match (a.top1, b.top1) {
        (Some(x), Some(y)) => y
            .total_cmp(&x)
            .then((a.t, a.block, a.pool).cmp(&(b.t, b.block, b.pool))),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => (a.t, a.block, a.pool).cmp(&(b.t, b.block, b.pool)),
    });
    let best = rows
        .first()
        .filter(|r| r.top1.is_some())
        .map(|r| (r.t, r.block, r.pool));
    Ok(GridReport {
        rows,
        best,
        spec: spec.clone(),
        seed,
    })
}
