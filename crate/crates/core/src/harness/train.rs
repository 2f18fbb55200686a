//! Denoising pretraining: sample a batch, a uniform timestep per item and
//! fresh noise, then take an Adam step on the noise-prediction MSE.

use std::path::PathBuf;

use diffrep_tensor::rng::stream;
use diffrep_tensor::{Graph, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{forward_noise_batch, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::optim::{adam_update, AdamConfig, AdamState};
use crate::unet::{DenoiserModel, NoHooks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Window of the running-mean loss.
    pub smoothing: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-4,
            checkpoint_every: 0,
            smoothing: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Trailing mean over `smoothing` steps, one value per step.
    pub running: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrainReport {
    pub fn initial_running(&self) -> Option<f64> {
        let w = self.config.smoothing.max(1).min(self.losses.len());
        (w > 0).then(|| self.losses[..w].iter().sum::<f64>() / w as f64)
    }

    pub fn final_running(&self) -> Option<f64> {
        self.running.last().copied()
    }
}

/// Train `model` in place on `images: [N, C, H, W]`. Checkpoints go to
/// `checkpoint_dir/step-<k>.ckpt` when a directory is given.
pub fn train_diffusion(
    model: &mut DenoiserModel,
    schedule_params: &ScheduleParams,
    images: &Tensor,
    config: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&std::path::Path>,
) -> Result<TrainReport> {
    if config.batch_size == 0 {
        return Err(Error::Parameter {
            field: "batch_size",
            reason: "must be positive".into(),
        });
    }
    if !(config.lr > 0.0) {
        return Err(Error::Parameter {
            field: "lr",
            reason: "must be positive".into(),
        });
    }
    let schedule: NoiseSchedule = schedule_params.build()?;
    if schedule.timesteps() != model.config.timesteps {
        return Err(Error::CountMismatch {
            what: "schedule vs model timesteps",
            left: schedule.timesteps(),
            right: model.config.timesteps,
        });
    }
    let (images, _) = model.batched(images)?;
    let n = images.dim(0);
    if n == 0 {
        return Err(Error::Invalid("no training images".into()));
    }
    let batch = config.batch_size.min(n);
    let mut state = AdamState::with_config(&model.params, AdamConfig::default());
    let mut losses = Vec::with_capacity(config.steps);
    let mut running = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let shape = model.image_shape();
    for step in 1..=config.steps {
        let mut rng = stream(seed, "train-batch", step as u64);
        let idx = sample(&mut rng, n, batch).into_vec();
        let x0 = images.gather_batch(&idx);
        let mut trng = stream(seed, "train-t", step as u64);
        let ts: Vec<usize> = (0..batch)
            .map(|_| trng.random_range(1..=schedule.timesteps()))
            .collect();
        let eps = Tensor::randn(
            [&[batch][..], &shape[..]].concat(),
            &mut stream(seed, "train-eps", step as u64),
        );
        let x_t = forward_noise_batch(&schedule, &x0, &ts, &eps)?;

        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let xv = g.constant(x_t);
        let target = g.constant(eps);
        let pred = model
            .forward_graph(&mut g, &p, xv, &ts, &mut NoHooks)
            .expect("full pass");
        let loss = g.mse(pred, target);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss",
                name: format!("step {step}"),
            });
        }
        let grads = g.backward(loss);
        adam_update(&mut model.params, &p.grads(&grads), &mut state, config.lr)?;

        losses.push(value);
        let w = config.smoothing.max(1).min(losses.len());
        running.push(losses[losses.len() - w..].iter().sum::<f64>() / w as f64);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0
                && step % config.checkpoint_every == 0
                && step != config.steps
            {
                let path = dir.join(format!("step-{step}.ckpt"));
                save_checkpoint(model, schedule_params, step as u64, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(model, schedule_params, config.steps as u64, &path)?;
        checkpoints.push(path);
    }
    Ok(TrainReport {
        losses,
        running,
        checkpoints,
        config: config.clone(),
        seed,
    })
}
