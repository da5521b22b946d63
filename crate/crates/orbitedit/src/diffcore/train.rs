//! Noise-prediction training: Adam over the flat parameter vector, epoch
//! shuffling and per-item noise all derived from one seed, checkpoints that
//! restore training bit for bit.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::model::{Conditioning, Denoiser, DenoiserParams, ModelConfig};
use super::schedule::{DiffusionConfig, Schedule};
use crate::error::{Error, Result};
use crate::util::{atomic_write, derive_seed, derive_seed_index, write_npy_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// Fraction of items whose conditioning frame is blurred and speckled
    /// before the forward pass. Targets stay clean. At sampling time the
    /// conditioning is often a model output or a hand edit, not a render,
    /// so the network has to tolerate an imperfect reference.
    #[serde(default = "default_cond_jitter")]
    pub cond_jitter: f64,
}

fn default_cond_jitter() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 0,
            checkpoint_every: 5,
            cond_jitter: default_cond_jitter(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_jitter) {
            return Err(Error::Config(format!(
                "cond_jitter must be in [0, 1], got {}",
                self.cond_jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// Everything needed to continue training or to sample: parameters, Adam
/// moments, progress counters, and the configs that produced them.
pub struct Checkpoint {
    pub theta: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub epoch: usize,
    pub step: usize,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    step: usize,
    param_count: usize,
    model: ModelConfig,
    diffusion: DiffusionConfig,
    train: TrainConfig,
}

pub struct Trainer {
    net: Denoiser,
    schedule: Schedule,
    cfg: TrainConfig,
    diffusion: DiffusionConfig,
    params: DenoiserParams,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: usize,
    epoch: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Trainer {
    pub fn new(model: ModelConfig, diffusion: DiffusionConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Denoiser::new(model)?;
        let schedule = make_schedule_for(&diffusion)?;
        let params = net.init_params(derive_seed(cfg.seed, "init"));
        let n = params.theta.len();
        Ok(Self {
            net,
            schedule,
            cfg,
            diffusion,
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
            epoch: 0,
        })
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let net = Denoiser::new(ckpt.model)?;
        if ckpt.theta.len() != net.param_count() {
            return Err(Error::Shape {
                expected: format!("{} parameters", net.param_count()),
                got: format!("{}", ckpt.theta.len()),
            });
        }
        let schedule = make_schedule_for(&ckpt.diffusion)?;
        Ok(Self {
            net,
            schedule,
            cfg: ckpt.train,
            diffusion: ckpt.diffusion,
            params: DenoiserParams { theta: ckpt.theta },
            adam_m: ckpt.adam_m,
            adam_v: ckpt.adam_v,
            step: ckpt.step,
            epoch: ckpt.epoch,
        })
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Runs the remaining epochs over `orbits` (each an (n_views, r, r, c)
    /// stack in [0, 1]). Writes checkpoints and a JSONL loss log into
    /// `out_dir` when given.
    pub fn run(&mut self, orbits: &[Array4<f64>], out_dir: Option<&Path>) -> Result<TrainReport> {
        if orbits.is_empty() {
            return Err(Error::Train("no training orbits".into()));
        }
        let n_views = orbits[0].dim().0;
        for o in orbits {
            if o.dim() != orbits[0].dim() {
                return Err(Error::Train("training orbits must share one shape".into()));
            }
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }

        let mut first_epoch_loss = f64::NAN;
        let mut last_epoch_loss = f64::NAN;
        let start_epoch = self.epoch;
        if start_epoch >= self.cfg.epochs {
            return Ok(TrainReport {
                epochs_run: 0,
                steps: self.step,
                first_epoch_loss,
                last_epoch_loss,
            });
        }

        for epoch in start_epoch..self.cfg.epochs {
            let mut order: Vec<usize> = (0..orbits.len()).collect();
            let mut shuffle_rng =
                ChaCha8Rng::seed_from_u64(derive_seed_index(self.cfg.seed, "shuffle", epoch as u64));
            order.shuffle(&mut shuffle_rng);

            let mut epoch_loss = 0.0;
            let mut epoch_items = 0usize;
            for (batch_idx, batch) in order.chunks(self.cfg.batch_size).enumerate() {
                // Items carry their own seeded rng, so they can run in
                // parallel; summing in slot order keeps the result identical
                // to a serial pass.
                let items: Vec<(f64, Vec<f64>)> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &orbit_idx)| {
                        let item_id = (epoch * orbits.len()
                            + batch_idx * self.cfg.batch_size
                            + slot) as u64;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_index(
                            self.cfg.seed,
                            "item",
                            item_id,
                        ));
                        let mut grad = vec![0.0; self.params.theta.len()];
                        let loss =
                            self.item_step(&orbits[orbit_idx], n_views, &mut rng, &mut grad)?;
                        Ok((loss, grad))
                    })
                    .collect::<Result<_>>()?;
                let mut grad_sum = vec![0.0; self.params.theta.len()];
                let mut batch_loss = 0.0;
                for (loss, grad) in items {
                    batch_loss += loss;
                    for (g, gi) in grad_sum.iter_mut().zip(grad.iter()) {
                        *g += gi;
                    }
                }
                let b = batch.len() as f64;
                batch_loss /= b;
                if !batch_loss.is_finite() {
                    return Err(Error::Train(format!(
                        "loss diverged at epoch {epoch} step {}",
                        self.step
                    )));
                }
                for g in grad_sum.iter_mut() {
                    *g /= b;
                }
                self.adam_update(&grad_sum);
                self.step += 1;
                epoch_loss += batch_loss * b;
                epoch_items += batch.len();
            }

            let mean_loss = epoch_loss / epoch_items as f64;
            if epoch == start_epoch {
                first_epoch_loss = mean_loss;
            }
            last_epoch_loss = mean_loss;
            self.epoch = epoch + 1;

            if let Some(dir) = out_dir {
                append_log(dir, epoch, self.step, mean_loss)?;
                let done = self.epoch == self.cfg.epochs;
                if done || self.epoch % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }

        Ok(TrainReport {
            epochs_run: self.cfg.epochs - start_epoch,
            steps: self.step,
            first_epoch_loss,
            last_epoch_loss,
        })
    }

    /// One training item: roll the orbit to a random start view, add noise at
    /// a random timestep, accumulate the loss gradient.
    fn item_step(
        &self,
        orbit: &Array4<f64>,
        n_views: usize,
        rng: &mut ChaCha8Rng,
        grad_sum: &mut [f64],
    ) -> Result<f64> {
        let start = rng.random_range(0..n_views);
        let t = rng.random_range(1..=self.schedule.t_max());

        let (n, r, _, c) = orbit.dim();
        let mut x0 = Array4::zeros(orbit.dim());
        for vi in 0..n {
            let src = orbit.index_axis(ndarray::Axis(0), (vi + start) % n);
            let mut dst = x0.index_axis_mut(ndarray::Axis(0), vi);
            dst.assign(&src);
            dst.mapv_inplace(|v| v * 2.0 - 1.0);
        }
        let mut cond_frame = orbit.index_axis(ndarray::Axis(0), start).to_owned();
        if rng.random::<f64>() < self.cfg.cond_jitter {
            cond_frame = jitter_cond(cond_frame, rng);
        }
        let cond = Conditioning::new(cond_frame)?;

        let noise = Array4::from_shape_fn((n, r, r, c), |_| rng.sample(StandardNormal));
        let x_t = super::schedule::q_sample(&x0, t, &noise, &self.schedule)?;

        let (eps_hat, cache) =
            self.net
                .forward_train(&self.params, &x_t, self.schedule.model_t(t), &cond, start)?;
        let numel = eps_hat.len() as f64;
        let diff = &eps_hat - &noise;
        let loss = diff.mapv(|v| v * v).mean().unwrap_or(f64::NAN);
        let d_eps = diff.mapv(|v| 2.0 * v / numel);
        let grad = self.net.backward(&self.params, &cache, &d_eps);
        for (g, gi) in grad_sum.iter_mut().zip(grad.iter()) {
            *g += gi;
        }
        Ok(loss)
    }

    fn adam_update(&mut self, grad: &[f64]) {
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        let lr = self.cfg.learning_rate;
        for i in 0..grad.len() {
            let g = grad[i];
            self.adam_m[i] = BETA1 * self.adam_m[i] + (1.0 - BETA1) * g;
            self.adam_v[i] = BETA2 * self.adam_v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.adam_m[i] / bc1;
            let v_hat = self.adam_v[i] / bc2;
            self.params.theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let p = self.params.theta.len();
        let mut stacked = Vec::with_capacity(3 * p);
        stacked.extend_from_slice(&self.params.theta);
        stacked.extend_from_slice(&self.adam_m);
        stacked.extend_from_slice(&self.adam_v);
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[3, p]), stacked)
            .expect("checkpoint shape");
        let base = format!("ckpt_ep{:04}", self.epoch);
        write_npy_f64(&dir.join(format!("{base}.npy")), arr.view())?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            step: self.step,
            param_count: p,
            model: self.net.config().clone(),
            diffusion: self.diffusion.clone(),
            train: self.cfg.clone(),
        };
        atomic_write(
            &dir.join(format!("{base}.json")),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )?;
        Ok(())
    }
}

fn make_schedule_for(diffusion: &DiffusionConfig) -> Result<Schedule> {
    super::schedule::make_schedule(diffusion)
}

/// Blur, speckle, and requantize one conditioning frame. Strengths are drawn
/// from `rng`, so two items with the same seed degrade the same way.
fn jitter_cond(frame: ndarray::Array3<f64>, rng: &mut ChaCha8Rng) -> ndarray::Array3<f64> {
    let stack = frame.insert_axis(ndarray::Axis(0));
    let sigma = rng.random_range(0.3..1.0);
    let mut img = crate::propagate::gaussian_blur(&stack, sigma)
        .remove_axis(ndarray::Axis(0));
    let amp = rng.random_range(0.0..0.04);
    for v in img.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += amp * n;
    }
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    img
}

fn append_log(dir: &Path, epoch: usize, step: usize, loss: f64) -> Result<()> {
    let line = serde_json::json!({"epoch": epoch, "step": step, "loss": loss});
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("train_log.jsonl"))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Loads the checkpoint with the highest epoch number from `dir`.
pub fn load_latest_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mut best: Option<(usize, std::path::PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(num) = name.strip_prefix("ckpt_ep").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(epoch) = num.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
                    best = Some((epoch, path.clone()));
                }
            }
        }
    }
    let (_, meta_path) = best.ok_or_else(|| Error::Train(format!(
        "no checkpoint found in {}",
        dir.display()
    )))?;
    load_checkpoint_meta(&meta_path)
}

fn load_checkpoint_meta(meta_path: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    let npy_path = meta_path.with_extension("npy");
    let arr = crate::util::read_npy_f64(&npy_path)?;
    if arr.shape() != [3, meta.param_count] {
        return Err(Error::Integrity {
            path: npy_path.display().to_string(),
            detail: format!("expected shape [3, {}], got {:?}", meta.param_count, arr.shape()),
        });
    }
    let p = meta.param_count;
    let data: Vec<f64> = arr.into_raw_vec_and_offset().0;
    Ok(Checkpoint {
        theta: data[..p].to_vec(),
        adam_m: data[p..2 * p].to_vec(),
        adam_v: data[2 * p..].to_vec(),
        epoch: meta.epoch,
        step: meta.step,
        model: meta.model,
        diffusion: meta.diffusion,
        train: meta.train,
    })
}
