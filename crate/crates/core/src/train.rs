//! Epsilon-prediction training for the U-Net with AdamW, weight averaging
//! and FID-based checkpoint selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::diffusion::{self, NoiseSchedule, SamplerConfig, SamplerKind, Spacing};
use crate::error::{Error, Result};
use crate::fid;
use crate::image::{Batch, Image};
use crate::nn::{
    adamw_step, ema_update, read_checkpoint, write_checkpoint, AdamWConfig, CheckpointFile, EmaState, OptState,
    ParamSet, Tape, Tensor,
};
use crate::rng;
use crate::unet::{UNet, UNetDenoiser};

const SHUFFLE_STREAM: u64 = 0x5348;
const STEP_STREAM: u64 = 0x5354;
const FID_STREAM: u64 = 0xF1D;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub fid_every_epochs: usize,
    /// Images generated with the EMA weights for each FID evaluation.
    pub fid_samples: usize,
    pub fid_sampler: SamplerConfig,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 4,
            epochs: 50,
            ema_decay: 0.9999,
            fid_every_epochs: 10,
            fid_samples: 64,
            fid_sampler: SamplerConfig {
                kind: SamplerKind::Ddim,
                steps: 20,
                eta: 0.0,
                spacing: Spacing::Trailing,
            },
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0,1]", self.ema_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.fid_every_epochs == 0 {
            return Err(Error::Config("fid_every_epochs must be positive".into()));
        }
        if self.fid_samples < 2 {
            return Err(Error::Config("fid_samples must be at least 2".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Effective averaging rate at optimizer step `step` (1-based): the
/// configured decay, capped by `(1 + step)/(10 + step)` early in training.
pub fn ema_decay_at(decay: f64, step: u64) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub fid: Option<f64>,
    pub raw: ParamSet,
    pub ema: ParamSet,
}

impl Checkpoint {
    pub fn file_stem(epoch: usize) -> String {
        format!("epoch_{epoch:04}")
    }

    /// Writes `<stem>_raw.ckpt` and `<stem>_ema.ckpt` into `dir`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("config_hash".to_string(), config_hash.to_string());
        if let Some(f) = self.fid {
            meta.insert("fid".to_string(), format!("{f:.6}"));
        }
        let stem = Self::file_stem(self.epoch);
        let raw_path = dir.join(format!("{stem}_raw.ckpt"));
        let ema_path = dir.join(format!("{stem}_ema.ckpt"));
        for (path, weights, kind) in [(&raw_path, &self.raw, "raw"), (&ema_path, &self.ema, "ema")] {
            let mut m = meta.clone();
            m.insert("weights".to_string(), kind.to_string());
            write_checkpoint(path, &CheckpointFile { metadata: m, tensors: weights.clone() })?;
        }
        Ok((raw_path, ema_path))
    }

    pub fn load(dir: &Path, epoch: usize) -> Result<Checkpoint> {
        let stem = Self::file_stem(epoch);
        let raw = read_checkpoint(&dir.join(format!("{stem}_raw.ckpt")))?;
        let ema_path = dir.join(format!("{stem}_ema.ckpt"));
        let ema = read_checkpoint(&ema_path)?;
        ema.tensors.check_compatible(&raw.tensors)?;
        let fid = match ema.metadata.get("fid") {
            Some(v) => Some(v.parse().map_err(|_| Error::format(&ema_path, format!("bad fid {v:?}")))?),
            None => None,
        };
        Ok(Checkpoint { epoch, fid, raw: raw.tensors, ema: ema.tensors })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidPoint {
    pub epoch: usize,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Epoch 0 first, then one per FID evaluation.
    pub checkpoints: Vec<Checkpoint>,
    /// FID of the untrained network; not part of `fid_curve`.
    pub initial_fid: f64,
    pub fid_curve: Vec<FidPoint>,
    /// Mean batch loss per optimizer step.
    pub loss_curve: Vec<f64>,
}

/// Short hex digest used to tie checkpoints to the settings that made them.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Epsilon-MSE of the network on `x0` noised to per-sample timesteps `t`,
/// with gradients for every parameter in `params` order.
pub fn loss_and_grad(
    net: &UNet,
    params: &ParamSet,
    x0: &Batch,
    noise: &[f64],
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    if x0.n == 0 {
        return Err(Error::Size("empty training batch".into()));
    }
    if noise.len() != x0.data.len() || t.len() != x0.n {
        return Err(Error::Shape("noise and timesteps must match the batch".into()));
    }
    let len = x0.image_len();
    let mut x_t = Vec::with_capacity(x0.data.len());
    for i in 0..x0.n {
        let ab = *schedule
            .alpha_bars
            .get(t[i])
            .ok_or_else(|| Error::Input(format!("timestep {} outside schedule", t[i])))?;
        let r = i * len..(i + 1) * len;
        x_t.extend(diffusion::forward_noise_with(&x0.data[r.clone()], ab, &noise[r]));
    }
    let shape = vec![x0.n, 1, x0.height, x0.width];
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let x = tape.leaf(Tensor::from_vec(shape.clone(), x_t));
    let eps_hat = net.forward(&mut tape, &bound, x, t)?;
    let loss = tape.mse(eps_hat, Tensor::from_vec(shape, noise.to_vec()));
    let grads = tape.backward(loss);
    Ok((tape.value(loss).item(), grads.for_params(&tape, &bound)))
}

/// Generates `n` images with the given weights.
pub fn generate(
    net: &UNet,
    params: &ParamSet,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    n: usize,
    side: (usize, usize),
    seed: u64,
) -> Result<Vec<Image>> {
    let denoiser = UNetDenoiser { net, params };
    let batch = diffusion::sample(&denoiser, sampler, schedule, (n, side.1, side.0), seed)?;
    Ok(batch.to_images())
}

fn fid_of(
    net: &UNet,
    params: &ParamSet,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    reference: &[Image],
    side: (usize, usize),
) -> Result<f64> {
    let seed = rng::derive_seed(cfg.seed, FID_STREAM);
    let images = generate(net, params, &cfg.fid_sampler, schedule, cfg.fid_samples, side, seed)?;
    fid::fid(&images, reference)
}

/// Trains from a fresh initialization. `on_checkpoint` runs as each
/// checkpoint is produced, so callers can persist them as they arrive.
pub fn train(
    images: &[Image],
    net: &UNet,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    fid_reference: &[Image],
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = images.first().ok_or_else(|| Error::Size("empty training set".into()))?;
    let side = (first.width(), first.height());
    if images.iter().any(|im| (im.width(), im.height()) != side) {
        return Err(Error::Shape("training images must share a size".into()));
    }
    if fid_reference.len() < 2 {
        return Err(Error::Size("FID reference needs at least 2 images".into()));
    }
    let mut params = net.init(cfg.seed);
    let mut opt = OptState::new(&params);
    let mut ema = EmaState::new(&params);
    let adamw = cfg.adamw();

    let initial_fid = fid_of(net, &ema.shadow, cfg, schedule, fid_reference, side)?;
    let mut checkpoints = vec![Checkpoint { epoch: 0, fid: None, raw: params.clone(), ema: ema.shadow.clone() }];
    on_checkpoint(&checkpoints[0])?;

    let mut loss_curve = Vec::new();
    let mut fid_curve = Vec::new();
    let mut step_rng = rng::rng(rng::derive_seed(cfg.seed, STEP_STREAM));
    let t_max = schedule.len();
    for epoch in 1..=cfg.epochs {
        let order = rng::sample_indices(
            &mut rng::rng(rng::derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64)),
            images.len(),
            images.len(),
        );
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = Batch::from_images(&picked)?;
            let t: Vec<usize> = (0..batch.n).map(|_| step_rng.gen_range(0..t_max)).collect();
            let noise = rng::normals(&mut step_rng, batch.data.len());
            let (loss, grads) = loss_and_grad(net, &params, &batch, &noise, &t, schedule)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {} (timesteps {t:?})",
                    opt.step + 1
                )));
            }
            loss_curve.push(loss);
            adamw_step(&mut params, &grads, &mut opt, &adamw);
            ema_update(&mut ema, &params, ema_decay_at(cfg.ema_decay, opt.step));
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("non-finite weights after epoch {epoch}")));
        }
        if epoch % cfg.fid_every_epochs == 0 {
            let f = fid_of(net, &ema.shadow, cfg, schedule, fid_reference, side)?;
            fid_curve.push(FidPoint { epoch, fid: f });
            let ck = Checkpoint { epoch, fid: Some(f), raw: params.clone(), ema: ema.shadow.clone() };
            on_checkpoint(&ck)?;
            checkpoints.push(ck);
        }
    }
    Ok(TrainOutcome { checkpoints, initial_fid, fid_curve, loss_curve })
}

/// Epoch with the lowest FID; the later epoch wins ties.
pub fn select_model(curve: &[FidPoint]) -> Result<usize> {
    let mut best: Option<FidPoint> = None;
    for p in curve {
        if p.fid.is_nan() {
            return Err(Error::Numerical(format!("FID is NaN at epoch {}", p.epoch)));
        }
        match best {
            Some(b) if p.fid > b.fid || (p.fid == b.fid && p.epoch < b.epoch) => {}
            _ => best = Some(*p),
        }
    }
    best.map(|b| b.epoch)
        .ok_or_else(|| Error::Input("no FID evaluations to select from".into()))
}
