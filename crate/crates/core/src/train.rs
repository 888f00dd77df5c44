//! Flow-matching pretraining of the reference velocity model.
//!
//! The model regresses onto the path's time derivative: with data x0, noise
//! x1 and per-example uniform t, the loss is the mean squared residual of
//! v(x_t, t) against the target velocity at x_t.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::density::GaussianMixture;
use crate::error::{Error, Result};
use crate::net::{Gradients, OptMethod, Optimizer, VelocityModel};
use crate::rng;
use crate::schedule::Schedule;
use crate::types::SampleBatch;

/// Default hidden widths of the velocity model.
pub const DEFAULT_HIDDEN: &[usize] = &[64, 64, 64];

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub hidden: Vec<usize>,
    /// Loss is recorded every this many steps (and at the final step).
    pub log_interval: usize,
}

impl TrainConfig {
    pub fn new(schedule: Schedule) -> Self {
        TrainConfig {
            batch_size: 256,
            steps: 20_000,
            learning_rate: 1e-3,
            seed: 42,
            schedule,
            hidden: DEFAULT_HIDDEN.to_vec(),
            log_interval: 200,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("train config", "steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train config", "learning_rate must be positive"));
        }
        if self.log_interval == 0 {
            return Err(Error::invalid("train config", "log_interval must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Mean squared flow-matching residual and its parameter gradients.
///
/// Batches are aligned by index; `t_batch` holds one time per example.
pub fn cfm_loss(
    model: &VelocityModel,
    x0: &SampleBatch,
    x1: &SampleBatch,
    t_batch: &[f64],
    sched: &Schedule,
) -> Result<(f64, Gradients)> {
    cfm_loss_weighted(model, x0, x1, t_batch, None, sched)
}

/// Weighted variant: per-example weights scale both the loss and the
/// gradients (reward-weighted regression uses this).
pub fn cfm_loss_weighted(
    model: &VelocityModel,
    x0: &SampleBatch,
    x1: &SampleBatch,
    t_batch: &[f64],
    weights: Option<&[f64]>,
    sched: &Schedule,
) -> Result<(f64, Gradients)> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if x1.len() != n || t_batch.len() != n {
        return Err(Error::ShapeMismatch { context: "cfm batch lengths disagree".into() });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch { context: "cfm weight length".into() });
        }
    }
    let d = model.dim();
    if x0.dim() != d || x1.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.dim() });
    }

    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut xt = vec![0.0; d];
    let mut resid = vec![0.0; d];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let t = t_batch[i];
        let (a, b) = (sched.alpha(t), sched.beta(t));
        let (ad, bd) = (sched.alpha_dot(t), sched.beta_dot(t));
        let r0 = x0.row(i);
        let r1 = x1.row(i);
        for j in 0..d {
            xt[j] = a * r0[j] + b * r1[j];
        }
        let v = model.forward(&xt, t)?;
        let w = weights.map_or(1.0, |w| w[i]);
        let mut sq = 0.0;
        for j in 0..d {
            let target = ad * r0[j] + bd * r1[j];
            resid[j] = v[j] - target;
            sq += resid[j] * resid[j];
        }
        loss += w * sq * inv_n;
        model.accumulate_grad_params(&xt, t, &resid, 2.0 * w * inv_n, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Pretrains a fresh model on the analytic target by conditional flow
/// matching with Adam. Deterministic per config: identical seeds give
/// bitwise-identical checkpoints.
pub fn pretrain(
    target: &GaussianMixture,
    cfg: &TrainConfig,
) -> Result<(VelocityModel, Vec<LossRecord>)> {
    cfg.validate()?;
    let d = target.dim();
    let mut model = VelocityModel::new(d, &cfg.hidden, rng::stream_seed(cfg.seed, "pretrain/init"))?;
    let mut opt = Optimizer::new(OptMethod::Adam, cfg.learning_rate, &model);
    let mut data_rng = rng::stream_rng(cfg.seed, "pretrain/data");
    let mut noise_rng = rng::stream_rng(cfg.seed, "pretrain/noise");
    let mut time_rng = rng::stream_rng(cfg.seed, "pretrain/time");

    let eps = cfg.schedule.eps_clamp;
    let mut log = Vec::new();
    let mut t_batch = Vec::with_capacity(cfg.batch_size);
    let mut row = vec![0.0; d];
    for step in 0..cfg.steps {
        let x0 = target.sample_with_rng(cfg.batch_size, &mut data_rng);
        let mut x1 = SampleBatch::with_capacity(d, cfg.batch_size);
        for _ in 0..cfg.batch_size {
            for slot in row.iter_mut() {
                *slot = StandardNormal.sample(&mut noise_rng);
            }
            x1.push(&row);
        }
        t_batch.clear();
        for _ in 0..cfg.batch_size {
            t_batch.push(time_rng.random_range(eps..(1.0 - eps)));
        }
        let (loss, grads) = cfm_loss(&model, &x0, &x1, &t_batch, &cfg.schedule)?;
        if !loss.is_finite() {
            return Err(Error::invalid(
                "pretrain",
                format!("non-finite loss {loss} at step {step} (lr={})", cfg.learning_rate),
            ));
        }
        opt.step(&mut model, &grads)?;
        if step % cfg.log_interval == 0 || step + 1 == cfg.steps {
            log.push(LossRecord { step, loss });
        }
    }
    Ok((model, log))
}
