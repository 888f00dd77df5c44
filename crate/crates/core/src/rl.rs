//! KL-regularized fine-tuning of a pretrained velocity model.
//!
//! Three routes to the same optimum (the exponentially tilted reference):
//! REINFORCE-style policy gradient on SDE rollouts, reward-weighted
//! regression, and DPO on Bradley-Terry pairs with exact ODE log-densities.
//! [`implicit_reward_gradient`] exposes the score-difference identity that
//! guidance builds on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::density::{self, RewardFn};
use crate::error::{Error, Result};
use crate::guide::{self, SamplerConfig};
use crate::net::{Gradients, OptMethod, Optimizer, VelocityField, VelocityModel};
use crate::rng;
use crate::schedule::Schedule;
use crate::train;
use crate::types::SampleBatch;

const LN_2PI: f64 = 1.8378770664093453;

/// States beyond this bound abort a rollout.
const ROLLOUT_BOUND: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMethod {
    PolicyGradient,
    Rwr,
    Dpo,
}

/// How the policy-gradient return is attributed to steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnKind {
    /// One trajectory-level return multiplies every step's score function.
    Trajectory,
    /// Causal reward-to-go: step k sees only the penalty terms from k on.
    RewardToGo,
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub method: FinetuneMethod,
    /// KL coefficient of the fine-tuning objective.
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Constant diffusion scale of the rollout SDE.
    pub sigma: f64,
    pub rollout_steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub return_kind: ReturnKind,
    /// Samples drawn from the reference for the RWR pool.
    pub rwr_pool: usize,
    /// Log-weights are clipped at this percentile before normalization.
    pub rwr_clip_percentile: f64,
    /// Number of Bradley-Terry pairs for DPO.
    pub dpo_pairs: usize,
    /// RK4 steps for DPO log-densities.
    pub dpo_ode_steps: usize,
    /// Euler steps when a method draws plain samples from a model.
    pub sample_steps: usize,
    pub log_interval: usize,
}

impl FinetuneConfig {
    pub fn new(method: FinetuneMethod, schedule: Schedule) -> Self {
        FinetuneConfig {
            method,
            beta: 0.3,
            batch_size: 64,
            learning_rate: 1e-5,
            steps: 4000,
            sigma: 0.5,
            rollout_steps: 100,
            seed: 42,
            schedule,
            return_kind: ReturnKind::RewardToGo,
            rwr_pool: 16_384,
            rwr_clip_percentile: 99.5,
            dpo_pairs: 20_000,
            dpo_ode_steps: 100,
            sample_steps: 100,
            log_interval: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid("finetune config", "beta must be positive"));
        }
        if self.batch_size == 0 || self.steps == 0 || self.rollout_steps == 0 {
            return Err(Error::invalid("finetune config", "counts must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("finetune config", "learning_rate must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("finetune config", "sigma must be >= 0"));
        }
        if !(self.rwr_clip_percentile > 0.0 && self.rwr_clip_percentile <= 100.0) {
            return Err(Error::invalid("finetune config", "clip percentile in (0, 100]"));
        }
        Ok(())
    }
}

/// A recorded SDE rollout from noise (t=1) to data (t=0).
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Visited states, length rollout_steps + 1.
    pub states: Vec<Vec<f64>>,
    /// Realized per-step increments (the actions).
    pub increments: Vec<Vec<f64>>,
    /// Per-step transition log-probability under the acting model.
    pub logp_acting: Vec<f64>,
    /// Per-step transition log-probability under the reference model.
    pub logp_reference: Vec<f64>,
    /// Terminal reward R(x_0); zero until a trainer fills it in.
    pub reward: f64,
    /// x' - mean_acting per step; equals the injected noise.
    pub(crate) residuals: Vec<Vec<f64>>,
    /// d(drift)/d(velocity) multiplier per step.
    pub(crate) drift_mults: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("rollout has at least one state")
    }

    /// Sum over steps of log pi_acting - log pi_reference.
    pub fn log_ratio_sum(&self) -> f64 {
        self.logp_acting
            .iter()
            .zip(&self.logp_reference)
            .map(|(a, r)| a - r)
            .sum()
    }
}

struct StepCoeffs {
    t: f64,
    /// 1 - sigma^2 / (2c): multiplies the velocity inside the drift.
    mult: f64,
    /// (sigma^2 / (2c)) * a: multiplies x inside the drift.
    x_coef: f64,
}

fn rollout_coeffs(cfg: &FinetuneConfig) -> Result<Vec<StepCoeffs>> {
    let n = cfg.rollout_steps;
    let h = 1.0 / n as f64;
    let half_s2 = 0.5 * cfg.sigma * cfg.sigma;
    (0..n)
        .map(|k| {
            let t = 1.0 - k as f64 * h;
            let c = cfg.schedule.conversion_coeffs(t)?;
            Ok(StepCoeffs {
                t,
                mult: 1.0 - half_s2 / c.score,
                x_coef: half_s2 / c.score * c.drift,
            })
        })
        .collect()
}

fn rollout_one<A: VelocityField, R: VelocityField>(
    acting: &A,
    reference: &R,
    cfg: &FinetuneConfig,
    coeffs: &[StepCoeffs],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<Trajectory> {
    let d = acting.dim();
    let n = cfg.rollout_steps;
    let h = 1.0 / n as f64;
    let sqrt_h = h.sqrt();
    let var = cfg.sigma * cfg.sigma * h;
    let log_norm = -0.5 * (d as f64) * (var.ln() + LN_2PI);

    let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut traj = Trajectory {
        states: Vec::with_capacity(n + 1),
        increments: Vec::with_capacity(n),
        logp_acting: Vec::with_capacity(n),
        logp_reference: Vec::with_capacity(n),
        reward: 0.0,
        residuals: Vec::with_capacity(n),
        drift_mults: Vec::with_capacity(n),
    };
    traj.states.push(x.clone());
    for sc in coeffs {
        let v_act = acting.velocity(&x, sc.t);
        let v_ref = reference.velocity(&x, sc.t);
        let mut next = vec![0.0; d];
        let mut resid = vec![0.0; d];
        let mut inc = vec![0.0; d];
        let mut sq_act = 0.0;
        let mut sq_ref = 0.0;
        for j in 0..d {
            let drift_act = sc.mult * v_act[j] + sc.x_coef * x[j];
            let drift_ref = sc.mult * v_ref[j] + sc.x_coef * x[j];
            let noise: f64 = StandardNormal.sample(rng);
            let r = cfg.sigma * sqrt_h * noise;
            next[j] = x[j] - h * drift_act + r;
            resid[j] = r;
            inc[j] = next[j] - x[j];
            let r_ref = next[j] - (x[j] - h * drift_ref);
            sq_act += r * r;
            sq_ref += r_ref * r_ref;
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > ROLLOUT_BOUND) {
            return None;
        }
        traj.logp_acting.push(log_norm - 0.5 * sq_act / var);
        traj.logp_reference.push(log_norm - 0.5 * sq_ref / var);
        traj.residuals.push(resid);
        traj.drift_mults.push(sc.mult);
        traj.increments.push(inc);
        traj.states.push(next.clone());
        x = next;
    }
    Some(traj)
}

/// Euler-Maruyama rollouts of the acting model's SDE from t=1 to t=0, with
/// exact per-step Gaussian transition log-probabilities under both the
/// acting and the reference model. Non-finite trajectories are re-sampled
/// from a derived retry stream; the second return value counts rejections.
pub fn sde_rollout<A: VelocityField, R: VelocityField>(
    acting: &A,
    reference: &R,
    cfg: &FinetuneConfig,
    n: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, usize)> {
    cfg.validate()?;
    if !(cfg.sigma > 0.0) {
        return Err(Error::invalid("rollout", "sigma must be positive for SDE transitions"));
    }
    if acting.dim() != reference.dim() {
        return Err(Error::DimensionMismatch { expected: acting.dim(), got: reference.dim() });
    }
    let coeffs = rollout_coeffs(cfg)?;
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0usize;
    for i in 0..n {
        let mut found = None;
        for attempt in 0..64u64 {
            let mut r =
                rng::rng_from(rng::substream(rng::substream(seed, i as u64), attempt));
            match rollout_one(acting, reference, cfg, &coeffs, &mut r) {
                Some(t) => {
                    found = Some(t);
                    break;
                }
                None => rejected += 1,
            }
        }
        match found {
            Some(t) => out.push(t),
            None => return Err(Error::AllTrajectoriesRejected { attempted: rejected }),
        }
    }
    Ok((out, rejected))
}

/// Per-step training diagnostics shared by the fine-tuning routes. Fields a
/// route cannot estimate are NaN.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub step: usize,
    pub mean_reward: f64,
    pub kl_estimate: f64,
    pub grad_norm: f64,
    pub loss: f64,
    /// Effective sample size of the RWR batch weights, if applicable.
    pub ess: Option<f64>,
}

/// One REINFORCE update with leave-one-out baselines; the KL penalty enters
/// through the per-step log-ratio terms of the return. At theta == reference
/// with zero reward the estimated gradient vanishes identically.
pub fn policy_gradient_step(
    theta: &mut VelocityModel,
    opt: &mut Optimizer,
    reference: &VelocityModel,
    reward: &RewardFn,
    cfg: &FinetuneConfig,
    step_index: usize,
    rollout_seed: u64,
) -> Result<StepDiagnostics> {
    let b = cfg.batch_size;
    let (mut trajs, _rejected) = sde_rollout(theta, reference, cfg, b, rollout_seed)?;
    let n = cfg.rollout_steps;
    let h = 1.0 / n as f64;
    let _ = h;
    for tr in &mut trajs {
        tr.reward = reward.evaluate(tr.terminal());
    }
    let mean_reward = trajs.iter().map(|t| t.reward).sum::<f64>() / b as f64;
    let kl_estimate = trajs.iter().map(|t| t.log_ratio_sum()).sum::<f64>() / b as f64;

    // per-trajectory, per-step returns
    let returns: Vec<Vec<f64>> = trajs
        .iter()
        .map(|tr| match cfg.return_kind {
            ReturnKind::Trajectory => {
                let g = tr.reward - cfg.beta * tr.log_ratio_sum();
                vec![g; n]
            }
            ReturnKind::RewardToGo => {
                let mut tail = 0.0;
                let mut gs = vec![0.0; n];
                for k in (0..n).rev() {
                    tail += tr.logp_acting[k] - tr.logp_reference[k];
                    gs[k] = tr.reward - cfg.beta * tail;
                }
                gs
            }
        })
        .collect();

    // leave-one-out baseline per step across the batch
    let mut grads = Gradients::zeros_like(theta);
    let inv_sigma2 = 1.0 / (cfg.sigma * cfg.sigma);
    let scale_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for k in 0..n {
        let sum_k: f64 = returns.iter().map(|g| g[k]).sum();
        for (tr, g) in trajs.iter().zip(&returns) {
            let baseline = if b > 1 { (sum_k - g[k]) / (b - 1) as f64 } else { 0.0 };
            let adv = g[k] - baseline;
            // minimizer gradient: +(adv * mult / sigma^2) * residual into d v/d theta
            let scale = adv * tr.drift_mults[k] * inv_sigma2 * scale_b;
            theta.accumulate_grad_params(&tr.states[k], coeff_t(k, n), &tr.residuals[k], scale, &mut grads)?;
        }
    }
    for g in &returns {
        loss -= g[0] * scale_b; // negative mean total return
    }
    let grad_norm = grads.norm();
    opt.step(theta, &grads)?;
    Ok(StepDiagnostics {
        step: step_index,
        mean_reward,
        kl_estimate,
        grad_norm,
        loss,
        ess: None,
    })
}

fn coeff_t(k: usize, n: usize) -> f64 {
    1.0 - k as f64 / n as f64
}

/// Full policy-gradient fine-tune starting from a copy of the reference.
pub fn policy_gradient_finetune(
    reference: &VelocityModel,
    reward: &RewardFn,
    cfg: &FinetuneConfig,
) -> Result<(VelocityModel, Vec<StepDiagnostics>)> {
    cfg.validate()?;
    let mut theta = reference.clone();
    let mut opt = Optimizer::new(OptMethod::Adam, cfg.learning_rate, &theta);
    let stream = rng::stream_seed(cfg.seed, "finetune/pg");
    let mut diagnostics = Vec::new();
    for step in 0..cfg.steps {
        let diag = policy_gradient_step(
            &mut theta,
            &mut opt,
            reference,
            reward,
            cfg,
            step,
            rng::substream(stream, step as u64),
        )?;
        diagnostics.push(diag);
    }
    Ok((theta, diagnostics))
}

/// Log-weights of reward-weighted regression: R(x)/beta per sample.
pub fn rwr_log_weights(rewards: &[f64], beta: f64) -> Vec<f64> {
    rewards.iter().map(|r| r / beta).collect()
}

/// Reward-weighted regression: draws a pool from the reference, weights it
/// by exp(R/beta) (clipped at the configured percentile, self-normalized to
/// mean one), and fits the model by weighted flow matching.
pub fn rwr_finetune(
    reference: &VelocityModel,
    reward: &RewardFn,
    cfg: &FinetuneConfig,
) -> Result<(VelocityModel, Vec<StepDiagnostics>)> {
    cfg.validate()?;
    let d = reference.dim();
    let pool_cfg = SamplerConfig::euler(
        cfg.sample_steps,
        cfg.rwr_pool,
        rng::stream_seed(cfg.seed, "finetune/rwr/pool"),
    );
    let pool = guide::sample_field(reference, &pool_cfg, &cfg.schedule)?;
    if pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let rewards: Vec<f64> = pool.rows().map(|x| reward.evaluate(x)).collect();
    let mut log_w = rwr_log_weights(&rewards, cfg.beta);
    // clip the upper tail to stabilize the regression
    let mut sorted = log_w.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q_idx = ((cfg.rwr_clip_percentile / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    let clip = sorted[q_idx.min(sorted.len() - 1)];
    for lw in &mut log_w {
        *lw = lw.min(clip);
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
    let mean_w = weights.iter().sum::<f64>() / weights.len() as f64;
    for w in &mut weights {
        *w /= mean_w;
    }

    let mut theta = reference.clone();
    let mut opt = Optimizer::new(OptMethod::Adam, cfg.learning_rate, &theta);
    let mut idx_rng = rng::stream_rng(cfg.seed, "finetune/rwr/batch");
    let mut noise_rng = rng::stream_rng(cfg.seed, "finetune/rwr/noise");
    let mut time_rng = rng::stream_rng(cfg.seed, "finetune/rwr/time");
    let eps = cfg.schedule.eps_clamp;
    let mut diagnostics = Vec::new();
    let mut row = vec![0.0; d];
    for step in 0..cfg.steps {
        let mut x0 = SampleBatch::with_capacity(d, cfg.batch_size);
        let mut x1 = SampleBatch::with_capacity(d, cfg.batch_size);
        let mut t_batch = Vec::with_capacity(cfg.batch_size);
        let mut w_batch = Vec::with_capacity(cfg.batch_size);
        let mut reward_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let i = idx_rng.random_range(0..pool.len());
            x0.push(pool.row(i));
            w_batch.push(weights[i]);
            reward_sum += rewards[i];
            for slot in row.iter_mut() {
                *slot = StandardNormal.sample(&mut noise_rng);
            }
            x1.push(&row);
            t_batch.push(time_rng.random_range(eps..(1.0 - eps)));
        }
        let (loss, grads) =
            train::cfm_loss_weighted(&theta, &x0, &x1, &t_batch, Some(&w_batch), &cfg.schedule)?;
        let sum_w: f64 = w_batch.iter().sum();
        let sum_w2: f64 = w_batch.iter().map(|w| w * w).sum();
        let ess = sum_w * sum_w / sum_w2;
        opt.step(&mut theta, &grads)?;
        if step % cfg.log_interval == 0 || step + 1 == cfg.steps {
            diagnostics.push(StepDiagnostics {
                step,
                mean_reward: reward_sum / cfg.batch_size as f64,
                kl_estimate: f64::NAN,
                grad_norm: grads.norm(),
                loss,
                ess: Some(ess),
            });
        }
    }
    Ok((theta, diagnostics))
}

/// A Bradley-Terry preference pair: winner then loser.
pub type PreferencePair = (Vec<f64>, Vec<f64>);

/// Draws sample pairs from the reference and labels the winner with
/// probability sigmoid(R(a) - R(b)).
pub fn generate_preference_pairs(
    reference: &VelocityModel,
    reward: &RewardFn,
    n_pairs: usize,
    cfg: &FinetuneConfig,
) -> Result<Vec<PreferencePair>> {
    let sample_cfg = SamplerConfig::euler(
        cfg.sample_steps,
        2 * n_pairs,
        rng::stream_seed(cfg.seed, "finetune/dpo/pairs"),
    );
    let batch = guide::sample_field(reference, &sample_cfg, &cfg.schedule)?;
    if batch.len() < 2 * n_pairs {
        return Err(Error::invalid(
            "dpo pairs",
            format!("{} of {} samples rejected", batch.rejected, 2 * n_pairs),
        ));
    }
    let mut label_rng = rng::stream_rng(cfg.seed, "finetune/dpo/labels");
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let a = batch.row(2 * i).to_vec();
        let b = batch.row(2 * i + 1).to_vec();
        let p_a_wins = sigmoid(reward.evaluate(&a) - reward.evaluate(&b));
        let u: f64 = label_rng.random();
        if u < p_a_wins {
            pairs.push((a, b));
        } else {
            pairs.push((b, a));
        }
    }
    Ok(pairs)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// -log sigmoid(m), computed stably.
fn neg_log_sigmoid(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// DPO loss on one pair with exact ODE log-densities, and its gradient with
/// respect to theta only. The margin is
/// beta * (log p_theta(x_w) - log p_ref(x_w) - log p_theta(x_l) + log p_ref(x_l)).
pub fn dpo_loss(
    theta: &VelocityModel,
    reference: &VelocityModel,
    pair: &PreferencePair,
    beta: f64,
    ode_steps: usize,
) -> Result<(f64, Gradients)> {
    let (ref xw, ref xl) = *pair;
    if xw == xl {
        return Err(Error::invalid("dpo pair", "winner and loser must differ"));
    }
    let ref_w = density::log_density(reference, xw, ode_steps)?;
    let ref_l = density::log_density(reference, xl, ode_steps)?;
    let (lp_w, g_w) = density::log_density_with_grad(theta, xw, ode_steps)?;
    let (lp_l, g_l) = density::log_density_with_grad(theta, xl, ode_steps)?;
    let margin = beta * ((lp_w - ref_w) - (lp_l - ref_l));
    let loss = neg_log_sigmoid(margin);
    // d loss / d margin = -sigmoid(-margin)
    let dm = -sigmoid(-margin) * beta;
    let mut grads = Gradients::zeros_like(theta);
    grads.add_scaled(&g_w, dm);
    grads.add_scaled(&g_l, -dm);
    Ok((loss, grads))
}

/// DPO fine-tune over a fixed pair set. Reference log-densities are
/// precomputed once; theta starts as a copy of the reference.
pub fn dpo_finetune(
    reference: &VelocityModel,
    pairs: &[PreferencePair],
    cfg: &FinetuneConfig,
) -> Result<(VelocityModel, Vec<StepDiagnostics>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let steps = cfg.dpo_ode_steps;
    // cache reference log-densities per pair
    let ref_lp: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(w, l)| {
            Ok((
                density::log_density(reference, w, steps)?,
                density::log_density(reference, l, steps)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut theta = reference.clone();
    let mut opt = Optimizer::new(OptMethod::Adam, cfg.learning_rate, &theta);
    let mut idx_rng = rng::stream_rng(cfg.seed, "finetune/dpo/batch");
    let mut diagnostics = Vec::new();
    for step in 0..cfg.steps {
        let mut grads = Gradients::zeros_like(&theta);
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let i = idx_rng.random_range(0..pairs.len());
            let (ref xw, ref xl) = pairs[i];
            let (lp_w, g_w) = density::log_density_with_grad(&theta, xw, steps)?;
            let (lp_l, g_l) = density::log_density_with_grad(&theta, xl, steps)?;
            let margin = cfg.beta * ((lp_w - ref_lp[i].0) - (lp_l - ref_lp[i].1));
            loss_sum += neg_log_sigmoid(margin);
            margin_sum += margin;
            let dm = -sigmoid(-margin) * cfg.beta * inv_b;
            grads.add_scaled(&g_w, dm);
            grads.add_scaled(&g_l, -dm);
        }
        let grad_norm = grads.norm();
        opt.step(&mut theta, &grads)?;
        if step % cfg.log_interval == 0 || step + 1 == cfg.steps {
            diagnostics.push(StepDiagnostics {
                step,
                mean_reward: margin_sum * inv_b,
                kl_estimate: f64::NAN,
                grad_norm,
                loss: loss_sum * inv_b,
                ess: None,
            });
        }
    }
    Ok((theta, diagnostics))
}

/// Gradient of the implicit reward along x: beta times the difference of
/// the two fields' scores, each obtained through the velocity/score
/// relation at (x, t).
pub fn implicit_reward_gradient<F: VelocityField, G: VelocityField>(
    theta: &F,
    reference: &G,
    x: &[f64],
    t: f64,
    beta: f64,
    sched: &Schedule,
) -> Result<Vec<f64>> {
    if theta.dim() != reference.dim() || x.len() != theta.dim() {
        return Err(Error::DimensionMismatch { expected: theta.dim(), got: x.len() });
    }
    let c = sched.conversion_coeffs(t)?;
    let v_t = theta.velocity(x, t);
    let v_r = reference.velocity(x, t);
    Ok(v_t
        .iter()
        .zip(&v_r)
        .map(|(vt, vr)| beta * (vt - vr) / c.score)
        .collect())
}
