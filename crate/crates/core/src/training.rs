//! Optimizer, γ schedule and the two-phase training loop.
//!
//! Each step draws a batch of clean samples, corrupts each with fresh
//! Gaussian noise, runs the prox map, and updates the network with Adam
//! followed by the `Wz ≥ 0` projection. The first phase optimizes the
//! pretraining loss (ℓ1 by default); the second optimizes proximal matching
//! with a γ that halves on a fixed schedule.
//!
//! Proximal matching is optimized in its unnormalized form
//! `1 − exp(−‖r‖²/γ²)`. The normalizing factor `(πγ²)^(−n/2)` is a positive
//! constant for fixed γ, so minimizers and Adam updates are unchanged, but
//! for image-sized `n` it underflows to zero and would erase every gradient.

use crate::data::SampleSource;
use crate::diff::{loss_parameter_gradient, Matrix};
use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::math;
use crate::potential::ProxModel;
use crate::rng::{Rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainLoss {
    L1,
    L2,
    /// Proximal matching at `gamma0` already during the first phase; used by
    /// recipes that are matching-only with a learning-rate drop.
    Matching,
}

impl PretrainLoss {
    pub fn tag(self) -> &'static str {
        match self {
            PretrainLoss::L1 => "l1",
            PretrainLoss::L2 => "l2",
            PretrainLoss::Matching => "matching",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PretrainLoss::L1),
            "l2" => Ok(PretrainLoss::L2),
            "matching" => Ok(PretrainLoss::Matching),
            _ => Err(Error::InvalidArgument(format!("unknown pretraining loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sigma_noise: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub match_steps: usize,
    pub lr_pretrain: f64,
    pub lr_match: f64,
    pub gamma0: f64,
    /// Steps (counted from the start of the matching phase) between halvings.
    pub gamma_halve_every: usize,
    pub gamma_min: f64,
    pub seed: u64,
    pub loss_pretrain: PretrainLoss,
    pub log_every: usize,
    /// Decay of an exponential moving average of the weights kept during
    /// the matching phase; the average becomes the returned model. Zero
    /// disables it.
    pub ema_decay: f64,
}

impl TrainConfig {
    /// Split normal recipe: σ = 1, γ = 0.1 held fixed, Adam for 10k steps at
    /// 1e−3 then 10k at 1e−4. The weights are averaged over the second
    /// phase, which removes most of the step-to-step jitter of the slopes.
    pub fn split_normal(seed: u64) -> Self {
        Self {
            sigma_noise: 1.0,
            batch_size: 1024,
            pretrain_steps: 10_000,
            match_steps: 10_000,
            lr_pretrain: 1e-3,
            lr_match: 1e-4,
            gamma0: 0.1,
            gamma_halve_every: usize::MAX,
            gamma_min: 1e-4,
            seed,
            loss_pretrain: PretrainLoss::Matching,
            log_every: 500,
            ema_decay: 0.9995,
        }
    }

    /// Patch denoiser recipe at σ = 0.1: ℓ1 pretraining, then matching with
    /// `γ0 = 0.64 √n` halved four times over the matching phase.
    pub fn denoiser(input_dim: usize, equivariant: bool, seed: u64) -> Self {
        let gamma0 = 0.64 * (input_dim as f64).sqrt();
        Self {
            sigma_noise: 0.1,
            batch_size: 32,
            pretrain_steps: 5_000,
            match_steps: 5_000,
            lr_pretrain: if equivariant { 1e-5 } else { 1e-3 },
            lr_match: if equivariant { 1e-5 } else { 1e-4 },
            gamma0,
            gamma_halve_every: 1_250,
            gamma_min: 1e-3 * gamma0,
            seed,
            loss_pretrain: PretrainLoss::L1,
            log_every: 250,
            ema_decay: 0.0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.match_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.sigma_noise >= 0.0) || !self.sigma_noise.is_finite() {
            return bad("sigma_noise must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_pretrain > 0.0 && self.lr_match > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.gamma0 > 0.0 && self.gamma_min > 0.0) || self.gamma_min > self.gamma0 {
            return bad("need 0 < gamma_min ≤ gamma0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.gamma_halve_every == 0 || self.log_every == 0 {
            return bad("gamma_halve_every and log_every must be positive");
        }
        Ok(())
    }
}

/// `max(γ0 · 2^(−⌊step / halve_every⌋), γ_min)`.
pub fn gamma_at(step: usize, cfg: &TrainConfig) -> f64 {
    let halvings = step / cfg.gamma_halve_every;
    let g = if halvings >= 2000 {
        0.0
    } else {
        cfg.gamma0 * 0.5f64.powi(halvings as i32)
    };
    g.max(cfg.gamma_min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.v
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(theta: &mut [Matrix], grads: &[Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    if theta.len() != grads.len() || theta.len() != state.m.len() {
        return Err(Error::Shape("adam: parameter, gradient and state counts differ".into()));
    }
    for ((p, g), m) in theta.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!("adam: shapes {:?} / {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in theta.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Adam step on the model's network followed by the `Wz ≥ 0` projection.
pub fn optimizer_step(model: &mut ProxModel, grads: &[Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    let params = model.params_mut();
    adam_step(params.tensors_mut(), grads, state, lr)?;
    params.project_weights();
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    /// Last step (1-based) of the logging interval.
    pub step: usize,
    /// Mean optimized loss over the interval.
    pub loss: f64,
    pub loss_kind: &'static str,
    pub gamma: Option<f64>,
    pub lr: f64,
    pub eval_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

/// Mean PSNR (peak 1) of the prox output against clean targets.
pub fn eval_psnr(model: &ProxModel, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    use rayon::prelude::*;
    let vals: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|(y, x)| math::psnr(&model.prox_apply(y)?, x, 1.0))
        .collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Phase, loss and learning rate at a 0-based step.
pub fn schedule_at(step: usize, cfg: &TrainConfig) -> (Loss, f64, Option<f64>) {
    if step < cfg.pretrain_steps {
        match cfg.loss_pretrain {
            PretrainLoss::L1 => (Loss::L1, cfg.lr_pretrain, None),
            PretrainLoss::L2 => (Loss::L2, cfg.lr_pretrain, None),
            PretrainLoss::Matching => (Loss::MatchingKernel { gamma: cfg.gamma0 }, cfg.lr_pretrain, Some(cfg.gamma0)),
        }
    } else {
        let g = gamma_at(step - cfg.pretrain_steps, cfg);
        (Loss::MatchingKernel { gamma: g }, cfg.lr_match, Some(g))
    }
}

/// Trains `model` on denoising pairs drawn from `data`. Bit-reproducible for
/// a fixed `cfg.seed`, independent of the thread count.
pub fn train(
    mut model: ProxModel,
    data: &mut dyn SampleSource,
    cfg: &TrainConfig,
    eval: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<(ProxModel, TrainHistory)> {
    cfg.validate()?;
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "data dimension {} but model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let mut data_rng = Rng::stream(cfg.seed, Stream::Data);
    let mut noise_rng = Rng::stream(cfg.seed, Stream::Noise);
    let mut adam = AdamState::new(model.program().param_shapes());
    let mut history = TrainHistory::default();
    let mut interval = (0.0, 0usize);
    let mut ema: Option<Vec<Matrix>> = None;
    model.params_mut().project_weights();
    for step in 0..cfg.total_steps() {
        let (loss, lr, gamma) = schedule_at(step, cfg);
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.batch_size)
            .map(|_| {
                let x = data.sample(&mut data_rng);
                let y = math::gaussian_corrupt(&x, cfg.sigma_noise, &mut noise_rng);
                (y, x)
            })
            .collect();
        let (value, grads) = loss_parameter_gradient(model.program(), model.params().tensors(), &batch, &loss)?;
        if !value.is_finite() || !grads.iter().all(Matrix::all_finite) {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("non-finite {} loss {value}", loss.name()),
            });
        }
        optimizer_step(&mut model, &grads, &mut adam, lr)?;
        if cfg.ema_decay > 0.0 && step >= cfg.pretrain_steps {
            let current = model.params().tensors();
            match &mut ema {
                None => ema = Some(current.to_vec()),
                Some(avg) => {
                    for (a, p) in avg.iter_mut().zip(current) {
                        for (u, v) in a.as_mut_slice().iter_mut().zip(p.as_slice()) {
                            *u = cfg.ema_decay * *u + (1.0 - cfg.ema_decay) * v;
                        }
                    }
                }
            }
        }
        interval.0 += value;
        interval.1 += 1;
        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.total_steps() {
            let eval_psnr = match eval {
                Some(pairs) if !pairs.is_empty() => Some(eval_psnr(&model, pairs)?),
                _ => None,
            };
            history.entries.push(HistoryEntry {
                step: done,
                loss: interval.0 / interval.1 as f64,
                loss_kind: loss.name(),
                gamma,
                lr,
                eval_psnr,
            });
            interval = (0.0, 0);
        }
    }
    if let Some(avg) = ema {
        model.params_mut().tensors_mut().clone_from_slice(&avg);
    }
    Ok((model, history))
}
