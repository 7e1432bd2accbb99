//! Forward noising definition and a deterministic DDIM reverse sampler
//! (eta = 0) with optional classifier-free guidance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BranchPolicy, Model, ModelError};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Linear-beta noise schedule with cumulative alpha products.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub betas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    /// alpha_bar at 1-indexed diffusion time t; t = 0 maps to 1 (clean data).
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn make_schedule(
    t_total: usize,
    beta_start: f32,
    beta_end: f32,
) -> Result<NoiseSchedule, DiffusionError> {
    if t_total == 0 {
        return Err(DiffusionError::Config("T must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Config(format!(
            "require 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let frac = if t_total == 1 {
            0.0
        } else {
            t as f32 / (t_total - 1) as f32
        };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut prod = 1.0f64;
    for &b in &betas {
        prod *= 1.0 - b as f64;
        alpha_bars.push(prod as f32);
    }
    Ok(NoiseSchedule {
        t_total,
        betas,
        alpha_bars,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of sampling steps (evenly spaced descending subsequence of 1..T).
    pub steps: usize,
    /// Guidance scale w; 0 disables guidance (single model evaluation per step).
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 1.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
        if self.steps == 0 || self.steps > schedule.t_total {
            return Err(DiffusionError::Config(format!(
                "steps must be in [1, {}], got {}",
                schedule.t_total, self.steps
            )));
        }
        if self.cfg_scale < 0.0 {
            return Err(DiffusionError::Config("cfg_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn uses_guidance(&self) -> bool {
        self.cfg_scale > 0.0
    }

    /// Batch width of one model evaluation under this sampler.
    pub fn batch(&self) -> usize {
        if self.uses_guidance() {
            2
        } else {
            1
        }
    }
}

/// Descending diffusion times visited by the sampler, one per execution step.
pub fn sample_timesteps(t_total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| i * t_total / steps).collect()
}

/// Closed-form forward noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    rng: &mut SeededRng,
) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let eps = rng.normal_tensor(x0.shape().to_vec());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data).expect("finite noised sample")
}

pub struct SampleRun {
    pub x0: Tensor,
    /// Initial noise plus one entry per update: length steps + 1.
    pub trajectory: Vec<Tensor>,
    /// MACs executed across all model evaluations.
    pub macs: u64,
}

/// Deterministic DDIM reverse pass driven by `policy` at every sublayer.
///
/// With guidance active, the conditional and unconditional branches travel in
/// one batched [2, L, d] tensor (row 0: null context, row 1: `context`), so a
/// cached branch output covers both.
pub fn ddim_sample(
    model: &Model,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    policy: &mut dyn BranchPolicy,
    context: Option<&Tensor>,
) -> Result<SampleRun, DiffusionError> {
    sampler.validate(schedule)?;
    let cfg = model.config();
    let l = cfg.tokens;
    let d = cfg.model_dim;
    let mut rng = SeededRng::new(sampler.seed);
    let mut x = rng.normal_tensor(vec![l, d]);
    let mut trajectory = vec![x.clone()];
    let mut macs = 0u64;

    let guided = sampler.uses_guidance();
    let batched_context = if guided && cfg.has_cross_attention() {
        // row 0: null prompt; row 1: the provided context (or the null
        // prompt again when generation is unconditional)
        let lc = cfg.context_tokens;
        let null = model.null_context().expect("cross implies null ctx");
        let mut data = null.data().to_vec();
        data.extend_from_slice(context.unwrap_or(null).data());
        Some(Tensor::new(vec![2, lc, d], data).expect("finite context"))
    } else {
        None
    };

    let timesteps = sample_timesteps(schedule.t_total, sampler.steps);
    for (step, &t) in timesteps.iter().enumerate() {
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = if step + 1 < timesteps.len() {
            schedule.alpha_bar(timesteps[step + 1])
        } else {
            1.0
        };

        let eps_hat: Vec<f32> = if guided {
            let mut data = x.data().to_vec();
            data.extend_from_slice(x.data());
            let batched = Tensor::new(vec![2, l, d], data).expect("finite batch");
            let out = model.forward(
                &batched,
                t as f32,
                step,
                batched_context.as_ref(),
                policy,
            )?;
            macs += out.macs;
            let n = l * d;
            let (eu, ec) = out.eps.data().split_at(n);
            let w = sampler.cfg_scale;
            eu.iter().zip(ec).map(|(u, c)| u + w * (c - u)).collect()
        } else {
            let out = model.forward(&x, t as f32, step, context, policy)?;
            macs += out.macs;
            out.eps.data().to_vec()
        };

        let mut next = Vec::with_capacity(l * d);
        let sab_t = ab_t.sqrt();
        let somb_t = (1.0 - ab_t).sqrt();
        let sab_p = ab_prev.sqrt();
        let somb_p = (1.0 - ab_prev).sqrt();
        for (xv, ev) in x.data().iter().zip(eps_hat.iter()) {
            let x0_pred = (xv - somb_t * ev) / sab_t;
            next.push(sab_p * x0_pred + somb_p * ev);
        }
        x = Tensor::new(vec![l, d], next).expect("finite update");
        trajectory.push(x.clone());
    }

    Ok(SampleRun {
        x0: x,
        trajectory,
        macs,
    })
}
