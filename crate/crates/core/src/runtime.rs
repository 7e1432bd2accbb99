//! Cached execution: runs a sampling pass under a static schedule, keeps the
//! branch-output cache, and records a trace proving plan/execution
//! conformance.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{ddim_sample, DiffusionError, NoiseSchedule, SamplerConfig};
use crate::model::{
    BranchAction, BranchOutput, BranchPolicy, LayerKey, Model, ModelError,
};
use crate::numerics::Tensor;
use crate::scheduler::{validate, Decision, Schedule};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("schedule failed validation: {0}")]
    InvalidSchedule(String),
    #[error("schedule covers {schedule} steps but sampler runs {sampler}")]
    StepMismatch { schedule: usize, sampler: usize },
    #[error("schedule has no decisions for layer kind {0}")]
    MissingKind(crate::model::LayerKind),
    #[error("trace does not conform to schedule at step {step}, {key:?}")]
    Nonconforming { step: usize, key: LayerKey },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One live entry per sublayer; holds the branch output from the most recent
/// compute step for that key.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub value: Tensor,
    pub source_step: usize,
}

pub type CacheStore = HashMap<LayerKey, CacheEntry>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceAction {
    Computed,
    Reused { source: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub key: LayerKey,
    pub action: TraceAction,
}

/// Actual per-sublayer actions of one run, plus the executed MAC tally.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
    pub macs: u64,
}

impl ExecutionTrace {
    pub fn save_jsonl(&self, path: &Path) -> Result<(), RuntimeError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("trace serialize"))?;
        }
        Ok(())
    }
}

/// Policy that executes a schedule against a branch-output cache.
pub struct SchedulePolicy<'a> {
    schedule: &'a Schedule,
    cache: CacheStore,
    entries: Vec<TraceEntry>,
}

impl<'a> SchedulePolicy<'a> {
    pub fn new(schedule: &'a Schedule) -> Self {
        Self {
            schedule,
            cache: CacheStore::new(),
            entries: Vec::new(),
        }
    }

    pub fn into_entries(self) -> Vec<TraceEntry> {
        self.entries
    }
}

impl BranchPolicy for SchedulePolicy<'_> {
    fn action(&mut self, key: LayerKey, step: usize) -> Result<BranchAction, ModelError> {
        let decisions = self
            .schedule
            .decisions
            .get(&key.kind)
            .ok_or_else(|| ModelError::Policy(format!("no decisions for kind {}", key.kind)))?;
        let decision = decisions
            .get(step)
            .ok_or_else(|| ModelError::Policy(format!("step {step} beyond schedule")))?;
        match decision {
            Decision::Compute => {
                self.entries.push(TraceEntry {
                    step,
                    key,
                    action: TraceAction::Computed,
                });
                Ok(BranchAction::Compute)
            }
            Decision::Reuse { source } => {
                let entry = self.cache.get(&key).ok_or_else(|| {
                    ModelError::Policy(format!("cache miss for {key:?} at step {step}"))
                })?;
                if entry.source_step != *source {
                    return Err(ModelError::Policy(format!(
                        "cache for {key:?} holds step {} but schedule reuses step {source}",
                        entry.source_step
                    )));
                }
                self.entries.push(TraceEntry {
                    step,
                    key,
                    action: TraceAction::Reused { source: *source },
                });
                Ok(BranchAction::Inject(entry.value.clone()))
            }
        }
    }

    fn observe(&mut self, out: &BranchOutput) {
        // deep copy at store time; activations are not aliased by the cache
        self.cache.insert(
            out.key,
            CacheEntry {
                value: out.value.clone(),
                source_step: out.step,
            },
        );
    }
}

pub struct CachedRun {
    pub x0: Tensor,
    pub trajectory: Vec<Tensor>,
    pub trace: ExecutionTrace,
}

/// Execute one sampling run under `schedule`, returning the sample and the
/// conformance-checked execution trace.
pub fn run_cached(
    model: &Model,
    sampler: &SamplerConfig,
    noise: &NoiseSchedule,
    schedule: &Schedule,
    context: Option<&Tensor>,
) -> Result<CachedRun, RuntimeError> {
    let violations = validate(schedule);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(RuntimeError::InvalidSchedule(msgs.join("; ")));
    }
    if schedule.steps != sampler.steps {
        return Err(RuntimeError::StepMismatch {
            schedule: schedule.steps,
            sampler: sampler.steps,
        });
    }
    for kind in model.config().kinds() {
        if !schedule.decisions.contains_key(&kind) {
            return Err(RuntimeError::MissingKind(kind));
        }
    }

    let mut policy = SchedulePolicy::new(schedule);
    let run = ddim_sample(model, sampler, noise, &mut policy, context)?;
    let entries = policy.into_entries();

    // the trace must equal the schedule entry for entry
    for e in &entries {
        let planned = schedule.decisions[&e.key.kind][e.step];
        let matches = matches!(
            (planned, e.action),
            (Decision::Compute, TraceAction::Computed)
        ) || matches!(
            (planned, e.action),
            (Decision::Reuse { source: a }, TraceAction::Reused { source: b }) if a == b
        );
        if !matches {
            return Err(RuntimeError::Nonconforming {
                step: e.step,
                key: e.key,
            });
        }
    }
    let expected_len = sampler.steps * model.layer_keys().len();
    if entries.len() != expected_len {
        return Err(RuntimeError::InvalidSchedule(format!(
            "trace length {} != steps x sublayers = {expected_len}",
            entries.len()
        )));
    }

    Ok(CachedRun {
        x0: run.x0,
        trajectory: run.trajectory,
        trace: ExecutionTrace {
            entries,
            macs: run.macs,
        },
    })
}

pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rel_l1: f64,
    pub psnr: f64,
    pub cosine: f64,
    /// Relative L1 divergence at each trajectory step.
    pub per_step_rel_l1: Vec<f64>,
}

fn rel_l1_f64(baseline: &Tensor, other: &Tensor) -> f64 {
    let denom: f64 = baseline.data().iter().map(|v| v.abs() as f64).sum();
    let num: f64 = baseline
        .data()
        .iter()
        .zip(other.data())
        .map(|(b, c)| (b - c).abs() as f64)
        .sum();
    if denom == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::MAX
        }
    } else {
        num / denom
    }
}

/// Fidelity of a cached run relative to its uncached baseline: relative L1,
/// PSNR over the baseline's value range (capped at 99 dB), cosine
/// similarity, and the per-step trajectory divergence series.
pub fn compare_runs(
    baseline_x0: &Tensor,
    cached_x0: &Tensor,
    baseline_traj: &[Tensor],
    cached_traj: &[Tensor],
) -> FidelityReport {
    let rel_l1 = rel_l1_f64(baseline_x0, cached_x0);

    let n = baseline_x0.numel() as f64;
    let mse: f64 = baseline_x0
        .data()
        .iter()
        .zip(cached_x0.data())
        .map(|(b, c)| {
            let d = (b - c) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    let range = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in baseline_x0.data() {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        hi - lo
    };
    let psnr = if mse == 0.0 || range == 0.0 {
        PSNR_CAP_DB
    } else {
        (20.0 * (range / mse.sqrt()).log10()).min(PSNR_CAP_DB)
    };

    let dot: f64 = baseline_x0
        .data()
        .iter()
        .zip(cached_x0.data())
        .map(|(b, c)| (b * c) as f64)
        .sum();
    let nb: f64 = baseline_x0
        .data()
        .iter()
        .map(|v| (v * v) as f64)
        .sum::<f64>()
        .sqrt();
    let nc: f64 = cached_x0
        .data()
        .iter()
        .map(|v| (v * v) as f64)
        .sum::<f64>()
        .sqrt();
    let cosine = if nb == 0.0 || nc == 0.0 {
        0.0
    } else {
        dot / (nb * nc)
    };

    let per_step_rel_l1 = baseline_traj
        .iter()
        .zip(cached_traj)
        .map(|(b, c)| rel_l1_f64(b, c))
        .collect();

    FidelityReport {
        rel_l1,
        psnr,
        cosine,
        per_step_rel_l1,
    }
}
