//! Schedule synthesis: error curves plus a single threshold alpha become a
//! static per-layer-type caching schedule. Also the uniform (FORA-style)
//! baseline, schedule validation, and analytic MAC pricing of a schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::calibration::CurveSet;
use crate::diffusion::SamplerConfig;
use crate::metrics::mac_model;
use crate::model::{LayerKind, ModelConfig};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("alpha must be > 0, got {0}")]
    InvalidAlpha(f32),
    #[error("uniform period n must be >= 1")]
    InvalidPeriod,
    #[error("curve coverage: kind {kind} missing cell (s={s}, k={k})")]
    Coverage { kind: LayerKind, s: usize, k: usize },
    #[error("schedule file version {0} is not supported (expected {SCHEDULE_VERSION})")]
    Version(u32),
    #[error("schedule missing decisions for kind {0}")]
    MissingKind(LayerKind),
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const SCHEDULE_VERSION: u32 = 1;

/// Per-step decision for one layer type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Compute,
    Reuse { source: usize },
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            Decision::Compute => ser.serialize_str("C"),
            Decision::Reuse { source } => ser.serialize_u64(*source as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(de)?;
        match v {
            serde_json::Value::String(s) if s == "C" => Ok(Decision::Compute),
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|source| Decision::Reuse {
                    source: source as usize,
                })
                .ok_or_else(|| D::Error::custom("reuse source must be a non-negative integer")),
            other => Err(D::Error::custom(format!(
                "decision must be \"C\" or an integer source step, got {other}"
            ))),
        }
    }
}

/// Static per-layer-type caching plan over execution steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub version: u32,
    pub steps: usize,
    pub alpha: Option<f32>,
    pub k_max: usize,
    pub decisions: BTreeMap<LayerKind, Vec<Decision>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: LayerKind,
    pub step: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} step {}: {}", self.kind, self.step, self.message)
    }
}

impl Schedule {
    pub fn computed_steps(&self, kind: LayerKind) -> usize {
        self.decisions
            .get(&kind)
            .map(|d| d.iter().filter(|x| **x == Decision::Compute).count())
            .unwrap_or(0)
    }

    pub fn has_reuse(&self) -> bool {
        self.decisions
            .values()
            .any(|d| d.iter().any(|x| matches!(x, Decision::Reuse { .. })))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        let sched: Schedule =
            serde_json::from_str(text).map_err(|e| ScheduleError::Parse(e.to_string()))?;
        if sched.version != SCHEDULE_VERSION {
            return Err(ScheduleError::Version(sched.version));
        }
        Ok(sched)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScheduleError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScheduleError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Greedy anchor synthesis per layer type: scan steps in order, reuse against
/// the last computed step while the curve mean is strictly below alpha and
/// the distance stays within k_max.
pub fn synthesize_greedy(
    curves: &CurveSet,
    alpha: f32,
    k_max: usize,
    steps: usize,
) -> Result<Schedule, ScheduleError> {
    if !(alpha > 0.0) {
        return Err(ScheduleError::InvalidAlpha(alpha));
    }
    let mut decisions = BTreeMap::new();
    for (&kind, curve) in curves {
        let mut dec = Vec::with_capacity(steps);
        dec.push(Decision::Compute);
        let mut anchor = 0usize;
        for s in 1..steps {
            let k = s - anchor;
            let reuse = if k <= k_max {
                let mean = curve
                    .mean(s, k)
                    .ok_or(ScheduleError::Coverage { kind, s, k })?;
                mean < alpha
            } else {
                false
            };
            if reuse {
                dec.push(Decision::Reuse { source: anchor });
            } else {
                dec.push(Decision::Compute);
                anchor = s;
            }
        }
        decisions.insert(kind, dec);
    }
    Ok(Schedule {
        version: SCHEDULE_VERSION,
        steps,
        alpha: Some(alpha),
        k_max,
        decisions,
    })
}

/// FORA-style baseline: compute every n-th step, reuse otherwise, identical
/// for all layer types.
pub fn synthesize_uniform(n: usize, steps: usize) -> Result<Schedule, ScheduleError> {
    if n == 0 {
        return Err(ScheduleError::InvalidPeriod);
    }
    let dec: Vec<Decision> = (0..steps)
        .map(|s| {
            if s % n == 0 {
                Decision::Compute
            } else {
                Decision::Reuse {
                    source: n * (s / n),
                }
            }
        })
        .collect();
    let decisions = LayerKind::ALL.iter().map(|&k| (k, dec.clone())).collect();
    Ok(Schedule {
        version: SCHEDULE_VERSION,
        steps,
        alpha: None,
        k_max: n,
        decisions,
    })
}

/// Check all schedule invariants; an empty list means the schedule is valid.
pub fn validate(schedule: &Schedule) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (&kind, dec) in &schedule.decisions {
        if dec.len() != schedule.steps {
            violations.push(Violation {
                kind,
                step: 0,
                message: format!(
                    "decision array length {} != steps {}",
                    dec.len(),
                    schedule.steps
                ),
            });
            continue;
        }
        if let Some(Decision::Reuse { .. }) = dec.first() {
            violations.push(Violation {
                kind,
                step: 0,
                message: "first step must compute".into(),
            });
        }
        for (s, d) in dec.iter().enumerate() {
            if let Decision::Reuse { source } = d {
                if *source >= s {
                    violations.push(Violation {
                        kind,
                        step: s,
                        message: format!("reuse source {source} is not earlier than step"),
                    });
                    continue;
                }
                if s - source > schedule.k_max {
                    violations.push(Violation {
                        kind,
                        step: s,
                        message: format!(
                            "skip distance {} exceeds k_max {}",
                            s - source,
                            schedule.k_max
                        ),
                    });
                }
                if dec[*source] != Decision::Compute {
                    violations.push(Violation {
                        kind,
                        step: s,
                        message: format!("source not computed: step {source} is a reuse step"),
                    });
                }
            }
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerKindMacs {
    pub computed_steps: usize,
    pub macs: u64,
}

/// Predicted MAC cost of running a schedule end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacPrediction {
    pub total: u64,
    pub baseline: u64,
    pub ratio: f64,
    pub per_kind: BTreeMap<LayerKind, PerKindMacs>,
}

/// Price a schedule: non-eligible work runs at every step; each eligible
/// sublayer kind is paid only on its computed steps. Guidance doubles the
/// per-item work (batched cond+uncond evaluation) but not the shared
/// timestep conditioning, which is evaluated once per forward.
pub fn predict_macs(
    schedule: &Schedule,
    model_cfg: &ModelConfig,
    sampler: &SamplerConfig,
) -> Result<MacPrediction, ScheduleError> {
    let bd = mac_model(model_cfg);
    let batch = sampler.batch() as u64;
    let steps = schedule.steps as u64;
    let fixed = steps * (bd.non_eligible_shared + batch * bd.non_eligible_per_item);
    let mut total = fixed;
    let mut baseline = fixed;
    let mut per_kind = BTreeMap::new();
    for kind in model_cfg.kinds() {
        let eligible = bd.per_kind[&kind];
        if !schedule.decisions.contains_key(&kind) {
            return Err(ScheduleError::MissingKind(kind));
        }
        let computed = schedule.computed_steps(kind) as u64;
        let kind_macs = batch * eligible * computed;
        total += kind_macs;
        baseline += batch * eligible * steps;
        per_kind.insert(
            kind,
            PerKindMacs {
                computed_steps: computed as usize,
                macs: kind_macs,
            },
        );
    }
    Ok(MacPrediction {
        total,
        baseline,
        ratio: total as f64 / baseline as f64,
        per_kind,
    })
}
