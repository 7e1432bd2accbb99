//! SmoothCache at desk scale: calibration-driven, training-free caching of
//! diffusion-transformer layer outputs across denoising steps.
//!
//! Pipeline: a toy diffusion transformer ([`model`]) is driven by a
//! deterministic DDIM sampler ([`diffusion`]). Uncached calibration passes
//! ([`calibration`]) measure how much each sublayer's pre-residual branch
//! output drifts across steps; a single threshold turns those error curves
//! into a static per-layer-type schedule ([`scheduler`]); the cache-aware
//! runtime ([`runtime`]) executes it, and [`metrics`] prices the work and
//! measures the speedup.

pub mod calibration;
pub mod diffusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod runtime;
pub mod scheduler;

pub use calibration::{
    calibrate, CalibrationConfig, CalibrationResult, CurveSet, ErrorCurve, ErrorRecord,
};
pub use diffusion::{ddim_sample, make_schedule, NoiseSchedule, SamplerConfig};
pub use metrics::{bench, mac_model, LatencyStats, MacBreakdown, RunReport};
pub use model::{build_model, LayerKey, LayerKind, Model, ModelConfig};
pub use numerics::{SeededRng, Tensor};
pub use runtime::{compare_runs, run_cached, ExecutionTrace, FidelityReport};
pub use scheduler::{
    predict_macs, synthesize_greedy, synthesize_uniform, validate, Decision, MacPrediction,
    Schedule,
};
