//! Calibration: uncached sampling passes that measure cross-step L1 relative
//! errors per sublayer and aggregate them into per-layer-type error curves.
//!
//! A calibration pass never caches; it maintains a ring buffer of the last
//! `k_max` branch outputs per sublayer and, at each step `s >= k`, records
//! the relative error of the step-`s` output against the output from step
//! `s - k`. Errors are pooled over blocks and calibration samples per kind.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{ddim_sample, DiffusionError, NoiseSchedule, SamplerConfig};
use crate::model::{
    BranchAction, BranchOutput, BranchPolicy, LayerKey, LayerKind, Model, ModelError,
};
use crate::numerics::{rel_l1_error, NumericsError, SeededRng, Tensor};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error("curves file version {0} is not supported (expected {CURVES_VERSION})")]
    Version(u32),
    #[error("curves for kind {kind} missing cell (s={s}, k={k})")]
    MissingCell { kind: LayerKind, s: usize, k: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub const CURVES_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub n_samples: usize,
    pub k_max: usize,
    /// Supply a seeded random context per sample instead of the null prompt.
    pub conditional: bool,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_samples: 10,
            k_max: 3,
            conditional: false,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.n_samples == 0 {
            return Err(CalibrationError::Config("n_samples must be >= 1".into()));
        }
        if self.k_max == 0 {
            return Err(CalibrationError::Config("k_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// One measured cross-step error for one sublayer in one calibration sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub sample: usize,
    pub kind: LayerKind,
    pub block: usize,
    pub step: usize,
    pub k: usize,
    pub err: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveCell {
    pub mean: f32,
    pub std: f32,
    pub ci95: f32,
    pub n: usize,
}

/// Per-kind error curve over (execution step, skip distance) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub kind: LayerKind,
    pub steps: usize,
    pub k_max: usize,
    pub cells: BTreeMap<(usize, usize), CurveCell>,
}

impl ErrorCurve {
    pub fn mean(&self, s: usize, k: usize) -> Option<f32> {
        self.cells.get(&(s, k)).map(|c| c.mean)
    }

    /// Every (s, k) with k <= k_max and k <= s < steps must be present.
    pub fn validate_complete(&self) -> Result<(), CalibrationError> {
        for k in 1..=self.k_max {
            for s in k..self.steps {
                if !self.cells.contains_key(&(s, k)) {
                    return Err(CalibrationError::MissingCell {
                        kind: self.kind,
                        s,
                        k,
                    });
                }
            }
        }
        Ok(())
    }
}

pub type CurveSet = BTreeMap<LayerKind, ErrorCurve>;

pub struct CalibrationResult {
    pub records: Vec<ErrorRecord>,
    pub curves: CurveSet,
    /// Zero-norm reference outputs excluded from aggregation.
    pub degenerate_count: usize,
}

/// Always-compute policy that measures ring-buffer errors online.
struct MeasuringPolicy {
    sample: usize,
    k_max: usize,
    buffers: BTreeMap<LayerKey, Vec<(usize, Tensor)>>,
    records: Vec<ErrorRecord>,
    degenerate: usize,
}

impl MeasuringPolicy {
    fn new(sample: usize, k_max: usize) -> Self {
        Self {
            sample,
            k_max,
            buffers: BTreeMap::new(),
            records: Vec::new(),
            degenerate: 0,
        }
    }
}

impl BranchPolicy for MeasuringPolicy {
    fn action(&mut self, _key: LayerKey, _step: usize) -> Result<BranchAction, ModelError> {
        Ok(BranchAction::Compute)
    }

    fn observe(&mut self, out: &BranchOutput) {
        let buf = self.buffers.entry(out.key).or_default();
        for k in 1..=self.k_max {
            if out.step < k {
                continue;
            }
            let source = out.step - k;
            if let Some((_, stale)) = buf.iter().find(|(s, _)| *s == source) {
                match rel_l1_error(&out.value, stale) {
                    Ok(err) => self.records.push(ErrorRecord {
                        sample: self.sample,
                        kind: out.key.kind,
                        block: out.key.block,
                        step: out.step,
                        k,
                        err,
                    }),
                    Err(NumericsError::DegenerateReference) => self.degenerate += 1,
                    Err(_) => unreachable!("ring buffer shapes are uniform"),
                }
            }
        }
        buf.push((out.step, out.value.clone()));
        if buf.len() > self.k_max {
            buf.remove(0);
        }
    }
}

fn sample_seed(base: u64, sample: usize) -> u64 {
    SeededRng::new(base).derive(sample as u64).next_u64()
}

/// Per-sample seeded random context used when calibrating conditionally
/// (and by conditional generation runs).
pub fn sample_context(model: &Model, base_seed: u64, sample: usize) -> Option<Tensor> {
    let cfg = model.config();
    if !cfg.has_cross_attention() {
        return None;
    }
    let seed = sample_seed(base_seed, sample) ^ 0x5EED_C0DE_u64;
    Some(SeededRng::new(seed).normal_tensor(vec![cfg.context_tokens, cfg.model_dim]))
}

/// Run `n_samples` fully uncached passes and aggregate per-kind error curves.
pub fn calibrate(
    model: &Model,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    calib: &CalibrationConfig,
) -> Result<CalibrationResult, CalibrationError> {
    calib.validate()?;
    let mut records = Vec::new();
    let mut degenerate = 0usize;
    for sample in 0..calib.n_samples {
        let mut policy = MeasuringPolicy::new(sample, calib.k_max);
        let mut run_sampler = sampler.clone();
        run_sampler.seed = sample_seed(calib.seed, sample);
        let context = if calib.conditional {
            sample_context(model, calib.seed, sample)
        } else {
            None
        };
        ddim_sample(model, &run_sampler, schedule, &mut policy, context.as_ref())?;
        records.extend(policy.records);
        degenerate += policy.degenerate;
    }
    // deterministic merge order regardless of how samples were executed
    records.sort_by_key(|r| (r.sample, r.step, r.kind, r.block, r.k));
    let curves = aggregate(&records, sampler.steps, calib.k_max);
    Ok(CalibrationResult {
        records,
        curves,
        degenerate_count: degenerate,
    })
}

/// Pool records over samples and block indices into per-kind curves.
/// Sample standard deviation (Bessel), ci95 = 1.96 * std / sqrt(n).
pub fn aggregate(records: &[ErrorRecord], steps: usize, k_max: usize) -> CurveSet {
    let mut pools: BTreeMap<(LayerKind, usize, usize), Vec<f32>> = BTreeMap::new();
    for r in records {
        pools.entry((r.kind, r.step, r.k)).or_default().push(r.err);
    }
    let mut curves: CurveSet = BTreeMap::new();
    for ((kind, s, k), errs) in pools {
        let n = errs.len();
        let mean = errs.iter().sum::<f32>() / n as f32;
        let std = if n > 1 {
            let var =
                errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f32>() / (n as f32 - 1.0);
            var.sqrt()
        } else {
            0.0
        };
        let ci95 = 1.96 * std / (n as f32).sqrt();
        curves
            .entry(kind)
            .or_insert_with(|| ErrorCurve {
                kind,
                steps,
                k_max,
                cells: BTreeMap::new(),
            })
            .cells
            .insert((s, k), CurveCell { mean, std, ci95, n });
    }
    curves
}

// --- serialization -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CurvesFile {
    version: u32,
    kinds: BTreeMap<String, KindFile>,
}

#[derive(Serialize, Deserialize)]
struct KindFile {
    k_max: usize,
    steps: usize,
    cells: Vec<CellFile>,
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    s: usize,
    k: usize,
    mean: f32,
    std: f32,
    ci95: f32,
    n: usize,
}

pub fn curves_to_json(curves: &CurveSet) -> String {
    let kinds = curves
        .iter()
        .map(|(kind, curve)| {
            let cells = curve
                .cells
                .iter()
                .map(|(&(s, k), c)| CellFile {
                    s,
                    k,
                    mean: c.mean,
                    std: c.std,
                    ci95: c.ci95,
                    n: c.n,
                })
                .collect();
            (
                kind.as_str().to_string(),
                KindFile {
                    k_max: curve.k_max,
                    steps: curve.steps,
                    cells,
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&CurvesFile {
        version: CURVES_VERSION,
        kinds,
    })
    .expect("curves serialize")
}

pub fn curves_from_json(text: &str) -> Result<CurveSet, CalibrationError> {
    let file: CurvesFile =
        serde_json::from_str(text).map_err(|e| CalibrationError::Parse(e.to_string()))?;
    if file.version != CURVES_VERSION {
        return Err(CalibrationError::Version(file.version));
    }
    let mut curves = CurveSet::new();
    for (name, kf) in file.kinds {
        let kind = LayerKind::from_str_name(&name)
            .ok_or_else(|| CalibrationError::Parse(format!("unknown layer kind {name:?}")))?;
        let mut cells = BTreeMap::new();
        for c in kf.cells {
            cells.insert(
                (c.s, c.k),
                CurveCell {
                    mean: c.mean,
                    std: c.std,
                    ci95: c.ci95,
                    n: c.n,
                },
            );
        }
        let curve = ErrorCurve {
            kind,
            steps: kf.steps,
            k_max: kf.k_max,
            cells,
        };
        curve.validate_complete()?;
        curves.insert(kind, curve);
    }
    Ok(curves)
}

pub fn save_curves(curves: &CurveSet, path: &Path) -> Result<(), CalibrationError> {
    std::fs::write(path, curves_to_json(curves))?;
    Ok(())
}

pub fn load_curves(path: &Path) -> Result<CurveSet, CalibrationError> {
    curves_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_records(records: &[ErrorRecord], path: &Path) -> Result<(), CalibrationError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CalibrationError::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<ErrorRecord>, CalibrationError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ErrorRecord = serde_json::from_str(&line)
            .map_err(|e| CalibrationError::Parse(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// CSV export for one kind: columns step,k,mean,lo,hi (lo/hi = mean -/+ ci95).
pub fn curve_to_csv(curve: &ErrorCurve) -> String {
    let mut out = String::from("step,k,mean,lo,hi\n");
    for (&(s, k), c) in &curve.cells {
        out.push_str(&format!(
            "{s},{k},{},{},{}\n",
            c.mean,
            c.mean - c.ci95,
            c.mean + c.ci95
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::model::{build_model, ModelConfig};

    fn fixture_records() -> Vec<ErrorRecord> {
        // two samples with per-(s,k) errors {0.1, 0.3}
        vec![
            ErrorRecord {
                sample: 0,
                kind: LayerKind::FeedForward,
                block: 0,
                step: 1,
                k: 1,
                err: 0.1,
            },
            ErrorRecord {
                sample: 1,
                kind: LayerKind::FeedForward,
                block: 0,
                step: 1,
                k: 1,
                err: 0.3,
            },
        ]
    }

    #[test]
    fn aggregate_hand_statistics() {
        let curves = aggregate(&fixture_records(), 2, 1);
        let cell = curves[&LayerKind::FeedForward].cells[&(1, 1)];
        assert!((cell.mean - 0.2).abs() < 1e-6);
        assert!((cell.std - 0.141_421_36).abs() < 1e-6);
        assert!((cell.ci95 - 0.196).abs() < 1e-4);
        assert_eq!(cell.n, 2);
    }

    #[test]
    fn single_sample_std_is_zero() {
        let mut recs = fixture_records();
        recs.truncate(1);
        let curves = aggregate(&recs, 2, 1);
        let cell = curves[&LayerKind::FeedForward].cells[&(1, 1)];
        assert_eq!(cell.std, 0.0);
        assert_eq!(cell.ci95, 0.0);
        assert_eq!(cell.n, 1);
    }

    #[test]
    fn aggregate_order_invariant() {
        let recs = fixture_records();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(aggregate(&recs, 2, 1), aggregate(&rev, 2, 1));
    }

    fn tiny() -> (crate::model::Model, SamplerConfig, NoiseSchedule) {
        let m = build_model(ModelConfig {
            blocks: 2,
            model_dim: 8,
            heads: 2,
            tokens: 3,
            context_tokens: 2,
            ffn_mult: 2,
            seed: 3,
        })
        .unwrap();
        let ns = make_schedule(64, 1e-4, 0.02).unwrap();
        let sc = SamplerConfig {
            steps: 8,
            cfg_scale: 0.0,
            seed: 0,
        };
        (m, sc, ns)
    }

    #[test]
    fn calibrate_cell_counts() {
        let (m, sc, ns) = tiny();
        let calib = CalibrationConfig {
            n_samples: 2,
            k_max: 3,
            conditional: false,
            seed: 17,
        };
        let out = calibrate(&m, &sc, &ns, &calib).unwrap();
        assert_eq!(out.degenerate_count, 0);
        // per kind: sum over k of (S - k) cells
        let expect: usize = (1..=3).map(|k| sc.steps - k).sum();
        for curve in out.curves.values() {
            assert_eq!(curve.cells.len(), expect);
            curve.validate_complete().unwrap();
            // pooled over 2 samples x 2 blocks
            assert!(curve.cells.values().all(|c| c.n == 4));
        }
        // per-sample records: kinds x blocks x cells
        assert_eq!(out.records.len(), 2 * 3 * 2 * expect);
    }

    #[test]
    fn calibrate_deterministic() {
        let (m, sc, ns) = tiny();
        let calib = CalibrationConfig {
            n_samples: 2,
            k_max: 2,
            conditional: true,
            seed: 5,
        };
        let a = calibrate(&m, &sc, &ns, &calib).unwrap();
        let b = calibrate(&m, &sc, &ns, &calib).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.curves, b.curves);
    }

    #[test]
    fn zero_samples_rejected() {
        let calib = CalibrationConfig {
            n_samples: 0,
            ..Default::default()
        };
        assert!(calib.validate().is_err());
    }

    #[test]
    fn curves_round_trip_and_version_check() {
        let (m, sc, ns) = tiny();
        let calib = CalibrationConfig {
            n_samples: 2,
            k_max: 2,
            conditional: false,
            seed: 1,
        };
        let out = calibrate(&m, &sc, &ns, &calib).unwrap();
        let json = curves_to_json(&out.curves);
        let back = curves_from_json(&json).unwrap();
        assert_eq!(out.curves, back);

        let bumped = json.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            curves_from_json(&bumped),
            Err(CalibrationError::Version(9))
        ));
    }

    #[test]
    fn missing_cell_named_in_error() {
        let (m, sc, ns) = tiny();
        let calib = CalibrationConfig {
            n_samples: 1,
            k_max: 1,
            conditional: false,
            seed: 1,
        };
        let mut out = calibrate(&m, &sc, &ns, &calib).unwrap();
        let curve = out.curves.get_mut(&LayerKind::FeedForward).unwrap();
        curve.cells.remove(&(3, 1));
        let json = curves_to_json(&out.curves);
        match curves_from_json(&json) {
            Err(CalibrationError::MissingCell { kind, s, k }) => {
                assert_eq!(kind, LayerKind::FeedForward);
                assert_eq!((s, k), (3, 1));
            }
            other => panic!("expected MissingCell, got {other:?}"),
        }
    }

    #[test]
    fn records_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let recs = fixture_records();
        save_records(&recs, &path).unwrap();
        assert_eq!(load_records(&path).unwrap(), recs);
        // wire format spot check
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "ffn");
        assert_eq!(first["step"], 1);
    }

    #[test]
    fn csv_export_shape() {
        let curves = aggregate(&fixture_records(), 2, 1);
        let csv = curve_to_csv(&curves[&LayerKind::FeedForward]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,k,mean,lo,hi");
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,1,0.2"));
    }
}
