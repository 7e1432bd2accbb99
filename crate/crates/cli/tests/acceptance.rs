//! End-to-end acceptance suite. Each test covers one numbered criterion and
//! prints a single pass/fail line (visible under `--nocapture`).

use std::collections::HashMap;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use smoothcache::calibration::{aggregate, calibrate, CalibrationConfig, CurveSet, ErrorRecord};
use smoothcache::diffusion::{ddim_sample, make_schedule, NoiseSchedule, SamplerConfig};
use smoothcache::model::{
    build_model, AlwaysCompute, BranchAction, BranchOutput, BranchPolicy, LayerKey, LayerKind,
    Model, ModelConfig, ModelError,
};
use smoothcache::numerics::{load_sctd, rel_l1_error, save_sctd, SeededRng, Tensor};
use smoothcache::runtime::run_cached;
use smoothcache::scheduler::{
    predict_macs, synthesize_greedy, synthesize_uniform, validate, Decision, Schedule,
    SCHEDULE_VERSION,
};
use smoothcache_cli::commands::{cmd_sweep, curve_mean_percentile, fora_eligible_fraction, SweepRow};
use smoothcache_cli::config::ExperimentConfig;

/// Serializes the criteria so the wall-clock budgets are measured without
/// other tests competing for the CPU.
static GATE: Mutex<()> = Mutex::new(());

fn criterion(n: usize, name: &str, body: impl FnOnce()) {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let result = catch_unwind(AssertUnwindSafe(body));
    match &result {
        Ok(()) => println!("criterion {n} ({name}): pass"),
        Err(_) => println!("criterion {n} ({name}): FAIL"),
    }
    if let Err(e) = result {
        resume_unwind(e);
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        model_dim: 32,
        heads: 4,
        tokens: 8,
        context_tokens: 4,
        ffn_mult: 2,
        seed: 1,
    }
}

fn small_setup(steps: usize) -> (Model, SamplerConfig, NoiseSchedule) {
    let model = build_model(small_config()).expect("model");
    let sampler = SamplerConfig {
        steps,
        ..SamplerConfig::default()
    };
    let noise = make_schedule(1000, 1e-4, 0.02).expect("noise schedule");
    (model, sampler, noise)
}

fn flat_curves(kinds: &[LayerKind], steps: usize, k_max: usize, mean: f32) -> CurveSet {
    let mut curves = CurveSet::new();
    for &kind in kinds {
        let mut curve = smoothcache::calibration::ErrorCurve {
            kind,
            steps,
            k_max,
            cells: Default::default(),
        };
        for s in 1..steps {
            for k in 1..=k_max.min(s) {
                curve.cells.insert(
                    (s, k),
                    smoothcache::calibration::CurveCell {
                        mean,
                        std: 0.0,
                        ci95: 0.0,
                        n: 1,
                    },
                );
            }
        }
        curves.insert(kind, curve);
    }
    curves
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Captures every computed branch output, keyed by (step, sublayer).
#[derive(Default)]
struct Recorder {
    outputs: HashMap<(usize, LayerKey), Tensor>,
}

impl BranchPolicy for Recorder {
    fn action(&mut self, _key: LayerKey, _step: usize) -> Result<BranchAction, ModelError> {
        Ok(BranchAction::Compute)
    }

    fn observe(&mut self, out: &BranchOutput) {
        self.outputs.insert((out.step, out.key), out.value.clone());
    }
}

/// Computes everywhere except a fixed set of hand-injected outputs.
struct Injector {
    injections: HashMap<(usize, LayerKey), Tensor>,
}

impl BranchPolicy for Injector {
    fn action(&mut self, key: LayerKey, step: usize) -> Result<BranchAction, ModelError> {
        match self.injections.get(&(step, key)) {
            Some(t) => Ok(BranchAction::Inject(t.clone())),
            None => Ok(BranchAction::Compute),
        }
    }
}

#[test]
fn criterion_1_no_cache_identity() {
    criterion(1, "no-cache identity", || {
        let start = Instant::now();
        let cfg = ExperimentConfig::default();
        let model = build_model(cfg.model.clone()).expect("model");
        let noise = make_schedule(1000, 1e-4, 0.02).expect("noise");
        let curves = flat_curves(
            &LayerKind::ALL,
            cfg.sampler.steps,
            cfg.calib.k_max,
            0.5,
        );
        // alpha far below every cell: schedule degenerates to all-Compute
        let schedule =
            synthesize_greedy(&curves, 1e-9, cfg.calib.k_max, cfg.sampler.steps).expect("schedule");
        assert!(!schedule.has_reuse());
        let prediction = predict_macs(&schedule, &cfg.model, &cfg.sampler).expect("macs");
        assert_eq!(prediction.total, prediction.baseline);
        assert_eq!(prediction.ratio, 1.0);
        for seed in 0..5u64 {
            let sampler = SamplerConfig {
                seed,
                ..cfg.sampler.clone()
            };
            let plain = ddim_sample(&model, &sampler, &noise, &mut AlwaysCompute, None)
                .expect("uncached run");
            let cached = run_cached(&model, &sampler, &noise, &schedule, None).expect("cached run");
            assert_eq!(bits(&plain.x0), bits(&cached.x0), "seed {seed} not bitwise equal");
            assert_eq!(cached.trace.macs, plain.macs);
        }
        assert!(
            start.elapsed() < Duration::from_secs(10),
            "took {:?}",
            start.elapsed()
        );
    });
}

/// Brute-force greedy reference used only by this suite.
fn greedy_oracle(curves: &CurveSet, alpha: f32, k_max: usize, steps: usize) -> Schedule {
    let mut decisions = std::collections::BTreeMap::new();
    for (&kind, curve) in curves {
        let mut dec = vec![Decision::Compute];
        let mut anchor = 0usize;
        for s in 1..steps {
            let k = s - anchor;
            let reuse = k <= k_max && curve.cells[&(s, k)].mean < alpha;
            if reuse {
                dec.push(Decision::Reuse { source: anchor });
            } else {
                dec.push(Decision::Compute);
                anchor = s;
            }
        }
        decisions.insert(kind, dec);
    }
    Schedule {
        version: SCHEDULE_VERSION,
        steps,
        alpha: Some(alpha),
        k_max,
        decisions,
    }
}

#[test]
fn criterion_2_greedy_oracle_equivalence() {
    criterion(2, "greedy oracle equivalence", || {
        let mut rng = SeededRng::new(0xACCE97);
        for case in 0..100 {
            let steps = 2 + (rng.next_u64() % 63) as usize; // <= 64
            let k_max = 1 + (rng.next_u64() % 5) as usize; // <= 5
            let alpha = 0.05 + 0.9 * rng.uniform();
            let kinds = LayerKind::ALL;
            let mut curves = flat_curves(&kinds, steps, k_max, 0.0);
            for curve in curves.values_mut() {
                for cell in curve.cells.values_mut() {
                    cell.mean = rng.uniform();
                }
            }
            let got = synthesize_greedy(&curves, alpha, k_max, steps).expect("synthesize");
            let want = greedy_oracle(&curves, alpha, k_max, steps);
            assert_eq!(got, want, "case {case} diverged");
            assert!(validate(&got).is_empty());
        }
    });
}

#[test]
fn criterion_3_flat_curve_periodicity() {
    criterion(3, "flat-curve periodicity", || {
        let kinds = LayerKind::ALL;
        for k_max in [1usize, 2, 3, 5] {
            let steps = 50;
            let curves = flat_curves(&kinds, steps, k_max, 0.5);
            let schedule = synthesize_greedy(&curves, 0.6, k_max, steps).expect("synthesize");
            for &kind in &kinds {
                let dec = &schedule.decisions[&kind];
                for (s, d) in dec.iter().enumerate() {
                    let period = k_max + 1;
                    let want = if s % period == 0 {
                        Decision::Compute
                    } else {
                        Decision::Reuse {
                            source: (s / period) * period,
                        }
                    };
                    assert_eq!(*d, want, "k_max {k_max} kind {kind} step {s}");
                }
            }
        }
    });
}

fn random_valid_schedule(rng: &mut SeededRng, kinds: &[LayerKind], steps: usize, k_max: usize) -> Schedule {
    let mut decisions = std::collections::BTreeMap::new();
    for &kind in kinds {
        let mut dec = vec![Decision::Compute];
        let mut anchor = 0usize;
        for s in 1..steps {
            if s - anchor <= k_max && rng.uniform() < 0.5 {
                dec.push(Decision::Reuse { source: anchor });
            } else {
                dec.push(Decision::Compute);
                anchor = s;
            }
        }
        decisions.insert(kind, dec);
    }
    Schedule {
        version: SCHEDULE_VERSION,
        steps,
        alpha: None,
        k_max,
        decisions,
    }
}

#[test]
fn criterion_4_schedule_trace_mac_conformance() {
    criterion(4, "schedule/trace/MAC conformance", || {
        let steps = 6;
        let (model, sampler, noise) = small_setup(steps);
        let kinds = model.config().kinds();
        let mut rng = SeededRng::new(0xF0225);
        for case in 0..50 {
            let schedule = random_valid_schedule(&mut rng, &kinds, steps, 3);
            assert!(validate(&schedule).is_empty(), "case {case} invalid");
            let run = run_cached(&model, &sampler, &noise, &schedule, None).expect("run");
            // trace equals the schedule entry-for-entry
            for entry in &run.trace.entries {
                let want = &schedule.decisions[&entry.key.kind][entry.step];
                let got = match entry.action {
                    smoothcache::runtime::TraceAction::Computed => Decision::Compute,
                    smoothcache::runtime::TraceAction::Reused { source } => {
                        Decision::Reuse { source }
                    }
                };
                assert_eq!(got, *want, "case {case} step {} {:?}", entry.step, entry.key);
            }
            let keys = model.layer_keys().len();
            assert_eq!(run.trace.entries.len(), steps * keys);
            let prediction = predict_macs(&schedule, model.config(), &sampler).expect("macs");
            assert_eq!(run.trace.macs, prediction.total, "case {case} MAC tally");
        }
    });
}

#[test]
fn criterion_5_substitution_oracle_fidelity() {
    criterion(5, "substitution-oracle fidelity", || {
        let steps = 6;
        let (model, sampler, noise) = small_setup(steps);
        let kinds = model.config().kinds();

        // single Reuse: ffn at step 3 reuses step 2
        let mut decisions = std::collections::BTreeMap::new();
        for &kind in &kinds {
            let mut dec = vec![Decision::Compute; steps];
            if kind == LayerKind::FeedForward {
                dec[3] = Decision::Reuse { source: 2 };
            }
            decisions.insert(kind, dec);
        }
        let schedule = Schedule {
            version: SCHEDULE_VERSION,
            steps,
            alpha: None,
            k_max: 3,
            decisions,
        };
        assert!(validate(&schedule).is_empty());

        // hand oracle: record a fully uncached pass, then inject the step-2
        // ffn outputs at step 3 by hand
        let mut recorder = Recorder::default();
        ddim_sample(&model, &sampler, &noise, &mut recorder, None).expect("recording run");
        let mut injections = HashMap::new();
        for key in model.layer_keys() {
            if key.kind == LayerKind::FeedForward {
                let h = recorder.outputs[&(2, key)].clone();
                injections.insert((3usize, key), h);
            }
        }
        let mut oracle = Injector { injections };
        let by_hand = ddim_sample(&model, &sampler, &noise, &mut oracle, None).expect("oracle run");

        let cached = run_cached(&model, &sampler, &noise, &schedule, None).expect("cached run");
        assert_eq!(bits(&by_hand.x0), bits(&cached.x0), "not bitwise equal");
    });
}

#[test]
fn criterion_6_calibration_oracle() {
    criterion(6, "calibration oracle", || {
        let steps = 10;
        let (model, sampler, noise) = small_setup(steps);
        let calib = CalibrationConfig {
            n_samples: 3,
            k_max: 2,
            conditional: false,
            seed: 0,
        };
        let online = calibrate(&model, &sampler, &noise, &calib).expect("calibrate");
        assert_eq!(online.degenerate_count, 0);

        // offline recomputation: dump every branch output to disk, reload,
        // and rebuild the curves from the files alone
        let dir = tempfile::tempdir().expect("tempdir");
        for sample in 0..calib.n_samples {
            let mut recorder = Recorder::default();
            let run_sampler = SamplerConfig {
                seed: SeededRng::new(calib.seed).derive(sample as u64).next_u64(),
                ..sampler.clone()
            };
            ddim_sample(&model, &run_sampler, &noise, &mut recorder, None).expect("run");
            for ((step, key), h) in &recorder.outputs {
                let path = dir
                    .path()
                    .join(format!("s{sample}_t{step}_{}_{}.sctd", key.kind, key.block));
                save_sctd(&path, h).expect("dump");
            }
        }
        let mut records = Vec::new();
        for sample in 0..calib.n_samples {
            for key in model.layer_keys() {
                let load = |step: usize| {
                    load_sctd(&dir.path().join(format!(
                        "s{sample}_t{step}_{}_{}.sctd",
                        key.kind, key.block
                    )))
                    .expect("reload")
                };
                for step in 1..steps {
                    for k in 1..=calib.k_max.min(step) {
                        let err = rel_l1_error(&load(step), &load(step - k)).expect("rel l1");
                        records.push(ErrorRecord {
                            sample,
                            kind: key.kind,
                            block: key.block,
                            step,
                            k,
                            err,
                        });
                    }
                }
            }
        }
        let offline = aggregate(&records, steps, calib.k_max);
        for (kind, want) in &online.curves {
            let got = &offline[kind];
            assert_eq!(got.cells.len(), want.cells.len());
            for (cell_key, w) in &want.cells {
                let g = &got.cells[cell_key];
                assert!(
                    (g.mean - w.mean).abs() <= 1e-6 * w.mean.abs().max(1.0),
                    "{kind} {cell_key:?}: offline mean {} vs online {}",
                    g.mean,
                    w.mean
                );
                assert!((g.std - w.std).abs() <= 1e-6 * w.std.abs().max(1.0));
                assert_eq!(g.n, w.n);
            }
        }

        // CI formula on the 2-sample fixture
        let fixture = vec![
            ErrorRecord {
                sample: 0,
                kind: LayerKind::SelfAttention,
                block: 0,
                step: 5,
                k: 1,
                err: 0.1,
            },
            ErrorRecord {
                sample: 1,
                kind: LayerKind::SelfAttention,
                block: 0,
                step: 5,
                k: 1,
                err: 0.3,
            },
        ];
        let curves = aggregate(&fixture, steps, 2);
        let cell = &curves[&LayerKind::SelfAttention].cells[&(5, 1)];
        assert!((cell.mean - 0.2).abs() < 1e-6);
        assert!((cell.std - 0.141_42).abs() < 1e-4);
        assert!((cell.ci95 - 0.196).abs() < 1e-3);
        assert_eq!(cell.n, 2);
    });
}

struct SweepData {
    rows: Vec<SweepRow>,
    alpha_labels: Vec<String>,
    csv: String,
    md: String,
    elapsed: Duration,
}

fn sweep_data() -> &'static SweepData {
    static DATA: OnceLock<SweepData> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = ExperimentConfig::default();
        cfg.output_dir = dir.path().to_path_buf();

        // thresholds pinned to the curve-mean distribution of this seed
        let model = build_model(cfg.model.clone()).expect("model");
        let noise = make_schedule(
            cfg.diffusion.t_total,
            cfg.diffusion.beta_start,
            cfg.diffusion.beta_end,
        )
        .expect("noise");
        let calib = calibrate(&model, &cfg.sampler, &noise, &cfg.calib).expect("calibrate");
        cfg.alphas = vec![
            curve_mean_percentile(&calib.curves, 30.0),
            curve_mean_percentile(&calib.curves, 60.0),
            curve_mean_percentile(&calib.curves, 90.0),
        ];
        cfg.baselines = vec![2];

        let start = Instant::now();
        let summary = cmd_sweep(&cfg, 0).expect("sweep");
        let elapsed = start.elapsed();
        SweepData {
            rows: summary.rows,
            alpha_labels: cfg.alphas.iter().map(|a| format!("alpha={a}")).collect(),
            csv: std::fs::read_to_string(&summary.csv_path).expect("sweep.csv"),
            md: std::fs::read_to_string(&summary.md_path).expect("sweep.md"),
            elapsed,
        }
    })
}

#[test]
#[ignore = "rewrites the committed golden sweep table for the pinned seed"]
fn regenerate_golden_sweep() {
    let data = sweep_data();
    std::fs::write(
        concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/sweep.csv"),
        &data.csv,
    )
    .expect("write golden");
}

#[test]
fn criterion_7_paper_shape_mac_cross_check() {
    criterion(7, "paper-shape MAC cross-check", || {
        let f = fora_eligible_fraction();
        let f3 = (f * 1000.0).round() / 1000.0;
        assert!(
            (0.90..=1.0).contains(&f3),
            "implied eligible fraction {f3} outside [0.90, 1.0]"
        );
        // documented in the sweep report
        let md = &sweep_data().md;
        assert!(md.contains("eligible-compute fraction"), "sweep.md lacks the cross-check");
        assert!(md.contains(&format!("{f3:.3}")));
    });
}

#[test]
fn criterion_8_end_to_end_toy_sweep() {
    criterion(8, "end-to-end toy sweep", || {
        let data = sweep_data();
        assert!(
            data.elapsed < Duration::from_secs(60),
            "sweep took {:?}",
            data.elapsed
        );
        // MAC ratio strictly decreasing over the three alpha rows in
        // threshold order (the rows themselves are sorted by ratio)
        let ratio_of = |label: &str| {
            data.rows
                .iter()
                .find(|r| r.label == label)
                .unwrap_or_else(|| panic!("missing row {label}"))
                .mac_ratio
        };
        let ratios: Vec<f64> = data.alpha_labels.iter().map(|l| ratio_of(l)).collect();
        assert!(
            ratios[0] > ratios[1] && ratios[1] > ratios[2],
            "ratios not strictly decreasing: {ratios:?}"
        );
        // rel_l1 is zero exactly when nothing was reused
        for row in &data.rows {
            if row.mac_ratio == 1.0 {
                assert_eq!(row.rel_l1, 0.0, "{}", row.label);
            } else {
                assert!(row.rel_l1 > 0.0, "{}", row.label);
            }
        }
        // golden run for the pinned default seed must match byte-exactly
        let golden = include_str!("golden/sweep.csv");
        assert_eq!(data.csv, golden, "sweep.csv diverged from golden");
    });
}

#[test]
fn criterion_9_uniform_baseline_parity() {
    criterion(9, "uniform baseline parity", || {
        let schedule = synthesize_uniform(2, 50).expect("uniform");
        for kind in LayerKind::ALL {
            assert_eq!(schedule.computed_steps(kind), 25, "{kind}");
        }
        let data = sweep_data();
        let uniform = data
            .rows
            .iter()
            .find(|r| r.label == "uniform_n=2")
            .expect("uniform row")
            .mac_ratio;
        let alpha_ratios: Vec<f64> = data
            .rows
            .iter()
            .filter(|r| r.label.starts_with("alpha="))
            .map(|r| r.mac_ratio)
            .collect();
        let lo = alpha_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = alpha_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            lo < uniform && uniform < hi,
            "uniform ratio {uniform} not strictly inside ({lo}, {hi})"
        );
    });
}
