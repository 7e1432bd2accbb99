use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smoothcache_cli::config::{ExperimentConfig, Overrides};
use smoothcache_cli::error::CliError;
use smoothcache_cli::{
    cmd_calibrate, cmd_compare, cmd_export_curves, cmd_run, cmd_schedule, cmd_sweep,
    ScheduleSource,
};

#[derive(Parser)]
#[command(name = "smoothcache", about = "Calibration-driven layer caching for a toy DiT sampler")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides config and SMOOTHCACHE_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Sampler step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    cfg_scale: Option<f32>,
    /// Calibration sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Maximum reuse gap.
    #[arg(long)]
    k_max: Option<usize>,
    /// Artifact directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; anything above 1 falls back to single-threaded.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, CliError> {
        if let Some(t) = self.threads {
            if t > 1 {
                eprintln!("note: --threads {t} requested; running single-threaded");
            }
        }
        let mut cfg = ExperimentConfig::load(self.config.as_ref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            samples: self.samples,
            k_max: self.k_max,
            out_dir: self.out_dir.clone(),
        });
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure layer-output error curves over calibration samples.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Curves JSON output path (default <out_dir>/curves.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a caching schedule from saved curves.
    Schedule {
        #[command(flatten)]
        common: Common,
        /// Curves JSON produced by `calibrate`.
        #[arg(long)]
        curves: PathBuf,
        /// Error threshold for greedy synthesis.
        #[arg(long, conflicts_with = "uniform")]
        alpha: Option<f32>,
        /// Uniform baseline interval n (compute every n-th step).
        #[arg(long)]
        uniform: Option<usize>,
        /// Schedule JSON output path (default <out_dir>/schedule.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample with an optional schedule and write report + samples.
    Run {
        #[command(flatten)]
        common: Common,
        /// Schedule JSON; omitted means uncached sampling.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Report JSON output path (default <out_dir>/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Timed repetitions for the latency sidecar (0 disables).
        #[arg(long, default_value_t = 0)]
        bench_runs: usize,
    },
    /// Compare two saved sample tensors.
    Compare {
        baseline: PathBuf,
        cached: PathBuf,
        /// Fidelity JSON output path (stdout only when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate once, then evaluate every configured schedule.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Timed repetitions per schedule (0 disables latency columns).
        #[arg(long, default_value_t = 0)]
        bench_runs: usize,
    },
    /// Re-export saved curves as per-kind CSV files.
    ExportCurves {
        /// Curves JSON produced by `calibrate`.
        #[arg(long)]
        curves: PathBuf,
        /// Destination directory.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Calibrate { common, out } => {
            let cfg = common.config()?;
            let summary = cmd_calibrate(&cfg, out.as_deref())?;
            println!(
                "calibrated {} cells ({} degenerate) -> {}",
                summary.cell_count,
                summary.degenerate_count,
                summary.curves_path.display()
            );
        }
        Cmd::Schedule {
            common,
            curves,
            alpha,
            uniform,
            out,
        } => {
            let cfg = common.config()?;
            let source = match (alpha, uniform) {
                (Some(a), None) => ScheduleSource::Alpha(a),
                (None, Some(n)) => ScheduleSource::Uniform(n),
                _ => {
                    return Err(CliError::Validation(
                        "exactly one of --alpha or --uniform is required".into(),
                    ))
                }
            };
            let summary = cmd_schedule(&cfg, &curves, source, out.as_deref())?;
            for (kind, computed) in &summary.computed_steps {
                println!("{kind}: {computed}/{} computed", cfg.sampler.steps);
            }
            println!(
                "MAC ratio {:.4} -> {}",
                summary.mac_ratio,
                summary.schedule_path.display()
            );
        }
        Cmd::Run {
            common,
            schedule,
            out,
            bench_runs,
        } => {
            let cfg = common.config()?;
            let summary = cmd_run(&cfg, schedule.as_deref(), out.as_deref(), bench_runs)?;
            println!(
                "MACs {} / baseline {} (ratio {:.4})",
                summary.report.macs.total, summary.report.macs.baseline, summary.report.macs.ratio
            );
            if let Some(f) = &summary.report.fidelity {
                println!(
                    "fidelity: rel_l1 {:.6}, psnr {:.2} dB, cosine {:.6}",
                    f.rel_l1, f.psnr, f.cosine
                );
            }
            for p in &summary.sample_paths {
                println!("sample -> {}", p.display());
            }
            println!("report -> {}", summary.report_path.display());
        }
        Cmd::Compare {
            baseline,
            cached,
            out,
        } => {
            let report = cmd_compare(&baseline, &cached, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("json"));
        }
        Cmd::Sweep { common, bench_runs } => {
            let cfg = common.config()?;
            let summary = cmd_sweep(&cfg, bench_runs)?;
            for row in &summary.rows {
                println!(
                    "{}: MAC ratio {:.4}, rel_l1 {:.6}, psnr {:.2} dB",
                    row.label, row.mac_ratio, row.rel_l1, row.psnr
                );
            }
            println!("sweep -> {}", summary.csv_path.display());
        }
        Cmd::ExportCurves { curves, out_dir } => {
            for p in cmd_export_curves(&curves, &out_dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
