use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use xlhbf::channel::generate_dataset;
use xlhbf::harness::{
    analyze_beams, beam_vector, feature_pca, run_experiment, run_point, test_channels, write_results_csv,
    BeamAnalysisSpec, ExperimentSpec, PcaProbe, SweepAxis,
};
use xlhbf::network::{Mode, NetworkDims, NetworkParams};
use xlhbf::training::{fit, network_gradient_check, write_log_csv, StopReason};

#[derive(Parser)]
#[command(name = "xlhbf", version, about = "Learned hybrid beamforming for near/far-field XL-MIMO")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "XLHBF_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the base scenario of an experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the mode in the config.
        #[arg(long)]
        mode: Option<Mode>,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV; `<out>/train_log.csv` by default.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of the base scenario.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every sweep point of an experiment file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Evaluate this checkpoint everywhere instead of training per point.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate a sensing kernel or precoder column with the codebook.
    AnalyzeBeams {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment file supplying geometry and test channels.
        #[arg(long)]
        config: PathBuf,
        /// Beam analysis JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA of shared-MLP features along a range sweep.
    FeaturePca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        r_lo: f64,
        #[arg(long, default_value_t = 40.0)]
        r_hi: f64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full network gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    Version,
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    ExperimentSpec::load(path).with_context(|| format!("config {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    NetworkParams::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn base_dims(spec: &ExperimentSpec) -> NetworkDims {
    spec.dims(&spec.scenario)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, mode, out, log } => {
            let spec = load_spec(&config).context("config")?;
            let mode = mode.unwrap_or(spec.mode);
            let data = generate_dataset(&spec.scenario, spec.dataset_size).context("dataset")?;
            let res = fit(mode, &base_dims(&spec), &data, &spec.train, &spec.protocol).context("train")?;
            std::fs::create_dir_all(&out)?;
            let log = log.unwrap_or_else(|| out.join("train_log.csv"));
            write_log_csv(&log, &res.log).context("write log")?;
            res.params.save(&out).context("save checkpoint")?;
            match &res.stop {
                StopReason::Diverged { epoch, reason } => bail!("train: diverged at epoch {epoch}: {reason}"),
                stop => println!(
                    "trained {} epochs ({stop:?}); best validation sum rate {:.4} at epoch {}",
                    res.log.last().map_or(0, |r| r.epoch),
                    res.best_val_sum_rate,
                    res.best_epoch
                ),
            }
        }
        Command::Eval { checkpoint, config, out } => {
            let spec = load_spec(&config)?;
            let params = load_checkpoint(&checkpoint)?;
            let setup = spec.point(SweepAxis::SnrDb, spec.scenario.snr_db).context("config")?;
            let mut rows = Vec::new();
            for rep in 0..spec.repetitions {
                rows.extend(run_point(&spec, &setup, 0, rep, Some(&params)).context("eval")?.rows);
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_results_csv(&out, &rows).context("write results")?;
            for r in &rows {
                println!(
                    "{:<14} {:>6} sum rate {:.4} ± {:.4}  sum-MSE {:.3} dB  {:.1} µs",
                    r.method.name(),
                    r.status,
                    r.sum_rate.mean,
                    r.sum_rate.se,
                    r.sum_mse_db.mean,
                    r.infer_us.mean
                );
            }
        }
        Command::Sweep { config, checkpoint, out } => {
            let mut spec = load_spec(&config)?;
            if let Some(o) = out {
                spec.output_dir = o;
            }
            let params = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let report = run_experiment(&spec, params.as_ref()).context("sweep")?;
            let failed = report.rows.iter().filter(|r| !r.ok()).count();
            println!("{} rows ({failed} failed) in {}", report.rows.len(), spec.output_dir.display());
        }
        Command::AnalyzeBeams {
            checkpoint,
            config,
            spec: beam_spec,
            out,
        } => {
            let spec = load_spec(&config)?;
            let params = load_checkpoint(&checkpoint)?;
            let text = std::fs::read_to_string(&beam_spec)?;
            let beams: BeamAnalysisSpec = serde_json::from_str(&text).context("config")?;
            let data = generate_dataset(&spec.scenario, spec.dataset_size).context("dataset")?;
            let test = test_channels(&data, spec.eval_samples);
            let v = beam_vector(&beams.target, &params, &test).context("target")?;
            let analysis = analyze_beams(&beams, &spec.scenario.geometry(), &v).context("analysis")?;
            analysis.write_csvs(&out)?;
            let (i, j) = analysis.argmax();
            println!("peak at theta {:.4}, r {:.3} m", analysis.thetas[j], analysis.ranges[i]);
        }
        Command::FeaturePca {
            checkpoint,
            config,
            r_lo,
            r_hi,
            count,
            theta,
            out,
        } => {
            let spec = load_spec(&config)?;
            let params = load_checkpoint(&checkpoint)?;
            let probe = PcaProbe { theta, r_lo, r_hi, count };
            let pca = feature_pca(&params, &spec.scenario.geometry(), &probe).context("pca")?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            pca.write_csv(&out)?;
            let top: Vec<String> = pca.pca.explained.iter().take(3).map(|e| format!("{e:.4}")).collect();
            println!("explained variance {}", top.join(" "));
        }
        Command::Gradcheck { seeds, tol } => {
            let dims = NetworkDims {
                m: 8,
                k: 2,
                n_rf: 2,
                n: 2,
                hidden: vec![16, 8],
            };
            let scenario = xlhbf::channel::ScenarioConfig::new(8, 2, 2, 2, 10.0);
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let r = network_gradient_check(&dims, Mode::Indirect, &scenario, 3, seed).context("gradcheck")?;
                worst = worst.max(r.relative_error);
                println!("seed {seed:>3}: relative error {:.3e} over {} components", r.relative_error, r.components);
            }
            if !(worst < tol) {
                bail!("gradcheck: worst relative error {worst:.3e} exceeds {tol:.1e}");
            }
            println!("worst {worst:.3e} < {tol:.1e}");
        }
        Command::Version => println!("xlhbf {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
