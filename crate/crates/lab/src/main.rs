use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use phirec_core::evaluation::EvalOptions;
use phirec_core::sampling::DEFAULT_SAMPLES;
use phirec_lab::manifest::claim_output;
use phirec_lab::pipeline::{evaluate_paths, propagate_to, sample_to};
use phirec_lab::render::{write_png, Colormap, Scale};
use phirec_lab::report::report;
use phirec_lab::{ExperimentConfig, LabError, Result, Run};

#[derive(Parser)]
#[command(
    name = "phirec-lab",
    version,
    about = "Desk-scale probabilistic MRI reconstruction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing outputs of this stage.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset of an experiment.
    GenData(ConfigArgs),
    /// Train the configured model (or the segmenter) with validation checkpointing.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Train the segmentation network instead of the reconstruction model.
        #[arg(long)]
        segmenter: bool,
    },
    /// Draw reconstruction samples for one zero-filled image container.
    Sample {
        #[arg(long)]
        weights: PathBuf,
        /// Base path of a complex image container (without .bin/.json).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a model on the test split of a dataset.
    Evaluate {
        /// Use the run directory of this configuration for every path.
        #[arg(long, conflicts_with_all = ["weights", "dataset", "seg_weights", "out"])]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["dataset", "seg_weights", "out"])]
        weights: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seg_weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Compute γ-maps from one-hot sample segmentations.
        #[arg(long)]
        hard_gamma: bool,
        /// Test phantoms whose maps are kept for galleries.
        #[arg(long, default_value_t = 2)]
        gallery: usize,
    },
    /// Segment stored sample sets and write γ-maps (PNG renders share one colour scale).
    Propagate {
        /// Sample set directories written by `sample`.
        #[arg(long, num_args = 1.., required = true)]
        samples: Vec<PathBuf>,
        #[arg(long)]
        seg_weights: PathBuf,
        /// Ground-truth label containers, one per sample set.
        #[arg(long, num_args = 1..)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        hard: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render charts and galleries for evaluated runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage of one experiment: data, segmenter, model, evaluation.
    /// Stages whose outputs are current are skipped unless --force.
    Run(ConfigArgs),
}

fn open_run(path: &Path, force: bool) -> Result<Run> {
    let config = ExperimentConfig::load(path)?;
    info!(
        "configuration {} (hash {})",
        path.display(),
        config.content_hash()
    );
    Run::open(&config, force)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let mut run = open_run(&a.config, a.force)?;
            run.gen_data(a.force)?;
        }
        Command::Train { args, segmenter } => {
            let mut run = open_run(&args.config, args.force)?;
            if segmenter {
                let (_, s) = run.train_segmenter(args.force)?;
                info!(
                    "segmenter: best step {} dice {:.4}",
                    s.best_step, s.best_score
                );
            } else {
                let (_, s) = run.train_model(args.force)?;
                info!(
                    "model: best step {} validation ssim {:.4}",
                    s.best_step, s.best_score
                );
            }
        }
        Command::Sample {
            weights,
            input,
            n,
            seed,
            out,
            force,
        } => {
            claim_output(&out, force)?;
            let set = sample_to(&weights, &input, n, seed, &out)?;
            info!(
                "{} samples from {} written to {}",
                set.n(),
                set.source,
                out.display()
            );
        }
        Command::Evaluate {
            config,
            weights,
            dataset,
            seg_weights,
            out,
            n,
            seed,
            hard_gamma,
            gallery,
        } => {
            let eval = match config {
                Some(path) => open_run(&path, false)?.evaluate()?,
                None => {
                    let missing = || {
                        LabError::Config(
                            "evaluate needs --config or --weights/--dataset/--seg-weights/--out"
                                .into(),
                        )
                    };
                    let opts = EvalOptions {
                        n_samples: n,
                        seed,
                        gamma_hard_samples: hard_gamma,
                    };
                    evaluate_paths(
                        &weights.ok_or_else(missing)?,
                        &dataset.ok_or_else(missing)?,
                        &seg_weights.ok_or_else(missing)?,
                        &out.ok_or_else(missing)?,
                        &opts,
                        gallery,
                    )?
                }
            };
            for (accel, a) in &eval.aggregates {
                info!(
                    "{} {accel}x: ssim {:.4} psnr {:.2} ncc_recon {:?} ncc_seg {:?}",
                    eval.model, a.ssim, a.psnr, a.ncc_recon, a.ncc_seg
                );
            }
        }
        Command::Propagate {
            samples,
            seg_weights,
            labels,
            hard,
            out,
            force,
        } => {
            claim_output(&out, force)?;
            let results = propagate_to(&samples, &seg_weights, &labels, hard, &out)?;
            let gammas: Vec<_> = results
                .iter()
                .map(|r| r.segmentation.gamma_map.mapv(|v| v as f32))
                .collect();
            let scale = Scale::shared(&gammas);
            for (i, (g, r)) in gammas.iter().zip(&results).enumerate() {
                let dir = out.join(format!("set_{i:02}"));
                write_png(&dir.join("gamma.png"), g, scale, Colormap::Heat)?;
                if let Some(err) = &r.error_map {
                    let unit = Scale { lo: 0.0, hi: 1.0 };
                    write_png(
                        &dir.join("segmentation_error.png"),
                        &err.mapv(|v| v as f32),
                        unit,
                        Colormap::Gray,
                    )?;
                }
            }
            info!(
                "{} γ-maps written to {} (shared scale 0..{:.4})",
                results.len(),
                out.display(),
                scale.hi
            );
        }
        Command::Report { runs, out } => {
            let index = report(&runs, &out)?;
            info!(
                "{} charts and {} galleries written to {}",
                index.charts.len(),
                index.galleries.len(),
                out.display()
            );
        }
        Command::Run(a) => {
            let mut run = open_run(&a.config, a.force)?;
            let eval = run.complete(a.force)?;
            info!(
                "run complete: {} ({} evaluated)",
                run.dir.display(),
                eval.model
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!(": {s}"));
                source = s.source();
            }
            error!("{msg}");
            ExitCode::FAILURE
        }
    }
}
