use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use smtc::ablate::{run_axis, write_rows, AblateOptions, Axis};
use smtc::checkpoint;
use smtc::config::resolve_config;
use smtc::dataset::{generate_dataset, load_dataset, GenerateOptions, FLOWS_DIR, FRAMES_DIR};
use smtc::evaluate::{evaluate_model, evaluate_predictions, write_report, DEFAULT_THRESHOLD};
use smtc::gradcheck::{format_table, run_suite, Component, SuiteOptions};
use smtc::infer::infer;
use smtc::train::{train_to_dir, TrainOptions, CHECKPOINT_FILE, RUNLOG_FILE};

#[derive(Parser)]
#[command(name = "smtc", version, about = "Two-stream video object segmentation: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON model configuration (every field required).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, default_value = "default")]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic sequences in the dataset layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Train with AdamW; writes checkpoint.smtc and appends to runlog.csv.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-2)]
        weight_decay: f64,
        /// Resume from this checkpoint (its configuration wins).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint (or saved predictions) on a dataset.
    Evaluate {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score `<dir>/<seq>/masks/*.png` instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Also write frames tinted by the predicted mask.
        #[arg(long)]
        overlays: bool,
    },
    /// Write saliency and mask PNGs for one sequence.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory holding frames/ and flows/.
        #[arg(long, required_unless_present_all = ["frames", "flows"])]
        data: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the refinement weight maps.
        #[arg(long)]
        dump_isrm: bool,
    },
    /// Finite-difference check of every component; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Restrict to these components (repeatable).
        #[arg(long = "component")]
        components: Vec<String>,
        /// Negate one component's analytic gradients (harness self-test).
        #[arg(long)]
        inject_sign_flip: Option<String>,
    },
    /// Train and score every variant of an ablation axis.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        /// rank, placement, modules, inputs or all.
        #[arg(long, default_value = "all")]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Zero the absent stream in single-input variants.
        #[arg(long)]
        zero_absent: bool,
    },
}

fn component(name: &str) -> anyhow::Result<Component> {
    Component::from_name(name).with_context(|| {
        let all: Vec<_> = Component::ALL.iter().map(|c| c.name()).collect();
        format!("unknown component {name:?}; expected one of {}", all.join(", "))
    })
}

fn model_config(m: &ModelArgs) -> anyhow::Result<smtc_core::model::ModelConfig> {
    Ok(resolve_config(m.config.as_deref(), &m.preset)?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            sequences,
            frames,
            height,
            width,
        } => {
            let names = generate_dataset(
                &out,
                &GenerateOptions {
                    sequences,
                    height,
                    width,
                    frames,
                    seed,
                },
            )?;
            println!("wrote {} sequences to {}", names.len(), out.display());
        }
        Command::Train {
            model,
            data,
            out,
            steps,
            seed,
            lr,
            batch_size,
            weight_decay,
            checkpoint,
        } => {
            let cfg = model_config(&model)?;
            let opts = TrainOptions {
                steps,
                seed,
                lr,
                batch_size,
                weight_decay,
            };
            let done = train_to_dir(&cfg, &data, &out, &opts, checkpoint.as_deref())?;
            println!(
                "step {}; wrote {} and {}",
                done.step,
                out.join(CHECKPOINT_FILE).display(),
                out.join(RUNLOG_FILE).display()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            predictions,
            threshold,
            overlays,
        } => {
            let sequences = load_dataset(&data)?;
            let report = match (predictions, checkpoint) {
                (Some(p), _) => evaluate_predictions(&p, &sequences, threshold)?,
                (None, Some(c)) => {
                    let ckpt = checkpoint::load::<f32>(&c)?;
                    let overlay_dir = overlays.then(|| out.join("overlays"));
                    let eval = evaluate_model(&ckpt.model, &sequences, threshold, overlay_dir.as_deref())?;
                    write_report(&out, "report_round1", &eval.round1)?;
                    eval.round2
                }
                (None, None) => bail!("--checkpoint or --predictions is required"),
            };
            write_report(&out, "report", &report)?;
            println!(
                "J {:.4}  F {:.4}  J&F {:.4}  MAE {:.4}  maxF {:.4}  E {:.4}  S {:.4}  ({} scored, {} skipped)",
                report.j_mean,
                report.f_mean,
                report.jf_mean,
                report.mae,
                report.f_max,
                report.e_max,
                report.s_measure,
                report.sequences.len(),
                report.skipped.len()
            );
        }
        Command::Infer {
            checkpoint,
            data,
            frames,
            flows,
            out,
            dump_isrm,
        } => {
            let base = data.unwrap_or_default();
            let frames = frames.unwrap_or_else(|| base.join(FRAMES_DIR));
            let flows = flows.unwrap_or_else(|| base.join(FLOWS_DIR));
            let ckpt = checkpoint::load::<f32>(&checkpoint)?;
            let written = infer(&ckpt.model, &frames, &flows, &out, dump_isrm)?;
            println!("wrote {} maps to {}", written.len(), out.display());
        }
        Command::Gradcheck {
            seeds,
            components,
            inject_sign_flip,
        } => {
            let components = if components.is_empty() {
                Component::ALL.to_vec()
            } else {
                components.iter().map(|c| component(c)).collect::<anyhow::Result<_>>()?
            };
            let opts = SuiteOptions {
                seeds,
                components,
                sign_flip: inject_sign_flip.as_deref().map(component).transpose()?,
            };
            let results = run_suite(&opts)?;
            print!("{}", format_table(&results));
            return Ok(results.iter().all(|r| r.passed()));
        }
        Command::Ablate {
            model,
            axis,
            out,
            steps,
            seed,
            sequences,
            frames,
            zero_absent,
        } => {
            let base = match model.config {
                Some(_) => model_config(&model)?,
                None if model.preset == "default" => smtc_core::model::ModelConfig::ablation(),
                None => model_config(&model)?,
            };
            let axes = if axis == "all" {
                Axis::ALL.to_vec()
            } else {
                vec![Axis::from_name(&axis).with_context(|| format!("unknown axis {axis:?}"))?]
            };
            let opts = AblateOptions {
                train: TrainOptions {
                    steps,
                    seed,
                    ..TrainOptions::default()
                },
                sequences,
                frames,
                zero_absent,
            };
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            for a in axes {
                let rows = run_axis(a, &base, &opts)?;
                let path = out.join(format!("ablation_{a}.csv"));
                write_rows(&path, &rows)?;
                for r in &rows {
                    println!(
                        "{:<10} {:<11} collateral {:>7}  total {:>8}  J {:.4}  F {:.4}",
                        r.axis, r.variant, r.collateral_params, r.total_params, r.j_mean, r.f_mean
                    );
                }
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

