use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tumorseg::ensemble::{argmax_labels, average_probability_files};
use tumorseg::inference::predict_volume;
use tumorseg::phantom::{generate_phantoms, PhantomSpec};
use tumorseg::pipeline::{self, dice_table, parse_stages, EvaluationSummary, PipelineConfig};
use tumorseg::unet::Checkpoint;
use tumorseg::volume::{save_label_map, save_probability_map};

#[derive(Parser)]
#[command(name = "tumorseg", version, about = "Ensemble 3D U-Net tumor segmentation and survival regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Only process this model index.
    #[arg(short, long)]
    model: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Bias-correction hook, min-max normalization and channel fusion.
    Preprocess(ConfigArg),
    /// Estimate per-channel input statistics from sampled patches.
    SampleStats(ModelArgs),
    /// Train the configured networks.
    Train(ModelArgs),
    /// Sliding-window prediction for the pipeline, or for one subject with
    /// `--model <checkpoint> --subject <dir or fused file> --out <prob.nii.gz>`.
    Predict {
        #[arg(short, long, required_unless_present = "model")]
        config: Option<PathBuf>,
        /// Only run this model index of the configuration.
        #[arg(long, conflicts_with = "model")]
        only: Option<usize>,
        #[arg(short, long, requires_all = ["subject", "out"])]
        model: Option<PathBuf>,
        #[arg(long)]
        subject: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Disable left-right flip averaging.
        #[arg(long)]
        no_tta: bool,
    },
    /// Average model probabilities and take the argmax, for the pipeline or
    /// for `--inputs a.nii.gz b.nii.gz ... --out seg.nii.gz`.
    Ensemble {
        #[arg(short, long, required_unless_present = "inputs")]
        config: Option<PathBuf>,
        #[arg(long, num_args = 1.., requires = "out")]
        inputs: Vec<PathBuf>,
        /// Label map with on-disk codes.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also write the averaged probabilities.
        #[arg(long)]
        prob_out: Option<PathBuf>,
    },
    /// Compute per-class volumes and surface areas.
    Features(ConfigArg),
    /// Fit the linear survival model.
    SurvivalFit(ConfigArg),
    /// Predict survival days for the test subjects.
    SurvivalPredict(ConfigArg),
    /// Score segmentations and survival predictions, for the pipeline or
    /// for `--pred-dir <dir> --truth-dir <dir> --out <dir>`.
    Evaluate {
        #[arg(short, long, required_unless_present = "pred_dir")]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["truth_dir", "out"])]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        truth_dir: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Phantoms {
        #[arg(short = 'n', long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run several stages in order.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated stages, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Print the default configuration.
    DefaultConfig {
        #[arg(long, default_value = "data")]
        data_root: PathBuf,
        #[arg(long, default_value = "output")]
        output_root: PathBuf,
    },
}

fn load(c: &ConfigArg) -> tumorseg::Result<PipelineConfig> {
    PipelineConfig::load(&c.config)
}

fn execute(command: Command) -> tumorseg::Result<()> {
    match command {
        Command::Preprocess(c) => pipeline::run_preprocess(&load(&c)?),
        Command::SampleStats(m) => pipeline::run_sample_stats(&load(&m.config)?, m.model),
        Command::Train(m) => pipeline::run_train(&load(&m.config)?, m.model),
        Command::Predict {
            config,
            only,
            model,
            subject,
            out,
            no_tta,
        } => match (model, subject, out) {
            (Some(model), Some(subject), Some(out)) => {
                let ckpt = Checkpoint::load(model)?;
                let volume = pipeline::load_subject_volume(&subject)?;
                let probs = predict_volume(&ckpt.model, &volume, &ckpt.stats, !no_tta)?;
                save_probability_map(&probs, out)
            }
            _ => {
                let mut config = PipelineConfig::load(config.expect("clap requires --config"))?;
                config.flip_tta &= !no_tta;
                pipeline::run_predict(&config, only)
            }
        },
        Command::Ensemble {
            config,
            inputs,
            out,
            prob_out,
        } => match (config, out) {
            (_, Some(out)) if !inputs.is_empty() => {
                let mean = average_probability_files(&inputs)?;
                if let Some(p) = prob_out {
                    save_probability_map(&mean, p)?;
                }
                save_label_map(&argmax_labels(&mean), out)
            }
            (Some(config), _) => pipeline::run_ensemble(&PipelineConfig::load(config)?),
            _ => unreachable!("clap requires --config or --inputs"),
        },
        Command::Features(c) => pipeline::run_features(&load(&c)?),
        Command::SurvivalFit(c) => pipeline::run_survival_fit(&load(&c)?),
        Command::SurvivalPredict(c) => pipeline::run_survival_predict(&load(&c)?),
        Command::Evaluate {
            config,
            pred_dir,
            truth_dir,
            out,
        } => {
            let summary = match (pred_dir, truth_dir, out) {
                (Some(pred), Some(truth), Some(out)) => {
                    let pairs = pipeline::pair_label_files(&pred, &truth)?;
                    let rows = pipeline::score_subjects(&pairs)?;
                    let regions = pipeline::summarize_scores(&rows);
                    pipeline::write_scores(&out, &rows, &regions)?;
                    EvaluationSummary {
                        subjects: pairs.len(),
                        regions,
                        survival: None,
                    }
                }
                _ => pipeline::run_evaluate(&PipelineConfig::load(config.expect("clap requires --config"))?)?,
            };
            print!("{}", dice_table(&summary));
            if let Some(s) = summary.survival {
                println!(
                    "survival: accuracy {:.3}  mse {:.2}  median se {:.2}  std se {:.2}  spearman {:.3}  r2 {:.3}",
                    s.accuracy, s.mse, s.median_se, s.std_se, s.spearman, s.r2
                );
            }
            Ok(())
        }
        Command::Phantoms {
            count,
            seed,
            size,
            noise,
            out,
        } => {
            let spec = PhantomSpec {
                shape: [size; 3],
                noise,
            };
            generate_phantoms(&spec, count, seed, &out).map(|_| ())
        }
        Command::Run { config, stages } => pipeline::run_pipeline(&load(&config)?, &parse_stages(&stages)?),
        Command::DefaultConfig { data_root, output_root } => {
            print!("{}", PipelineConfig::new(data_root, output_root).to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
