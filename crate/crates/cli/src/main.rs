use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mafea_core::scenes::{self, load_sample, SceneSpec};
use mafea_core::train::{
    ablation_csv, evaluate, export_asmap, load_checkpoint, run_ablation_suite, save_checkpoint, train_with,
};
use mafea_core::{Dataset, MafeaError, ModelConfig, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "mafea", version, about = "Few-shot object counting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Minimal,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration template.
    Gencfg {
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        /// Emit a scene specification for `makedata` instead.
        #[arg(long)]
        scene: bool,
    },
    /// Generate a synthetic dataset.
    Makedata {
        /// Scene specification TOML, or `desk` for the built-in defaults.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset and print the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Add target and non-target region reports.
        #[arg(long)]
        regions: bool,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Export alignment-score maps for one sample directory.
    Asmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all ablation variants and write a CSV comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| MafeaError::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::from_toml(&text)
}

fn read_scene_spec(arg: &str) -> Result<SceneSpec> {
    if arg == "desk" {
        return Ok(SceneSpec::desk());
    }
    let text = fs::read_to_string(arg).map_err(|e| MafeaError::Config(format!("{arg}: {e}")))?;
    let spec: SceneSpec = toml::from_str(&text).map_err(|e| MafeaError::Config(format!("{arg}: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn template(profile: Profile) -> String {
    match profile {
        Profile::Desk => TrainConfig::template(),
        Profile::Minimal => TrainConfig {
            model: ModelConfig::minimal(),
            ..TrainConfig::desk()
        }
        .to_toml(),
        Profile::Full => TrainConfig::full().to_toml(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gencfg { profile, scene } => {
            if scene {
                let text = toml::to_string_pretty(&SceneSpec::desk()).expect("scene spec serializes");
                print!("{text}");
            } else {
                print!("{}", template(profile));
            }
        }
        Command::Makedata { spec, out, n, seed } => {
            let spec = read_scene_spec(&spec)?;
            let data = scenes::generate_dataset(&spec, n, seed)?;
            data.save(&out)?;
            eprintln!(
                "wrote {} train and {} eval scenes to {}",
                data.train.len(),
                data.eval.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = read_config(&config)?;
            let data = Dataset::load(&data)?;
            let (model, log) = train_with(&cfg, &data, |r| {
                let eval = r
                    .eval
                    .as_ref()
                    .map(|e| format!(" eval mae {:.4} rmse {:.4}", e.mae, e.rmse))
                    .unwrap_or_default();
                eprintln!(
                    "epoch {:>4} lr {:.3e} loss {:.6} count {:.6} grad {:.4}{eval}",
                    r.epoch, r.lr, r.loss, r.count_loss, r.grad_norm
                );
            })?;
            save_checkpoint(&out, &cfg, &model, &log)?;
        }
        Command::Eval {
            ckpt,
            data,
            regions,
            split,
        } => {
            let (_, model) = load_checkpoint(&ckpt)?;
            let data = Dataset::load(&data)?;
            let samples = match split {
                Split::Train => data.train,
                Split::Eval => data.eval,
                Split::All => data.train.into_iter().chain(data.eval).collect(),
            };
            let report = evaluate(&model, &samples, regions)?;
            println!("{}", report.to_json());
        }
        Command::Asmap { ckpt, sample, out } => {
            let (_, model) = load_checkpoint(&ckpt)?;
            let sample = load_sample(&sample)?;
            let grid = export_asmap(&model, &sample, &out)?;
            eprintln!("mean alignment score {:.4}", grid.sum() / grid.numel() as f64);
        }
        Command::Ablate { config, data, out } => {
            let cfg = read_config(&config)?;
            let data = Dataset::load(&data)?;
            let rows = run_ablation_suite(&cfg, &data)?;
            let csv = ablation_csv(&rows);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
