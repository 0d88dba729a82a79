use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acfnet::config::RunSettings;
use acfnet::error::{AppError, Result};
use acfnet::train::{log, TrainOptions};
use acfnet::{ablate, checkpoint, data, gradsuite, heatmap, io, paramcount, train};
use acfnet_core::network::Variant;
use acfnet_core::preprocess::PreprocessConfig;
use acfnet_core::split::SplitMode;
use acfnet_core::synth::CohortSpec;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "acfnet", version, about = "Spatiotemporal attention prognosis model: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort (raw HU volumes + clinical table).
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 197)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 34)]
        depth_min: usize,
        #[arg(long, default_value_t = 46)]
        depth_max: usize,
        #[arg(long, default_value_t = 64)]
        in_plane: usize,
    },
    /// Equalize, resize and crop raw volumes; write the train/val/test split.
    Preprocess {
        #[arg(long)]
        raw_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        n_slices: usize,
        #[arg(long, default_value_t = 32)]
        target: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Use the fixed 157/20/20 partition (requires 197 samples).
        #[arg(long, conflicts_with = "split_sizes")]
        fixed_split: bool,
        /// Explicit train,val,test sizes.
        #[arg(long, value_delimiter = ',')]
        split_sizes: Option<Vec<usize>>,
    },
    /// Train a model; writes metrics.jsonl and checkpoint.ckpt to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_epochs_this_run: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train every comparison variant over several seeds and tabulate test metrics.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Variants to run; defaults to every row of the comparison tables.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Write yearly risk probabilities and heatmap images for one split.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Central-difference gradient checks of every operation and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Separable versus dense parameter counts.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn settings(&self) -> Result<RunSettings> {
        let mut s = match &self.config {
            Some(p) => RunSettings::from_file(p)?,
            None => RunSettings::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| AppError::Usage(format!("--set expects key=value, got `{kv}`")))?;
            s.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("variant", self.variant.clone()),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                s.set(k, &v)?;
            }
        }
        Ok(s)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| AppError::Usage(format!("`{key}` is required (flag --{} or config key)", key.replace('_', "-"))))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out_dir, n, seed, depth_min, depth_max, in_plane } => {
            let spec = CohortSpec { n, seed, depth_range: (depth_min, depth_max), in_plane, ..Default::default() };
            let phantoms = data::gen_data(&out_dir, &spec)?;
            log("gen-data", json!({ "samples": phantoms.len(), "out_dir": out_dir.display().to_string() }));
        }
        Command::Preprocess { raw_dir, out_dir, n_slices, target, split_seed, fixed_split, split_sizes } => {
            let mode = match (fixed_split, split_sizes) {
                (true, _) => SplitMode::COHORT_197,
                (false, Some(s)) => match s[..] {
                    [train, val, test] => SplitMode::Fixed { train, val, test },
                    _ => return Err(AppError::Usage("--split-sizes expects train,val,test".into())),
                },
                (false, None) => SplitMode::Ratio,
            };
            let split = data::preprocess_dir(&raw_dir, &out_dir, PreprocessConfig { n_slices, target }, split_seed, mode)?;
            log(
                "preprocess",
                json!({ "train": split.train.len(), "val": split.val.len(), "test": split.test.len(),
                        "out_dir": out_dir.display().to_string() }),
            );
        }
        Command::Train { run, resume, max_epochs_this_run } => {
            let settings = run.settings()?;
            let data = data::load_dataset(required(&settings.data_dir, "data_dir")?)?;
            let out_dir = required(&settings.out_dir, "out_dir")?.to_path_buf();
            let opts = TrainOptions { out_dir, resume, max_epochs_this_run, quiet: false };
            let t = train::train(&settings, &data, &opts)?;
            log("train", json!({ "epochs_completed": t.epoch, "lr": t.sched.lr }));
        }
        Command::Eval { checkpoint, data_dir, split, out_dir } => {
            let data = data::load_dataset(&data_dir)?;
            let out = out_dir.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let m = train::eval_checkpoint(&checkpoint, &data, &split, &out)?;
            print_json(&m);
        }
        Command::Ablate { run, seeds, variants } => {
            let settings = run.settings()?;
            let data = data::load_dataset(required(&settings.data_dir, "data_dir")?)?;
            let out_dir = required(&settings.out_dir, "out_dir")?;
            let variants: Vec<Variant> = match variants {
                Some(v) => v.iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|e| AppError::Usage(format!("{e}")))?,
                None => ablate::table_variants(),
            };
            if seeds.is_empty() {
                return Err(AppError::Usage("--seeds must list at least one seed".into()));
            }
            let model = train::model_config(&settings, &data)?;
            let results = ablate::run(&model, &settings.train, &data, &variants, &seeds)?;
            let tables = ablate::tables(&variants, &results);
            let text = ablate::render(&tables);
            io::write_bytes(&out_dir.join("ablation.txt"), text.as_bytes())?;
            io::write_json(&out_dir.join("ablation.json"), &json!({ "runs": results, "tables": tables }))?;
            print!("{text}");
        }
        Command::Heatmap { checkpoint, data_dir, split, out_dir } => {
            let t = checkpoint::load(&checkpoint)?;
            let data = data::load_dataset(&data_dir)?;
            let summary = heatmap::emit(&t, &split, data.split(&split)?, &out_dir)?;
            log("heatmap", json!({ "patients": summary.patients, "recon_images": summary.recon_images }));
        }
        Command::Gradcheck { seed } => {
            let entries = acfnet_core::gradsuite::run_suite(seed)?;
            print!("{}", gradsuite::render(&entries));
            if let Some(bad) = entries.iter().find(|e| !e.passed()) {
                return Err(AppError::Numeric(format!("gradient check `{}` exceeded its tolerance", bad.name)));
            }
        }
        Command::ParamCount { config, json } => {
            let settings = match config {
                Some(p) => RunSettings::from_file(&p)?,
                None => RunSettings::default(),
            };
            let r = paramcount::report(&settings.model)?;
            if json {
                print_json(&r);
            } else {
                print!("{}", paramcount::render(&r));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log("error", json!({ "message": e.to_string(), "exit_code": e.exit_code() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
