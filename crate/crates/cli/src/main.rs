use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use pocketsr::accounting::{self, compression_report, compute_report, describe, write_jsonl};
use pocketsr::backbone::ModuleKind;
use pocketsr::checkpoint::{self, Manifest};
use pocketsr::config::{RunConfig, SEED_ENV};
use pocketsr::lite_ed::image_io::{load_png, save_png};
use pocketsr::nn::{Init, Params};
use pocketsr::pipeline::PocketSr;
use pocketsr::pruning::{self, PruningPlan};
use pocketsr::sweep::{sweep, SweepSpec};
use pocketsr::training::{train_stage1, train_stage2, write_synthetic_dataset, ImageDataset};

#[derive(Parser)]
#[command(name = "pocketsr", version, about = "Compact one-step diffusion super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file with dotted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from: toy or full_scale
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key, e.g. --set train.batch_size=2 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to paths.output, then runs/<command>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory of HR training images
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate this many synthetic images instead of reading --data
    #[arg(long)]
    synthetic: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the lite encoder/decoder and the full U-Net end to end
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Channel pruning with distillation, then annealed module replacement
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Stage-1 checkpoint directory used as the frozen teacher
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Super-resolve a PNG image
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Parameter, MAC and latency report for the configured model and plan
    Profile {
        #[command(flatten)]
        common: Common,
        /// Take the model config from this checkpoint instead
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// HR input edge in pixels
        #[arg(long, default_value_t = 512)]
        input_size: usize,
        /// Timed forward passes per model; 0 skips latency
        #[arg(long, default_value_t = 0)]
        latency_trials: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Also write the report as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print per-block rows for both models
        #[arg(long)]
        detailed: bool,
    },
    /// Ablation sweep over pruning locations or channel ratios
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// resblock, self_attention, cross_attention, ffn or channel_ratio
        #[arg(long, default_value = "resblock")]
        target: String,
        /// Training steps per arm and phase
        #[arg(long, default_value_t = 20)]
        budget: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write an inference bundle holding only the surviving weights
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Permit exporting a checkpoint that was never pruned
        #[arg(long)]
        allow_unpruned: bool,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let file = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    Ok(RunConfig::resolve(
        common.preset.as_deref(),
        file.as_deref(),
        env_seed.as_deref(),
        &common.overrides,
    )?)
}

fn out_dir(common: &Common, run: &RunConfig, command: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| (!run.paths.output.is_empty()).then(|| PathBuf::from(&run.paths.output)))
        .unwrap_or_else(|| Path::new("runs").join(command))
}

fn write_config(dir: &Path, run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, run.to_toml_string()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn open_dataset(data: &DataArgs, run: &RunConfig, out: &Path) -> Result<ImageDataset> {
    if let Some(n) = data.synthetic {
        let dir = out.join("synthetic_data");
        let size = run.train.crop_size + run.train.crop_size / 2;
        write_synthetic_dataset(&dir, n, size, run.seed)?;
        return Ok(ImageDataset::open(&dir)?);
    }
    let dir = data
        .data
        .clone()
        .or_else(|| (!run.paths.dataset.is_empty()).then(|| PathBuf::from(&run.paths.dataset)))
        .context("no training data: pass --data <dir>, --synthetic <n>, or set paths.dataset")?;
    Ok(ImageDataset::open(&dir)?)
}

fn config_header(run: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "config": run, "seed": run.seed }))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let device = Device::Cpu;
    match cli.command {
        Command::TrainStage1 { common, data } => {
            let run = resolve(&common)?;
            let out = out_dir(&common, &run, "stage1");
            write_config(&out, &run)?;
            let dataset = open_dataset(&data, &run, &out)?;
            let result = train_stage1(&run, &dataset, &device, Some(&out.join("train_stage1.jsonl")))?;
            let manifest = Manifest::new(
                &result.model,
                1,
                run.train.steps_stage1,
                &PruningPlan::empty(),
                Some(&run),
            )?;
            let ckpt = out.join("checkpoint");
            checkpoint::save(
                &ckpt,
                &result.model,
                &[("discriminator", &result.discriminator as &dyn Params)],
                &manifest,
            )?;
            println!("stage-1 checkpoint written to {}", ckpt.display());
        }
        Command::TrainStage2 { common, data, teacher } => {
            let run = resolve(&common)?;
            let teacher_dir = teacher
                .or_else(|| (!run.paths.teacher.is_empty()).then(|| PathBuf::from(&run.paths.teacher)))
                .context("train-stage2 needs a teacher: pass --teacher <stage-1 checkpoint dir> or set paths.teacher")?;
            let out = out_dir(&common, &run, "stage2");
            write_config(&out, &run)?;
            let loaded = checkpoint::load(&teacher_dir, &device)
                .with_context(|| format!("loading teacher checkpoint {}", teacher_dir.display()))?;
            let dataset = open_dataset(&data, &run, &out)?;
            let result = train_stage2(&run, &loaded.model, &dataset, &device, Some(&out.join("train_stage2.jsonl")))?;
            let steps = run.train.steps_channel + run.train.steps_anneal;
            let mut extras: Vec<(&str, &dyn Params)> = vec![("discriminator", &result.discriminator)];
            if let Some(d) = &result.distill {
                extras.push(("distill", d));
            }
            let annealed_dir = out.join("checkpoint_annealed");
            let manifest = Manifest::new(&result.annealed, 2, steps, &run.prune, Some(&run))?;
            checkpoint::save(&annealed_dir, &result.annealed, &extras, &manifest)?;
            let final_dir = out.join("checkpoint");
            let manifest = Manifest::new(&result.student, 2, steps, &run.prune, Some(&run))?;
            checkpoint::save(&final_dir, &result.student, &extras, &manifest)?;
            println!(
                "stage-2 checkpoints written to {} (finalized) and {} (annealed pairs)",
                final_dir.display(),
                annealed_dir.display()
            );
        }
        Command::Infer {
            common,
            checkpoint: ckpt,
            input,
            output,
        } => {
            let run = resolve(&common)?;
            let out = common.out.clone().unwrap_or_else(|| {
                output.parent().map(Path::to_path_buf).unwrap_or_default()
            });
            write_config(&out, &run)?;
            let loaded = checkpoint::load(&ckpt, &device)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let model = loaded.model;
            let lr = load_png(&input, &device)?.to_dtype(model.dtype())?;
            let sr = model.super_resolve(&lr, run.infer.tile, run.infer.overlap)?;
            save_png(&sr, &output)?;
            let (_, _, h, w) = sr.dims4()?;
            println!("wrote {} ({w}x{h})", output.display());
        }
        Command::Profile {
            common,
            checkpoint: ckpt,
            input_size,
            latency_trials,
            warmup,
            csv,
            detailed,
        } => {
            let mut run = resolve(&common)?;
            if let Some(dir) = &ckpt {
                let manifest = checkpoint::read_manifest(dir)?;
                run.model = manifest.model.config;
            }
            let out = out_dir(&common, &run, "profile");
            write_config(&out, &run)?;
            let size = (input_size, input_size);
            let before = compute_report("baseline", &describe(&run.model, None, size)?)?;
            let after = compute_report("pruned", &describe(&run.model, Some(&run.prune), size)?)?;
            let (before, after) = if latency_trials > 0 {
                let (base, pruned) = build_pair(&run)?;
                let b = accounting::measure_model_latency(&base, size, latency_trials, warmup)?;
                let a = accounting::measure_model_latency(&pruned, size, latency_trials, warmup)?;
                (before.with_latency(b), after.with_latency(a))
            } else {
                (before, after)
            };
            let report = compression_report(before, after);
            if detailed {
                print!("{}\n{}\n", report.before.to_table(), report.after.to_table());
            }
            print!("{}", report.to_table());
            let mut header = config_header(&run)?;
            header["hardware"] = accounting::hardware_descriptor().into();
            header["input_size"] = serde_json::json!([input_size, input_size]);
            write_jsonl(&out.join("profile.jsonl"), Some(&header), &report.jsonl_records()?)?;
            if let Some(path) = csv {
                let text = format!("{}\n{}\n{}", report.to_csv(), report.before.to_csv(), report.after.to_csv());
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Sweep {
            common,
            data,
            target,
            budget,
            csv,
        } => {
            let run = resolve(&common)?;
            let spec = match target.as_str() {
                "channel_ratio" => SweepSpec::channel_sweep(budget),
                kind => SweepSpec::depth_sweep(kind.parse::<ModuleKind>()?, budget),
            };
            let out = out_dir(&common, &run, "sweep");
            write_config(&out, &run)?;
            let dataset = open_dataset(&data, &run, &out)?;
            let table = sweep(&spec, &run, &dataset, &device, Some(&out))?;
            print!("{}", table.to_table());
            let records = table
                .rows
                .iter()
                .map(serde_json::to_string)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let mut header = config_header(&run)?;
            header["sweep"] = serde_json::to_value(&spec)?;
            write_jsonl(&out.join("sweep.jsonl"), Some(&header), &records)?;
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Export {
            common,
            checkpoint: ckpt,
            output,
            allow_unpruned,
        } => {
            let run = resolve(&common)?;
            if let Some(out) = &common.out {
                write_config(out, &run)?;
            } else {
                write_config(&output, &run)?;
            }
            let manifest = checkpoint::export(&ckpt, &output, allow_unpruned, &device)?;
            println!(
                "exported {} ({:?}) to {}",
                ckpt.display(),
                manifest.pruning.state,
                output.display()
            );
        }
    }
    Ok(())
}

/// Randomly initialized baseline and finalized pruned models for timing.
fn build_pair(run: &RunConfig) -> Result<(PocketSr, PocketSr)> {
    let mut init = Init::new(run.seed, &Device::Cpu, candle_core::DType::F32);
    let base = PocketSr::new(&run.model, &mut init)?;
    let mut cfg = run.model.clone();
    cfg.unet = pruning::channel_prune(&cfg.unet, run.prune.channel_ratio)?;
    let mut pruned = PocketSr::new(&cfg, &mut init)?;
    let schedule = pruning::apply_plan(&mut pruned.unet, &run.prune, 1, &mut init)?;
    schedule.set_step(1);
    pruning::finalize(&mut pruned.unet)?;
    Ok((base, pruned))
}
