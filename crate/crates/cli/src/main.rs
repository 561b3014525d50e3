//! `davit`: cost analysis, self-test, toy training, inference and feature export.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
//! `DAVIT_THREADS` caps intra-op parallelism (0 = all cores).

mod config;
mod image;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use davit_core::analysis::{self, ChannelSelection};
use davit_core::attention::ScaleMode;
use davit_core::model::{self, BlockLayout, Mode, Model};
use davit_core::selftest::{self, Level};
use davit_core::training::{self, generate_toy_dataset};
use davit_core::{par, DavitError, Result, Rng};

use config::{merge_value, resolve_model, ConfigFile, ModelFlags};

#[derive(Parser, Debug)]
#[command(
    name = "davit",
    version,
    about = "Dual-attention vision backbone toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP report as JSON.
    Analyze(AnalyzeArgs),
    /// Run the built-in invariant suites.
    Selftest(SelftestArgs),
    /// Train on the procedural toy dataset; writes a checkpoint and a JSONL log.
    TrainToy(TrainArgs),
    /// Classify images with a checkpoint.
    Infer(InferArgs),
    /// Write stage feature maps as PGM images.
    ExportFeatures(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Named preset (tiny, small, base, large, huge, giant, *_no_ffn, micro, micro_grad).
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long, value_enum)]
    scale_mode: Option<ScaleArg>,
    /// Enable or disable the feed-forward layers.
    #[arg(long)]
    ffn: Option<bool>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum LayoutArg {
    WindowFirst,
    ChannelFirst,
    Parallel,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ScaleArg {
    InvSqrtCg,
    InvSqrtP,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Square input resolution; without it only parameters are counted.
    #[arg(long)]
    res: Option<usize>,
    /// Comma-separated resolutions for an attention scaling probe.
    #[arg(long, value_delimiter = ',')]
    probe: Option<Vec<usize>>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, value_enum, default_value = "quick")]
    level: LevelArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for model.ckpt, train_log.jsonl and run_config.json.
    #[arg(long, default_value = "davit-run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM (P6) image or tensor file `[C, H, W]` / `[N, C, H, W]`.
    #[arg(long)]
    input: PathBuf,
    /// Expected model; the checkpoint must match it.
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Trained weights; without it a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    /// Stage number, 1 to 4.
    #[arg(long)]
    stage: usize,
    /// Explicit channel list.
    #[arg(long, value_delimiter = ',', conflicts_with = "top_k")]
    channels: Option<Vec<usize>>,
    /// Channels most attended to by --output-channel.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    output_channel: usize,
    #[arg(long, default_value = "features")]
    out: PathBuf,
}

impl ModelArgs {
    fn flags(&self) -> ModelFlags {
        ModelFlags {
            preset: self.preset.clone(),
            layout: self.layout.map(|l| match l {
                LayoutArg::WindowFirst => BlockLayout::WindowFirst,
                LayoutArg::ChannelFirst => BlockLayout::ChannelFirst,
                LayoutArg::Parallel => BlockLayout::Parallel,
            }),
            scale_mode: self.scale_mode.map(|s| match s {
                ScaleArg::InvSqrtCg => ScaleMode::InvSqrtCg,
                ScaleArg::InvSqrtP => ScaleMode::InvSqrtP,
            }),
            ffn: self.ffn,
        }
    }

    fn file(&self) -> Result<Option<ConfigFile>> {
        self.config.as_deref().map(ConfigFile::load).transpose()
    }

    fn is_given(&self) -> bool {
        self.preset.is_some() || self.config.is_some()
    }

    fn resolve(
        &self,
        res: Option<usize>,
        default_preset: Option<&str>,
    ) -> Result<model::ModelConfig> {
        resolve_model(&self.flags(), self.file()?.as_ref(), res, default_preset)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| DavitError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.model.resolve(args.res, None)?;
    if let Some(resolutions) = &args.probe {
        let rows = analysis::scaling_probe(&cfg, resolutions)?;
        println!(
            "{}",
            serde_json::to_string_pretty(&rows).expect("rows serialize")
        );
        return Ok(());
    }
    let report = match args.res {
        Some(r) => analysis::count_flops(&cfg, r, r)?,
        None => analysis::count_params(&cfg)?,
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, report.to_json() + "\n")?;
            let flops = args
                .res
                .map(|r| format!(", {:.2}G FLOPs @{r}", report.flops_g()))
                .unwrap_or_default();
            println!(
                "{}: {:.2}M params{flops} -> {}",
                cfg.name,
                report.params_m(),
                path.display()
            );
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn run_selftest(args: &SelftestArgs) -> Result<bool> {
    let level = match args.level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let report = selftest::run_selftest(level);
    for line in report.lines() {
        println!("{line}");
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed", report.checks.len());
    Ok(report.passed())
}

fn train_toy(args: &TrainArgs) -> Result<()> {
    let file = args.model.file()?;
    let cfg = resolve_model(&args.model.flags(), file.as_ref(), None, Some("micro"))?;
    let file = file.unwrap_or_default();
    let seed = merge_value("seed", args.seed, file.seed)?.unwrap_or(0);
    let train = config::resolve_train(Some(&file), args.epochs, seed)?;
    let spec = file.data.clone().unwrap_or_default();
    if cfg.num_classes != training::NUM_TOY_CLASSES || cfg.in_chans != training::TOY_CHANNELS {
        return Err(DavitError::Config(format!(
            "the toy dataset needs {} input channels and {} classes",
            training::TOY_CHANNELS,
            training::NUM_TOY_CLASSES
        )));
    }
    let data = generate_toy_dataset::<f32>(&spec)?;
    let mut model = Model::<f32>::build(cfg.clone(), seed)?;
    let log = training::train_loop(&mut model, &data, &train)?;
    for e in log.epochs() {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:.3}  test loss {:.4}  test acc {:.3}",
            e.epoch, e.lr, e.loss, e.accuracy, e.test_loss, e.test_accuracy
        );
    }
    std::fs::create_dir_all(&args.out)?;
    model::save_checkpoint(&model, &args.out.join("model.ckpt"))?;
    std::fs::write(args.out.join("train_log.jsonl"), log.to_jsonl())?;
    let run = serde_json::json!({ "seed": seed, "model": cfg, "train": train, "data": spec });
    write_json(&args.out.join("run_config.json"), &run)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_model(checkpoint: &Path, expected: &ModelArgs) -> Result<Model<f32>> {
    if expected.is_given() {
        let cfg = expected.resolve(None, None)?;
        model::load_checkpoint_as(checkpoint, &cfg)
    } else {
        model::load_checkpoint(checkpoint)
    }
}

fn infer(args: &InferArgs) -> Result<()> {
    let model = load_model(&args.checkpoint, &args.model)?;
    let images = image::load_images(&args.input)?;
    let logits = model.forward(&images, Mode::Eval, &mut Rng::new(0))?;
    let k = logits.shape()[1];
    for (i, (row, class)) in logits
        .data()
        .chunks(k)
        .zip(training::predictions(&logits))
        .enumerate()
    {
        let line = serde_json::json!({ "index": i, "class": class, "logits": row });
        println!("{line}");
    }
    Ok(())
}

fn export_features(args: &ExportArgs) -> Result<()> {
    let images = image::load_images(&args.input)?;
    let res = images.shape()[2];
    let model = match &args.checkpoint {
        Some(path) => load_model(path, &args.model)?,
        None => Model::<f32>::build(args.model.resolve(Some(res), None)?, args.seed)?,
    };
    let selection = match (&args.channels, args.top_k) {
        (Some(list), None) => ChannelSelection::Explicit(list.clone()),
        (None, Some(k)) => ChannelSelection::TopK {
            output_channel: args.output_channel,
            k,
        },
        _ => {
            return Err(DavitError::Config(
                "pass either --channels or --top-k".into(),
            ))
        }
    };
    let written =
        analysis::export_feature_maps(&model, &images, args.stage, &selection, &args.out)?;
    for m in written {
        match m.score {
            Some(s) => println!("{} channel {} score {s:.6}", m.path.display(), m.channel),
            None => println!("{} channel {}", m.path.display(), m.channel),
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DAVIT_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| {
            DavitError::Config(format!(
                "DAVIT_THREADS must be a non-negative integer, got '{v}'"
            ))
        })?;
        par::init_global_threads(n);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Analyze(a) => analyze(a).map(|()| true),
        Command::Selftest(a) => run_selftest(a),
        Command::TrainToy(a) => train_toy(a).map(|()| true),
        Command::Infer(a) => infer(a).map(|()| true),
        Command::ExportFeatures(a) => export_features(a).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
