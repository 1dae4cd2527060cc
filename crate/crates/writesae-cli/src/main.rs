//! Command-line entry: experiment stages and the full pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric error, 4 stage failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use writesae_cli::config::ExperimentConfig;
use writesae_cli::pipeline::{self, PipelineCtx, STAGES};
use writesae_cli::{report, CliError};

#[derive(Parser)]
#[command(name = "writesae", about = "Cache-write dictionary lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the recurrent toy host from the config.
    TrainHost(StageArgs),
    /// Extract per-token states and writes for one cell.
    Capture(StageArgs),
    /// Train the dictionary on the capture.
    TrainSae(StageArgs),
    /// Cosine partition and mixture statistics.
    Partition(PartitionArgs),
    /// Replacement test: atom vs deletion vs random.
    Replace(StageArgs),
    /// Logit-change prediction audit.
    Predict(PredictArgs),
    /// Cache interventions.
    Steer(SteerArgs),
    /// Re-emit plots and re-audit summaries for a finished run.
    Report {
        /// Output directory of a previous run.
        out_dir: PathBuf,
        /// Only run the audit.
        #[arg(long)]
        audit: bool,
    },
    /// Full pipeline: every stage in order plus manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and print the stage plan without writing.
        #[arg(long)]
        dry_run: bool,
        /// Worker cap for within-stage parallelism (stages here are
        /// single-threaded; accepted for interface stability).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write the bundled demo configuration to a file.
    DemoConfig {
        #[arg(long, default_value = "configs/demo.json")]
        path: PathBuf,
        #[arg(long, default_value = "runs/demo")]
        out_dir: String,
    },
}

#[derive(clap::Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Capture output path override (capture stage).
    #[arg(long)]
    capture_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PartitionArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated ε grid override.
    #[arg(long)]
    eps: Option<String>,
}

#[derive(clap::Args)]
struct SteerArgs {
    #[arg(long)]
    config: PathBuf,
    /// erase | install | sign | generate | amplify | all
    #[arg(default_value = "all")]
    experiment: String,
    #[arg(long)]
    dose: Option<f64>,
    #[arg(long)]
    positions: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            std::process::exit(e.exit_code());
        }
    }
}

fn load(config: &PathBuf) -> Result<(ExperimentConfig, PipelineCtx), CliError> {
    let cfg = ExperimentConfig::from_file(config)?;
    let ctx = PipelineCtx::new(cfg.clone())?;
    Ok((cfg, ctx))
}

/// Stages that need earlier artifacts reload them from the output directory.
fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainHost(args) => {
            let (_, ctx) = load(&args.config)?;
            let model = pipeline::stage_train_host(&ctx).map_err(CliError::in_stage("train-host"))?;
            println!("trained host -> {}", ctx.out.join("host.json").display());
            let _ = model;
            Ok(())
        }
        Command::Capture(args) => {
            let (_, ctx) = load(&args.config)?;
            let model = pipeline::load_host(&ctx.out)?;
            let ds = pipeline::stage_capture(&ctx, &model).map_err(CliError::in_stage("capture"))?;
            if let Some(alt) = args.capture_out {
                writesae::capture::write_capture_file(&ds, &alt)?;
            }
            println!("captured {} records -> {}", ds.len(), ctx.out.join("capture.wsae").display());
            Ok(())
        }
        Command::TrainSae(args) => {
            let (_, ctx) = load(&args.config)?;
            let ds = writesae::capture::read_capture_file(&ctx.out.join("capture.wsae"))?;
            pipeline::stage_train_sae(&ctx, &ds).map_err(CliError::in_stage("train-sae"))?;
            println!("trained dictionary -> {}", ctx.out.join("dict.wsdc").display());
            Ok(())
        }
        Command::Partition(args) => {
            let (mut cfg, _) = load(&args.config)?;
            if let Some(tau) = args.tau {
                cfg.partition.tau = tau;
            }
            let ctx = PipelineCtx::new(cfg)?;
            let ds = writesae::capture::read_capture_file(&ctx.out.join("capture.wsae"))?;
            let dict = writesae::sae::read_dictionary_file(&ctx.out.join("dict.wsdc"))?;
            pipeline::stage_partition(&ctx, &ds, &dict).map_err(CliError::in_stage("partition"))?;
            println!("partition -> {}", ctx.out.join("partition.jsonl").display());
            Ok(())
        }
        Command::Replace(args) => {
            let (_, ctx) = load(&args.config)?;
            let model = pipeline::load_host(&ctx.out)?;
            let ds = writesae::capture::read_capture_file(&ctx.out.join("capture.wsae"))?;
            let dict = writesae::sae::read_dictionary_file(&ctx.out.join("dict.wsdc"))?;
            let geoms = load_geoms(&ctx)?;
            pipeline::stage_replace(&ctx, &model, &ds, &dict, &geoms)
                .map_err(CliError::in_stage("replace"))?;
            println!("replacement -> {}", ctx.out.join("replacement_summary.json").display());
            Ok(())
        }
        Command::Predict(args) => {
            let (mut cfg, _) = load(&args.config)?;
            if let Some(eps) = args.eps {
                cfg.predict.eps = eps
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Config(format!("bad eps: {e}"))))
                    .collect::<Result<_, _>>()?;
            }
            let ctx = PipelineCtx::new(cfg)?;
            let model = pipeline::load_host(&ctx.out)?;
            pipeline::stage_predict(&ctx, &model).map_err(CliError::in_stage("predict"))?;
            println!("prediction audit -> {}", ctx.out.join("predict_summary.json").display());
            Ok(())
        }
        Command::Steer(args) => {
            let (mut cfg, _) = load(&args.config)?;
            if let Some(d) = args.dose {
                cfg.steer.gen_doses = vec![d];
                cfg.steer.amplify_doses = vec![d];
            }
            if let Some(p) = args.positions {
                cfg.steer.gen_positions = p;
            }
            if let Some(h) = args.horizon {
                cfg.steer.horizon = h;
            }
            if !["erase", "install", "sign", "generate", "amplify", "all"]
                .contains(&args.experiment.as_str())
            {
                return Err(CliError::Config(format!("unknown steer experiment {}", args.experiment)));
            }
            let ctx = PipelineCtx::new(cfg)?;
            let model = pipeline::load_host(&ctx.out)?;
            let ds = writesae::capture::read_capture_file(&ctx.out.join("capture.wsae"))?;
            let dict = writesae::sae::read_dictionary_file(&ctx.out.join("dict.wsdc"))?;
            let geoms = load_geoms(&ctx)?;
            pipeline::stage_steer(&ctx, &model, &ds, &dict, &geoms).map_err(CliError::in_stage("steer"))?;
            println!("steering -> {}", ctx.out.join("steer_summary.json").display());
            Ok(())
        }
        Command::Report { out_dir, audit } => {
            if !audit {
                report::emit_plots(&out_dir).map_err(CliError::in_stage("report"))?;
            }
            let checks = report::audit(&out_dir).map_err(CliError::in_stage("report"))?;
            for c in &checks {
                println!("[{}] {}: {}", if c.ok { "ok" } else { "MISMATCH" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.ok) {
                Ok(())
            } else {
                Err(CliError::Numeric("audit mismatch".into()))
            }
        }
        Command::Run { config, dry_run, threads: _threads } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            if dry_run {
                println!("config ok; stage plan:");
                for (i, s) in STAGES.iter().enumerate() {
                    println!("  {}. {s}", i + 1);
                }
                return Ok(());
            }
            let manifest = pipeline::run_pipeline(&cfg)?;
            println!(
                "pipeline complete: {} artifacts, config hash {}",
                manifest.artifacts.len(),
                &manifest.config_hash[..12]
            );
            Ok(())
        }
        Command::DemoConfig { path, out_dir } => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let cfg = ExperimentConfig::demo(&out_dir);
            std::fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn load_geoms(ctx: &PipelineCtx) -> Result<Vec<writesae::partition::AtomGeometry>, CliError> {
    let text = std::fs::read_to_string(ctx.out.join("partition.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}
