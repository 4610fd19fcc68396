use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};

use wsd_core::config::{describe_keys, PipelineConfig};
use wsd_core::eval::ReportFormat;
use wsd_core::pipeline::{Pipeline, PipelineError};

/// Word sense disambiguation with context-gloss pairs, multi-task
/// pre-training and back-translation augmentation.
#[derive(Debug, Parser)]
#[command(name = "wsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true, default_value = "wsd.toml")]
    config: PathBuf,

    /// Override a config value, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run directory, overriding `paths.output`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// MT service endpoint, overriding the config file and the environment.
    #[arg(long, global = true)]
    mt_endpoint: Option<String>,

    /// Report format for `evaluate` and `report`: text, markdown or json.
    #[arg(long, global = true)]
    format: Option<ReportFormat>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate context-gloss pairs for every configured corpus.
    Prepare,
    /// Back-translate positive training contexts into the augmentation pool.
    Augment,
    /// Multi-task pre-training on the configured task datasets.
    Pretrain,
    /// Fine-tune the pairwise head on the training pairs.
    Finetune,
    /// Predict the evaluation corpora and write reports.
    Evaluate,
    /// Print the stored report.
    Report,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config, &cli.overrides)?;
    cfg.apply_env();
    if let Some(e) = &cli.mt_endpoint {
        cfg.augmentation.mt_endpoint = e.clone();
    }
    if let Some(o) = &cli.output {
        cfg.paths.output = std::path::absolute(o).unwrap_or_else(|_| o.clone());
    }
    if let Some(f) = cli.format {
        cfg.report.format = f;
    }
    Ok(cfg)
}

fn run_id(cfg: &PipelineConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

fn init_logging(run_id: &str) {
    let id = run_id.to_string();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(move |buf, record| writeln!(buf, "[{id}] {:<5} {}", record.level(), record.args()))
        .init();
}

fn run(cli: &Cli, pipeline: &Pipeline) -> Result<(), PipelineError> {
    let format = pipeline.config.report.format;
    match cli.command {
        Command::Prepare => {
            pipeline.write_snapshot()?;
            let stats = pipeline.prepare()?;
            println!("{:<8} {:>9} {:>7} {:>9} {:>9} {:>7}", "corpus", "instances", "pairs", "positive", "negative", "ratio");
            for (name, s) in stats {
                let ratio = s.ratio.map_or("-".to_string(), |r| format!("{r:.3}"));
                println!(
                    "{name:<8} {:>9} {:>7} {:>9} {:>9} {ratio:>7}",
                    s.instances, s.pairs, s.positives, s.negatives
                );
            }
        }
        Command::Augment => {
            pipeline.write_snapshot()?;
            let s = pipeline.augment()?;
            println!(
                "pool: {} instances, {} paraphrases ({} audit entries) -> {}",
                s.instances,
                s.paraphrases,
                s.audit_entries,
                pipeline.pool_path().display()
            );
        }
        Command::Pretrain => {
            pipeline.write_snapshot()?;
            let score = pipeline.pretrain()?;
            println!("best pre-training dev score {score:.2}");
        }
        Command::Finetune => {
            pipeline.write_snapshot()?;
            let f1 = pipeline.finetune()?;
            println!("best dev F1 {f1:.1}");
        }
        Command::Evaluate => {
            pipeline.write_snapshot()?;
            let reports = pipeline.evaluate()?;
            print!("{}", wsd_core::eval::render_reports(&reports, format));
        }
        Command::Report => print!("{}", pipeline.report(format)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = Cli::command()
        .after_help(format!("Configuration keys and defaults:\n{}", describe_keys()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let pipeline = match load_config(&cli).and_then(Pipeline::new) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_logging(&run_id(&pipeline.config));
    match run(&cli, &pipeline) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{} failed: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Augment => "augment",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}
