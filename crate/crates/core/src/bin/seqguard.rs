use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqguard::error::Result;
use seqguard::harness::{
    fake_order_effect_sweep, run_pipeline, sweep_variants, ExperimentConfig, RunOptions, Stage,
};

/// Fake-order injection, detection, influence triage and rectification for
/// sequential recommenders.
#[derive(Debug, Parser)]
#[command(name = "seqguard", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Reuse finished stages in --out that were produced under the same configuration.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or load) the corpus and semantic embeddings.
    Synth(Common),
    /// Plant fake orders and write manifest.json.
    Inject(Common),
    /// Train the recommender on the clean and the compromised corpus.
    TrainTarget(Common),
    /// Train the dual-view detection model on the compromised corpus.
    TrainDetector(Common),
    /// Score every position and write detection.csv.
    Detect(Common),
    /// Estimate the influence of flagged samples and write influence.csv.
    Influence(Common),
    /// Unlearn harmful samples by gradient ascent.
    Rectify(Common),
    /// Evaluate clean, compromised and rectified models; write metrics.json.
    Eval(Common),
    /// Train and evaluate under each fake-order type; write effects.csv.
    EffectSweep(Common),
    /// Run every stage end to end.
    Pipeline(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, until) = match &cli.command {
        Command::Synth(c) => (c, Stage::Data),
        Command::Inject(c) => (c, Stage::Inject),
        Command::TrainTarget(c) => (c, Stage::Compromised),
        Command::TrainDetector(c) => (c, Stage::DualView),
        Command::Detect(c) => (c, Stage::Detect),
        Command::Influence(c) => (c, Stage::Influence),
        Command::Rectify(c) => (c, Stage::Rectify),
        Command::Eval(c) | Command::Pipeline(c) => (c, Stage::Report),
        Command::EffectSweep(c) => {
            let cfg = load_config(c)?;
            let table = fake_order_effect_sweep(&cfg, &sweep_variants(&cfg), &c.out, c.resume)?;
            print!("{}", table.to_csv());
            return Ok(());
        }
    };
    let cfg = load_config(common)?;
    let outcome = run_pipeline(
        &cfg,
        &common.out,
        RunOptions {
            until,
            resume: common.resume,
        },
    )?;
    let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
    println!("computed: {}", names(&outcome.computed));
    if !outcome.resumed.is_empty() {
        println!("resumed: {}", names(&outcome.resumed));
    }
    if let Some(m) = outcome.metrics {
        println!(
            "NDCG@10 clean {:.4} compromised {:.4} rectified {:.4}",
            m.clean.ndcg_at(10),
            m.compromised.ndcg_at(10),
            m.rectified.ndcg_at(10)
        );
        if let (Some(p), Some(r)) = (m.detection.precision, m.detection.recall) {
            println!("detection precision {p:.3} recall {r:.3}");
        }
        println!("report: {}", common.out.join("metrics.json").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
