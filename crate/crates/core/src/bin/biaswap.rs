use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use biaswap_core::debias_pipeline::{default_config_text, Ablation, Pipeline, PipelineConfig, Stage, StageOutcome};

/// Bias-swapping augmentation pipeline.
#[derive(Parser, Debug)]
#[command(name = "biaswap", version)]
struct Cli {
    /// data, biased_train, partition, swapae_train, augment, debias_train,
    /// evaluate, report, or `all`. `defaults` prints the documented config.
    stage: String,

    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Rerun even if the stage is up to date.
    #[arg(long)]
    force: bool,

    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Apply an ablation (repeatable: `--ablation c1 --ablation c2`).
    #[arg(long, value_parser = ["c1", "c2"])]
    ablation: Vec<String>,

    /// Recolour digits with the ground-truth palette instead of the autoencoder.
    #[arg(long)]
    oracle_swap: bool,
}

fn run(cli: &Cli) -> Result<(), (String, biaswap_core::Error)> {
    let fail = |stage: &str| {
        let s = stage.to_string();
        move |e| (s.clone(), e)
    };
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ("config".to_string(), biaswap_core::Error::Config("--config <path> is required".into())))?;
    let mut config = PipelineConfig::load(path).map_err(fail("config"))?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    for a in &cli.ablation {
        config = config.with_ablation(a.parse::<Ablation>().map_err(fail("config"))?);
    }
    if cli.oracle_swap {
        config = config.with_oracle_swap(true);
    }
    let mut pipeline = Pipeline::new(config, &Pipeline::default_root());
    pipeline.verbose = true;
    let stages: Vec<Stage> = if cli.stage == "all" {
        Stage::ALL.to_vec()
    } else {
        vec![cli.stage.parse().map_err(fail(&cli.stage))?]
    };
    for stage in stages {
        match pipeline.run_stage(stage, cli.force).map_err(fail(stage.name()))? {
            StageOutcome::Ran => println!("{stage}: done ({})", pipeline.stage_dir(stage).display()),
            StageOutcome::UpToDate => println!("{stage}: up to date ({})", pipeline.stage_dir(stage).display()),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.stage == "defaults" {
        print!("{}", default_config_text());
        return ExitCode::SUCCESS;
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("biaswap: stage {stage} failed: {e}");
            ExitCode::FAILURE
        }
    }
}
