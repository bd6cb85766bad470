use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilevel_adapt::adaptation::Scheme;
use bilevel_adapt::autodiff::SecondOrder;
use bilevel_adapt::experiment::{
    checkpoint_path, emit_report, load_checkpoint, run_adapt, run_pretrain, ExperimentConfig,
};
use bilevel_adapt::Result;
use clap::{Args, Parser, Subcommand};

/// Source pretraining, online adaptation grids and reports.
#[derive(Parser)]
#[command(name = "bilevel-adapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the regressor on the source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Override the pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt the pretrained model on target streams for every grid cell.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Run a single stream seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Schemes to run, comma separated.
        #[arg(long, value_delimiter = ',')]
        scheme: Vec<Scheme>,
        /// Inner step counts, comma separated.
        #[arg(long = "steps", value_name = "T", value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, value_name = "exact|first")]
        second_order: Option<SecondOrder>,
        /// Defaults to base.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate run CSVs and check the configured assertions.
    Report {
        /// Results directory.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

fn pretrain(common: &Common, seed: Option<u64>) -> Result<u8> {
    let mut cfg = common.load()?;
    if let Some(s) = seed {
        cfg.pretrain.seed = s;
    }
    let out = run_pretrain(&cfg, &common.out)?;
    println!("wrote {}", checkpoint_path(&common.out).display());
    println!(
        "source validation MPJPE {:.5} (initialization {:.5})",
        out.validation.mean_mpjpe(),
        out.initial.mean_mpjpe()
    );
    Ok(0)
}

fn adapt(
    common: &Common,
    seed: Option<u64>,
    schemes: Vec<Scheme>,
    steps: Vec<usize>,
    second_order: Option<SecondOrder>,
    checkpoint: Option<&Path>,
) -> Result<u8> {
    let mut cfg = common.load()?;
    if let Some(s) = seed {
        cfg.experiment.seeds = vec![s];
    }
    if !schemes.is_empty() {
        cfg.experiment.schemes = schemes;
    }
    if !steps.is_empty() {
        cfg.experiment.steps = steps;
    }
    if let Some(m) = second_order {
        cfg.adapt.second_order = m;
    }
    let ckpt = checkpoint.map_or_else(|| checkpoint_path(&common.out), Path::to_path_buf);
    let base = load_checkpoint(&ckpt)?;
    let outcome = run_adapt(&cfg, &base, &common.out)?;
    let report = emit_report(&common.out)?;
    print!("{}", report.summary);
    let diverged = outcome.diverged();
    if diverged > 0 {
        eprintln!("{diverged} run(s) diverged");
        return Ok(2);
    }
    Ok(0)
}

fn report(out: &Path) -> Result<u8> {
    let report = emit_report(out)?;
    print!("{}", report.summary);
    Ok(if report.passed() { 0 } else { 3 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Pretrain { common, seed } => pretrain(&common, seed),
        Command::Adapt {
            common,
            seed,
            scheme,
            steps,
            second_order,
            checkpoint,
        } => adapt(&common, seed, scheme, steps, second_order, checkpoint.as_deref()),
        Command::Report { out } => report(&out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
