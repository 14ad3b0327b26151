use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mamba_icl::training::Mode;
use mamba_icl_lab::commands::{run_and_write, Command};
use mamba_icl_lab::{LabConfig, LabError, LabResult};

#[derive(Parser)]
#[command(name = "mamba-lab", version, about = "Selective SSM in-context regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Heatmap, cosine trace and loss-vs-N sweep.
    Figures,
    /// Baseline, short-context, w_delta and hidden-width tables.
    Tables,
    /// Every oracle and check; exits 2 on failure.
    Verify,
    /// Train one model and save a checkpoint.
    Train,
    /// Finite-difference check of the empirical gradients.
    CheckGrad,
    /// Evaluate the width, context and learning-rate conditions.
    CheckAssumptions,
    /// Monte-Carlo expectation oracles for --d and --n.
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Population,
    Empirical,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    dh: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    train_wdelta: bool,
    /// Override any configuration key: `--set section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true, hide = true)]
    fault_beta1_scale: Option<f64>,
}

impl Common {
    fn config(&self) -> LabResult<LabConfig> {
        let mut c = LabConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(v) = self.seed {
            c.run.seed = v;
        }
        if let Some(v) = &self.out {
            c.run.out = v.clone();
        }
        if let Some(v) = self.d {
            c.model.d = v;
        }
        if let Some(v) = self.n {
            c.model.n = v;
        }
        if let Some(v) = self.dh {
            c.model.dh = v;
        }
        if let Some(v) = self.eta {
            c.model.eta = Some(v);
        }
        if let Some(v) = self.trials {
            c.run.trials = v;
        }
        if let Some(m) = self.mode {
            c.model.mode = match m {
                ModeArg::Population => Mode::Population,
                ModeArg::Empirical => Mode::Empirical,
            };
        }
        if self.train_wdelta {
            c.model.train_wdelta = true;
        }
        if let Some(v) = self.fault_beta1_scale {
            c.verify.beta1_scale = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: &Cli) -> LabResult<Option<LabError>> {
    let config = cli.common.config()?;
    let command = match cli.command {
        Sub::Figures => Command::Figures,
        Sub::Tables => Command::Tables,
        Sub::Verify => Command::Verify,
        Sub::Train => Command::Train,
        Sub::CheckGrad => Command::CheckGrad,
        Sub::CheckAssumptions => Command::CheckAssumptions,
        Sub::Oracle => Command::Oracle,
    };
    let (manifest, failure) = run_and_write(command, &config)?;
    for f in &manifest.files {
        println!("{}", config.run.out.join(&f.path).display());
    }
    Ok(failure)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(failure)) | Err(failure) => {
            eprintln!("mamba-lab: {failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
