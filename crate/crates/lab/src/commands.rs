//! Subcommands. Each produces a set of artifacts and a status; the binary
//! writes them with a manifest and maps the status to an exit code.

use std::path::Path;

use chrono::Utc;
use mamba_icl::checkpoint::Checkpoint;
use mamba_icl::dynamics::{check_assumptions, DynamicsTrace};
use mamba_icl::task_gen::{mc_moment_oracle, mc_sequence_oracle, OracleConfig};
use mamba_icl::theory::theoretical_loss;
use serde_json::json;

use crate::config::LabConfig;
use crate::error::{LabError, LabResult};
use crate::experiments::{run_figure_suite, run_table_suite, test_loss, train};
use crate::output::{write_run, Artifacts, RunManifest, Table};
use crate::row;
use crate::verify::{empirical_gradient_check, oracle_checks, run_verification_suite};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Figures,
    Tables,
    Verify,
    Train,
    CheckGrad,
    CheckAssumptions,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Figures => "figures",
            Command::Tables => "tables",
            Command::Verify => "verify",
            Command::Train => "train",
            Command::CheckGrad => "check-grad",
            Command::CheckAssumptions => "check-assumptions",
            Command::Oracle => "oracle",
        }
    }
}

#[derive(Debug)]
pub struct CommandOutput {
    pub artifacts: Artifacts,
    pub seeds: Vec<u64>,
    /// Failure to report after the artifacts are written.
    pub failure: Option<LabError>,
}

impl CommandOutput {
    fn ok(artifacts: Artifacts, seeds: Vec<u64>) -> Self {
        Self { artifacts, seeds, failure: None }
    }
}

fn trial_seeds(config: &LabConfig) -> Vec<u64> {
    (0..config.run.trials as u64).map(|t| config.run.seed + t).collect()
}

pub fn execute(command: Command, config: &LabConfig) -> LabResult<CommandOutput> {
    config.validate()?;
    match command {
        Command::Figures => {
            let (artifacts, _) = run_figure_suite(config)?;
            Ok(CommandOutput::ok(artifacts, trial_seeds(config)))
        }
        Command::Tables => {
            let (artifacts, _) = run_table_suite(config)?;
            Ok(CommandOutput::ok(artifacts, trial_seeds(config)))
        }
        Command::Verify => {
            let report = run_verification_suite(config)?;
            let mut artifacts = Artifacts::new();
            artifacts.add_json("verify_report.json", &report)?;
            let failure = (!report.passed).then(|| LabError::Verification(report.failures().join(", ")));
            Ok(CommandOutput { artifacts, seeds: vec![config.run.seed], failure })
        }
        Command::Train => train_command(config),
        Command::CheckGrad => {
            let report = empirical_gradient_check(config)?;
            let mut artifacts = Artifacts::new();
            artifacts.add_json("grad_check.json", &report)?;
            let failure = (!report.passed)
                .then(|| LabError::Verification(format!("max relative error {:.3e}", report.max_rel_error())));
            Ok(CommandOutput { artifacts, seeds: vec![config.run.seed], failure })
        }
        Command::CheckAssumptions => {
            let m = &config.model;
            let report = check_assumptions(m.d, m.n, m.dh, config.eta(), m.confidence)?;
            let mut artifacts = Artifacts::new();
            artifacts.add_json("assumptions.json", &report)?;
            Ok(CommandOutput::ok(artifacts, vec![]))
        }
        Command::Oracle => {
            let m = &config.model;
            let v = &config.verify;
            let oc = OracleConfig { samples: v.samples, seed: config.run.seed, k: v.k };
            let moments = mc_moment_oracle(m.d, oc)?;
            let sequence = mc_sequence_oracle(m.d, m.n, oc)?;
            let mut checks = oracle_checks(&moments, v.k, "moments:");
            checks.extend(oracle_checks(&sequence, v.k, "sequence:"));
            let failed: Vec<String> =
                checks.iter().filter(|c| !c.passed && !c.reference).map(|c| c.name.clone()).collect();
            let mut artifacts = Artifacts::new();
            artifacts.add_json(
                "oracle_report.json",
                &json!({ "d": m.d, "n": m.n, "samples": v.samples, "passed": failed.is_empty(), "checks": checks }),
            )?;
            let failure = (!failed.is_empty()).then(|| LabError::Verification(failed.join(", ")));
            Ok(CommandOutput { artifacts, seeds: vec![config.run.seed], failure })
        }
    }
}

fn trace_table(trace: &DynamicsTrace) -> Table {
    let mut t = Table::new(DynamicsTrace::columns());
    for r in trace.rows() {
        t.push(r.into_iter().map(crate::output::Cell::from).collect());
    }
    t
}

fn train_command(config: &LabConfig) -> LabResult<CommandOutput> {
    let m = &config.model;
    let tc = config.train_config(m.d, m.n, m.dh, config.run.seed);
    let mut artifacts = Artifacts::new();
    let model = match train(&tc) {
        Ok(model) => model,
        Err(LabError::Diverged(msg)) => {
            artifacts.add_json("train_summary.json", &json!({ "status": "diverged", "error": msg }))?;
            return Ok(CommandOutput {
                artifacts,
                seeds: vec![config.run.seed],
                failure: Some(LabError::Diverged(msg)),
            });
        }
        Err(e) => return Err(e),
    };
    let ckpt = Checkpoint::from_params(&model.params, config.run.seed);
    let mut bytes = serde_json::to_vec_pretty(&ckpt)?;
    bytes.push(b'\n');
    artifacts.add_bytes("model.json", bytes);
    match &model.trace {
        Some(trace) => artifacts.add_table("trace.csv", &trace_table(trace))?,
        None => {
            let mut t = Table::new(&["epoch", "loss", "wdelta_norm"]);
            for (e, (l, w)) in model.losses.iter().zip(&model.wdelta_norms).enumerate() {
                t.push(row![e, *l, *w]);
            }
            artifacts.add_table("losses.csv", &t)?;
        }
    }
    let test = test_loss(&model.params, &tc, config.data.test_prompts)?;
    let theory = theoretical_loss(m.d, m.n)?;
    artifacts.add_json(
        "train_summary.json",
        &json!({
            "status": "ok",
            "mode": tc.mode,
            "eta": tc.eta,
            "iterations": model.iterations,
            "converged": model.converged,
            "test_loss": test,
            "theoretical_loss": theory.loss,
            "bound": theory.bound,
        }),
    )?;
    Ok(CommandOutput::ok(artifacts, vec![config.run.seed]))
}

/// Runs `command`, writes its artifacts and manifest under `config.run.out`,
/// and returns the manifest with the command's failure, if any.
pub fn run_and_write(command: Command, config: &LabConfig) -> LabResult<(RunManifest, Option<LabError>)> {
    let started = Utc::now();
    let output = execute(command, config)?;
    let manifest = write_run(Path::new(&config.run.out), command.name(), config, output.seeds, started, &output.artifacts)?;
    Ok((manifest, output.failure))
}
