//! Figure and table reproductions.

use mamba_icl::dynamics::DynamicsTrace;
use mamba_icl::ssm::{projected_states, MambaParams};
use mamba_icl::theory::{linear_attention_optimal_loss, theoretical_loss};
use mamba_icl::training::{train_empirical, train_population, Mode, TrainConfig};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::error::{LabError, LabResult};
use crate::output::{Artifacts, Table};
use crate::row;

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub initial: MambaParams,
    pub params: MambaParams,
    /// Population iterations or empirical epochs performed.
    pub iterations: usize,
    /// Population runs only: whether the residual tolerance was reached.
    pub converged: bool,
    /// Population: recorded population losses. Empirical: loss per epoch.
    pub losses: Vec<f64>,
    /// Empirical only: `‖w_Δ‖` per epoch.
    pub wdelta_norms: Vec<f64>,
    pub trace: Option<DynamicsTrace>,
}

/// Trains according to `config.mode`.
pub fn train(config: &TrainConfig) -> LabResult<TrainedModel> {
    match config.mode {
        Mode::Population => {
            let run = train_population(config)?;
            Ok(TrainedModel {
                initial: run.initial,
                params: run.params,
                iterations: run.iterations,
                converged: run.converged,
                losses: run.trace.records.iter().map(|r| r.loss).collect(),
                wdelta_norms: Vec::new(),
                trace: Some(run.trace),
            })
        }
        Mode::Empirical => {
            let data = config.train_set()?;
            let run = train_empirical(config, &data)?;
            Ok(TrainedModel {
                initial: run.initial,
                params: run.params,
                iterations: config.iterations,
                converged: false,
                losses: run.losses,
                wdelta_norms: run.wdelta_norms,
                trace: None,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestLoss {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

/// Mean squared-error loss on `count` fresh prompts from the test stream.
pub fn test_loss(params: &MambaParams, config: &TrainConfig, count: usize) -> LabResult<TestLoss> {
    let prompts = config.test_set(count)?;
    let losses: Vec<f64> = prompts
        .par_iter()
        .map(|p| mamba_icl::ssm::predict(params, p).map(|y| 0.5 * (y - p.y_q).powi(2)))
        .collect::<Result<_, _>>()?;
    let (mean, sd) = mean_std(&losses);
    Ok(TestLoss { mean, std_error: sd / (count as f64).sqrt(), count })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub n: usize,
    pub d_h: usize,
    pub trial: usize,
    pub seed: u64,
    pub iterations: usize,
    /// `None` when training diverged.
    pub test: Option<TestLoss>,
    pub error: Option<String>,
}

/// Trains and tests one model per `(d, n, d_h, trial)`; divergence is
/// recorded in the outcome instead of aborting the sweep.
fn run_trials(config: &LabConfig, d: usize, points: &[(usize, usize)]) -> LabResult<Vec<TrialOutcome>> {
    let jobs: Vec<(usize, usize, usize)> =
        points.iter().flat_map(|&(n, d_h)| (0..config.run.trials).map(move |t| (n, d_h, t))).collect();
    jobs.par_iter()
        .map(|&(n, d_h, trial)| {
            let seed = config.run.seed + trial as u64;
            let tc = config.train_config(d, n, d_h, seed);
            match train(&tc) {
                Ok(model) => {
                    let test = test_loss(&model.params, &tc, config.data.test_prompts)?;
                    Ok(TrialOutcome { n, d_h, trial, seed, iterations: model.iterations, test: Some(test), error: None })
                }
                Err(LabError::Diverged(msg)) => {
                    Ok(TrialOutcome { n, d_h, trial, seed, iterations: 0, test: None, error: Some(msg) })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn trials_table(outcomes: &[TrialOutcome]) -> Table {
    let mut t = Table::new(&["N", "d_h", "trial", "seed", "status", "iterations", "test_loss", "test_se"]);
    for o in outcomes {
        let (status, loss, se) = match o.test {
            Some(l) => ("ok", l.mean, l.std_error),
            None => ("diverged", f64::NAN, f64::NAN),
        };
        t.push(row![o.n, o.d_h, o.trial, o.seed, status, o.iterations, loss, se]);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mean_loss: f64,
    /// Standard deviation of the per-trial test losses.
    pub std_loss: f64,
    /// Standard error of `mean_loss` from the per-trial standard errors.
    pub std_error: f64,
    pub completed: usize,
    pub diverged: usize,
}

fn summarize(outcomes: &[TrialOutcome]) -> SweepPoint {
    let ok: Vec<TestLoss> = outcomes.iter().filter_map(|o| o.test).collect();
    let means: Vec<f64> = ok.iter().map(|t| t.mean).collect();
    let (mean_loss, std_loss) = mean_std(&means);
    let k = ok.len() as f64;
    let std_error = ok.iter().map(|t| t.std_error.powi(2)).sum::<f64>().sqrt() / k;
    SweepPoint { mean_loss, std_loss, std_error, completed: ok.len(), diverged: outcomes.len() - ok.len() }
}

// ---------------------------------------------------------------------------
// Figures

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub n: usize,
    pub bound: f64,
    pub theoretical_loss: f64,
    #[serde(flatten)]
    pub sweep: SweepPoint,
    /// `mean_loss ≤ bound + 2·SE`.
    pub under_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureSummary {
    pub d: usize,
    pub n: usize,
    pub d_h: usize,
    pub mode: Mode,
    pub eta: f64,
    pub iterations: usize,
    /// Largest off-diagonal `|CᵀB|` entry over the mean diagonal entry, after training.
    pub off_diagonal_ratio: f64,
    /// Largest `|Cᵀb|` entry over the mean diagonal entry, after training.
    pub bias_ratio: f64,
    pub final_cosine: f64,
    /// Fraction of consecutive decile checkpoints where the mean cosine increases.
    pub cosine_increasing_fraction: f64,
    pub loss_curve: Vec<LossPoint>,
}

/// Heatmap entries `CᵀW_B = [CᵀB | Cᵀb]`, d × (d+1).
pub fn heatmap(params: &MambaParams) -> DMatrix<f64> {
    params.input_c().tr_mul(&params.w_b)
}

/// `(max off-diagonal, max |Cᵀb|)` relative to the mean diagonal of `CᵀB`.
pub fn diagonal_dominance(params: &MambaParams) -> (f64, f64) {
    let m = heatmap(params);
    let d = params.dims.d;
    let diag = (0..d).map(|i| m[(i, i)]).sum::<f64>() / d as f64;
    let mut off: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                off = off.max(m[(i, j)].abs());
            }
        }
    }
    let bias = m.column(d).amax();
    (off / diag.abs(), bias / diag.abs())
}

/// Mean and standard error of `cos(h̃_l, w)` for `l = 1..=N`.
pub fn cosine_trace(params: &MambaParams, config: &TrainConfig, prompts: usize) -> LabResult<Vec<(f64, f64)>> {
    let test = config.test_set(prompts)?;
    let n = config.n;
    let per_prompt: Vec<Vec<f64>> = test
        .par_iter()
        .map(|p| {
            let states = projected_states(params, p)?;
            let wn = p.w.norm();
            Ok(states.iter().map(|h| h.dot(&p.w) / (h.norm() * wn).max(f64::MIN_POSITIVE)).collect())
        })
        .collect::<Result<_, mamba_icl::Error>>()?;
    Ok((0..n)
        .map(|l| {
            let column: Vec<f64> = per_prompt.iter().map(|v| v[l]).collect();
            let (mean, sd) = mean_std(&column);
            (mean, sd / (prompts as f64).sqrt())
        })
        .collect())
}

/// Fraction of the nine steps between decile checkpoints `l = ⌈kN/10⌉`
/// over which `values` increases.
pub fn decile_increase_fraction(values: &[f64]) -> f64 {
    let n = values.len();
    let marks: Vec<usize> = (1..=10).map(|k| (k * n).div_ceil(10).max(1) - 1).collect();
    let steps: Vec<bool> = marks.windows(2).filter(|w| w[0] != w[1]).map(|w| values[w[1]] > values[w[0]]).collect();
    if steps.is_empty() {
        return 1.0;
    }
    steps.iter().filter(|&&up| up).count() as f64 / steps.len() as f64
}

/// Heatmap before/after training, cosine trace, and the loss-vs-N sweep.
pub fn run_figure_suite(config: &LabConfig) -> LabResult<(Artifacts, FigureSummary)> {
    config.validate()?;
    let m = &config.model;
    let tc = config.train_config(m.d, m.n, m.dh, config.run.seed);
    let model = train(&tc)?;
    let mut artifacts = Artifacts::new();

    let mut heat = Table::new(&["stage", "row", "col", "value"]);
    for (stage, p) in [("before", &model.initial), ("after", &model.params)] {
        let h = heatmap(p);
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                heat.push(row![stage, i, j, h[(i, j)]]);
            }
        }
    }
    artifacts.add_table("heatmap.csv", &heat)?;

    let cos = cosine_trace(&model.params, &tc, config.figures.cosine_prompts)?;
    let mut cos_table = Table::new(&["l", "mean_cosine", "se_cosine"]);
    for (l, (mean, se)) in cos.iter().enumerate() {
        cos_table.push(row![l + 1, *mean, *se]);
    }
    artifacts.add_table("cosine_trace.csv", &cos_table)?;

    let points: Vec<(usize, usize)> = config.figures.n_values.iter().map(|&n| (n, m.dh)).collect();
    let outcomes = run_trials(config, m.d, &points)?;
    artifacts.add_table("loss_vs_n_trials.csv", &trials_table(&outcomes))?;
    let mut curve = Table::new(&["N", "mean_loss", "std_loss", "bound", "theoretical_loss"]);
    let mut loss_curve = Vec::new();
    for &n in &config.figures.n_values {
        let group: Vec<TrialOutcome> = outcomes.iter().filter(|o| o.n == n).cloned().collect();
        let sweep = summarize(&group);
        let theory = theoretical_loss(m.d, n)?;
        curve.push(row![n, sweep.mean_loss, sweep.std_loss, theory.bound, theory.loss]);
        loss_curve.push(LossPoint {
            n,
            bound: theory.bound,
            theoretical_loss: theory.loss,
            sweep,
            under_bound: sweep.mean_loss <= theory.bound + 2.0 * sweep.std_error,
        });
    }
    artifacts.add_table("loss_vs_n.csv", &curve)?;

    let (off_diagonal_ratio, bias_ratio) = diagonal_dominance(&model.params);
    let means: Vec<f64> = cos.iter().map(|c| c.0).collect();
    let summary = FigureSummary {
        d: m.d,
        n: m.n,
        d_h: m.dh,
        mode: m.mode,
        eta: tc.eta,
        iterations: model.iterations,
        off_diagonal_ratio,
        bias_ratio,
        final_cosine: *means.last().unwrap_or(&f64::NAN),
        cosine_increasing_fraction: decile_increase_fraction(&means),
        loss_curve,
    };
    artifacts.add_json("figures_summary.json", &summary)?;
    Ok((artifacts, summary))
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortContextRow {
    pub n: usize,
    pub theoretical_loss: f64,
    #[serde(flatten)]
    pub sweep: SweepPoint,
    /// `|experimental − theoretical| / theoretical`.
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub d_h: usize,
    pub theoretical_loss: f64,
    #[serde(flatten)]
    pub sweep: SweepPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub baseline: Vec<(usize, f64, f64)>,
    pub short_context: Vec<ShortContextRow>,
    /// `‖w_Δ‖` at epoch 0 and at the last epoch.
    pub wdelta_initial: f64,
    pub wdelta_final: f64,
    pub hidden_width: Vec<WidthRow>,
}

/// Mamba vs linear attention: theoretical losses only.
pub fn baseline_table(d: usize, ns: &[usize]) -> LabResult<(Table, Vec<(usize, f64, f64)>)> {
    let mut t = Table::new(&["N", "mamba_loss", "linear_attention_loss"]);
    let mut rows = Vec::new();
    for &n in ns {
        let mamba = theoretical_loss(d, n)?.loss;
        let la = linear_attention_optimal_loss(d, n)?;
        t.push(row![n, mamba, la]);
        rows.push((n, mamba, la));
    }
    Ok((t, rows))
}

/// Empirical training with `w_Δ` trainable from a random start; returns
/// `‖w_Δ‖` after each epoch (entry 0 is the initial value).
pub fn wdelta_run(config: &LabConfig) -> LabResult<Vec<f64>> {
    let m = &config.model;
    let mut tc = config.train_config(m.d, m.n, m.dh, config.run.seed);
    tc.mode = Mode::Empirical;
    tc.train_wdelta = true;
    tc.iterations = config.tables.wdelta_epochs;
    tc.warm_start = config.tables.wdelta_warm_start;
    tc.max_step_norm = Some(config.tables.wdelta_max_step_norm);
    Ok(train(&tc)?.wdelta_norms)
}

pub fn run_table_suite(config: &LabConfig) -> LabResult<(Artifacts, TableSummary)> {
    config.validate()?;
    let t = &config.tables;
    let mut artifacts = Artifacts::new();

    let (table, baseline) = baseline_table(t.baseline_d, &t.baseline_n)?;
    artifacts.add_table("table1_baseline.csv", &table)?;

    let points: Vec<(usize, usize)> = t.short_n.iter().map(|&n| (n, config.model.dh)).collect();
    let outcomes = run_trials(config, t.short_d, &points)?;
    let mut table = Table::new(&["N", "experimental_loss", "experimental_std", "theoretical_loss", "relative_gap"]);
    let mut short_context = Vec::new();
    for &n in &t.short_n {
        let group: Vec<TrialOutcome> = outcomes.iter().filter(|o| o.n == n).cloned().collect();
        let sweep = summarize(&group);
        let theory = theoretical_loss(t.short_d, n)?.loss;
        let gap = (sweep.mean_loss - theory).abs() / theory;
        table.push(row![n, sweep.mean_loss, sweep.std_loss, theory, gap]);
        short_context.push(ShortContextRow { n, theoretical_loss: theory, sweep, relative_gap: gap });
    }
    artifacts.add_table("table2_short_context.csv", &table)?;
    artifacts.add_table("table2_trials.csv", &trials_table(&outcomes))?;

    let norms = wdelta_run(config)?;
    let mut table = Table::new(&["epoch", "wdelta_norm", "wdelta_norm_sq"]);
    for (epoch, v) in norms.iter().enumerate() {
        table.push(row![epoch, *v, v * v]);
    }
    artifacts.add_table("table3_wdelta.csv", &table)?;

    let points: Vec<(usize, usize)> = t.width_dh.iter().map(|&dh| (t.width_n, dh)).collect();
    let outcomes = run_trials(config, t.width_d, &points)?;
    let theory = theoretical_loss(t.width_d, t.width_n)?.loss;
    let mut table = Table::new(&["d_h", "mean_loss", "std_loss", "theoretical_loss"]);
    let mut hidden_width = Vec::new();
    for &dh in &t.width_dh {
        let group: Vec<TrialOutcome> = outcomes.iter().filter(|o| o.d_h == dh).cloned().collect();
        let sweep = summarize(&group);
        table.push(row![dh, sweep.mean_loss, sweep.std_loss, theory]);
        hidden_width.push(WidthRow { d_h: dh, theoretical_loss: theory, sweep });
    }
    artifacts.add_table("table4_hidden_width.csv", &table)?;
    artifacts.add_table("table4_trials.csv", &trials_table(&outcomes))?;

    let summary = TableSummary {
        baseline,
        short_context,
        wdelta_initial: norms.first().copied().unwrap_or(f64::NAN),
        wdelta_final: norms.last().copied().unwrap_or(f64::NAN),
        hidden_width,
    };
    artifacts.add_json("tables_summary.json", &summary)?;
    Ok((artifacts, summary))
}
