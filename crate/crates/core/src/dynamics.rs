//! Inner-product dynamics of population training.
//!
//! With `W_B = [b_1 … b_d b]` and `W_C = [c_1 … c_d c]`, the population
//! loss depends on the parameters only through the Gram-type products
//! collected in [`InnerProductState`]. This module records them, checks the
//! three induction properties (norm sandwich, exponential decay of the
//! residuals, bounded cross interactions), evaluates the dimension and
//! step-size assumptions, and fits the observed convergence rate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::ssm::MambaParams;
use crate::theory::{Betas, TheoryConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProductState {
    pub t: usize,
    /// `b_iᵀb_i`.
    pub bb_diag: Vec<f64>,
    /// `c_iᵀc_i`.
    pub cc_diag: Vec<f64>,
    /// `bᵀb`.
    pub bnorm: f64,
    /// `c_iᵀb_i`.
    pub cb_diag: Vec<f64>,
    /// `c_iᵀb_j` for `i ≠ j`; the diagonal is zero.
    pub cb_off: DMatrix<f64>,
    /// `c_iᵀb`.
    pub cb_bias: Vec<f64>,
    /// `b_iᵀb_j` for `i ≠ j`; the diagonal is zero.
    pub bb_off: DMatrix<f64>,
    /// `c_iᵀc_j` for `i ≠ j`; the diagonal is zero.
    pub cc_off: DMatrix<f64>,
    /// `b_iᵀb`.
    pub bbias_cross: Vec<f64>,
}

fn split_diag(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let diag = m.diagonal().iter().copied().collect();
    let mut off = m;
    off.fill_diagonal(0.0);
    (diag, off)
}

fn max_abs_off(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// All nine families from one parameter snapshot.
pub fn inner_products(params: &MambaParams, t: usize) -> InnerProductState {
    let b = params.input_b();
    let c = params.input_c();
    let bias = params.label_b();
    let (bb_diag, bb_off) = split_diag(b.tr_mul(&b));
    let (cc_diag, cc_off) = split_diag(c.tr_mul(&c));
    let (cb_diag, cb_off) = split_diag(c.tr_mul(&b));
    InnerProductState {
        t,
        bb_diag,
        cc_diag,
        bnorm: bias.norm_squared(),
        cb_diag,
        cb_off,
        cb_bias: c.tr_mul(&bias).iter().copied().collect(),
        bb_off,
        cc_off,
        bbias_cross: b.tr_mul(&bias).iter().copied().collect(),
    }
}

impl InnerProductState {
    /// `max_i |β3 − β1 c_iᵀb_i|`.
    pub fn diag_residual(&self, betas: &Betas) -> f64 {
        self.cb_diag.iter().fold(0.0, |acc, &x| acc.max((betas.beta3 - betas.beta1 * x).abs()))
    }

    /// `max_i |c_iᵀb_i − β3/β1|`, `max_{i≠j} |c_iᵀb_j|` and `max_i |c_iᵀb|`.
    pub fn convergence_residuals(&self, betas: &Betas) -> (f64, f64, f64) {
        let target = betas.target();
        let diag = self.cb_diag.iter().fold(0.0, |acc: f64, &x| acc.max((x - target).abs()));
        (diag, max_abs_off(&self.cb_off), max_abs(&self.cb_bias))
    }

    /// Largest cross interaction entering `δ(t)`.
    pub fn max_cross(&self) -> f64 {
        max_abs_off(&self.bb_off).max(max_abs_off(&self.cc_off)).max(max_abs(&self.bbias_cross))
    }

    fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.bb_diag.iter().chain(&self.cc_diag).copied().chain(std::iter::once(self.bnorm))
    }
}

/// Running maximum defining `δ(t)`, started at `2√(d_h ln(4d(2d+1)/δ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningDelta {
    value: f64,
}

impl RunningDelta {
    pub fn new(consts: &TheoryConstants) -> Self {
        Self { value: consts.delta_floor() }
    }

    pub fn update(&mut self, state: &InnerProductState) -> f64 {
        self.value = self.value.max(state.max_cross());
        self.value
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Worst-case slack of each inequality (right side minus left side).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyMargins {
    pub norm_lower: f64,
    pub norm_upper: f64,
    pub diag_decay: f64,
    pub off_decay: f64,
    pub bias_decay: f64,
    pub cross: f64,
    pub cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub t: usize,
    pub delta_t: f64,
    pub gamma: f64,
    pub delta_max: f64,
    pub holds_a: bool,
    pub holds_b: bool,
    pub holds_c: bool,
    pub margins: PropertyMargins,
}

/// Evaluates the norm sandwich (A), the decay bounds (B) and the
/// cross-interaction cap (C) at one snapshot.
pub fn check_properties(state: &InnerProductState, consts: &TheoryConstants, eta: f64, delta_t: f64) -> PropertyReport {
    let d_h = consts.d_h as f64;
    let t = state.t as f64;
    let (lo, hi) = state.norms().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let decay1 = (-eta * consts.beta1 * consts.gamma * t).exp();
    let decay2 = (-eta * consts.beta2 * consts.gamma * t).exp();
    let margins = PropertyMargins {
        norm_lower: lo - d_h / 2.0,
        norm_upper: 2.0 * d_h - hi,
        diag_decay: delta_t * decay1 - state.diag_residual(&consts.betas()),
        off_decay: 2.0 * delta_t * decay1 - max_abs_off(&state.cb_off),
        bias_decay: 2.0 * delta_t * decay2 + delta_t / consts.beta2 * decay1 - max_abs(&state.cb_bias),
        cross: delta_t - state.max_cross(),
        cap: consts.delta_max - delta_t,
    };
    PropertyReport {
        t: state.t,
        delta_t,
        gamma: consts.gamma,
        delta_max: consts.delta_max,
        holds_a: margins.norm_lower >= 0.0 && margins.norm_upper >= 0.0,
        holds_b: margins.diag_decay >= 0.0 && margins.off_decay >= 0.0 && margins.bias_decay >= 0.0,
        holds_c: margins.cross >= 0.0 && margins.cap >= 0.0,
        margins,
    }
}

/// One named requirement of the convergence theorem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    /// Non-negative when satisfied.
    pub margin: f64,
    pub passed: bool,
}

impl Constraint {
    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        let margin = value - limit;
        Self { name: name.into(), value, limit, margin, passed: margin >= 0.0 }
    }

    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        let margin = limit - value;
        Self { name: name.into(), value, limit, margin, passed: margin >= 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub d: usize,
    pub n: usize,
    pub d_h: usize,
    pub eta: f64,
    pub confidence: f64,
    /// `λ1 … λ11`.
    pub lambdas: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub satisfied: bool,
}

impl AssumptionReport {
    pub fn constraint(&self, name: &str) -> Option<&Constraint> {
        self.constraints.iter().find(|c| c.name == name)
    }
}

/// The eleven lower bounds on `d_h` required by the convergence proof.
pub fn lambda_bounds(consts: &TheoryConstants, eta: f64) -> [f64; 11] {
    let d = consts.d as f64;
    let (b1, b2, b3) = (consts.beta1, consts.beta2, consts.beta3);
    let l = consts.log_term();
    let ln2 = std::f64::consts::LN_2;
    [
        (1728.0 * l + 576.0 * (d - 1.0) * b1 * l) / b1,
        (576.0 * l + 192.0 * l) / b1,
        (1728.0 * l + (576.0 * d + 1872.0) * b1 * l) / b1,
        576.0 * l / b1 + 192.0 * (d - 1.0) * l + 384.0 * l / b1 + 3840.0 * ln2 * l,
        2448.0 * d * l,
        816.0 * d * l + 768.0 * ln2 * d * d * l + 48.0 * l / b1,
        (1.0 / l.sqrt() + 24.0 * l.sqrt() * (8.0 * b1 * (d - 1.0) + 10.0 + 6.0 * b1 + 12.0 * eta * b1 / d)).powi(2),
        36.0 * l * (8.0 / b1 + 8.0 * (d - 2.0) + 6.0 + 12.0 / d).powi(2),
        36.0 * l * (4.0 * (d - 1.0) + 56.0 * d * ln2).powi(2),
        36.0 * l * (6.0 + 4.0 * b1 * (d - 1.0) + 2.0 * (d - 1.0)).powi(2),
        36.0 / 1.5f64.ln().powi(2)
            * l
            * (32.0 * d / b1 + 8.0 * b3 / b1 + 32.0 * d + 8.0 / b1 + 4.0 / (b1 * b2) + 80.0 * ln2).powi(2),
    ]
}

/// Smallest `N` admitted by the theorem: `max(2ln2/(ln6 − ln5), 3(d+1)ln2/2)`.
pub fn min_context_len(d: usize) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    (2.0 * ln2 / (6f64.ln() - 5f64.ln())).max(3.0 * (d as f64 + 1.0) * ln2 / 2.0)
}

/// Largest admitted step size `1/(2d²d_h)`.
pub fn max_learning_rate(d: usize, d_h: usize) -> f64 {
    1.0 / (2.0 * (d * d) as f64 * d_h as f64)
}

/// Evaluates every assumption of the convergence theorem. Failing
/// constraints are reported, not raised.
pub fn check_assumptions(d: usize, n: usize, d_h: usize, eta: f64, confidence: f64) -> Result<AssumptionReport> {
    if !(eta > 0.0) {
        return Err(config_err(format!("eta must be positive, got {eta}")));
    }
    let consts = TheoryConstants::new(d, n, d_h, confidence)?;
    let lambdas = lambda_bounds(&consts, eta);
    let mut constraints: Vec<Constraint> = lambdas
        .iter()
        .enumerate()
        .map(|(k, &lam)| Constraint::at_least(&format!("d_h >= lambda{}", k + 1), d_h as f64, lam))
        .collect();
    constraints.push(Constraint::at_least("N >= N_min", n as f64, min_context_len(d)));
    constraints.push(Constraint::at_most("eta <= 1/(2 d^2 d_h)", eta, max_learning_rate(d, d_h)));
    constraints.push(Constraint::at_most(
        "eta <= ln2/(beta2 d_h)",
        eta,
        std::f64::consts::LN_2 / (consts.beta2 * d_h as f64),
    ));
    let satisfied = constraints.iter().all(|c| c.passed);
    Ok(AssumptionReport { d, n, d_h, eta, confidence, lambdas: lambdas.to_vec(), constraints, satisfied })
}

/// One recorded iteration of a population run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub state: InnerProductState,
    /// `max_i |c_iᵀb_i − β3/β1|`.
    pub diag_error: f64,
    /// `max_{i≠j} |c_iᵀb_j|`.
    pub off_error: f64,
    /// `max_i |c_iᵀb|`.
    pub bias_error: f64,
    /// `max_i |β3 − β1 c_iᵀb_i|`.
    pub residual: f64,
    pub loss: f64,
    pub properties: PropertyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub eta: f64,
    pub consts: TheoryConstants,
    pub records: Vec<TraceRecord>,
}

impl DynamicsTrace {
    pub fn new(eta: f64, consts: TheoryConstants) -> Self {
        Self { eta, consts, records: Vec::new() }
    }

    /// Column names matching [`DynamicsTrace::rows`].
    pub fn columns() -> &'static [&'static str] {
        &[
            "t",
            "bb_diag_min",
            "bb_diag_max",
            "cc_diag_min",
            "cc_diag_max",
            "bnorm",
            "cb_diag_min",
            "cb_diag_max",
            "cb_off_maxabs",
            "cb_bias_maxabs",
            "bb_off_maxabs",
            "cc_off_maxabs",
            "bbias_cross_maxabs",
            "diag_error",
            "residual",
            "loss",
            "delta_t",
            "margin_norm_lower",
            "margin_norm_upper",
            "margin_diag_decay",
            "margin_off_decay",
            "margin_bias_decay",
            "margin_cross",
            "margin_cap",
        ]
    }

    /// One numeric row per record, in [`DynamicsTrace::columns`] order.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.records
            .iter()
            .map(|r| {
                let s = &r.state;
                let m = &r.properties.margins;
                vec![
                    s.t as f64,
                    min(&s.bb_diag),
                    max(&s.bb_diag),
                    min(&s.cc_diag),
                    max(&s.cc_diag),
                    s.bnorm,
                    min(&s.cb_diag),
                    max(&s.cb_diag),
                    r.off_error,
                    r.bias_error,
                    max_abs_off(&s.bb_off),
                    max_abs_off(&s.cc_off),
                    max_abs(&s.bbias_cross),
                    r.diag_error,
                    r.residual,
                    r.loss,
                    r.properties.delta_t,
                    m.norm_lower,
                    m.norm_upper,
                    m.diag_decay,
                    m.off_decay,
                    m.bias_decay,
                    m.cross,
                    m.cap,
                ]
            })
            .collect()
    }
}

/// Builds trace records from successive snapshots, carrying `δ(t)`.
#[derive(Debug, Clone)]
pub struct TraceRecorder {
    trace: DynamicsTrace,
    delta: RunningDelta,
}

impl TraceRecorder {
    pub fn new(eta: f64, consts: TheoryConstants) -> Self {
        Self { delta: RunningDelta::new(&consts), trace: DynamicsTrace::new(eta, consts) }
    }

    /// Updates `δ(t)` from this snapshot and returns its record; call on
    /// every iteration so the running maximum sees all states, with `keep`
    /// selecting which records are stored.
    pub fn observe(&mut self, params: &MambaParams, t: usize, loss: f64, keep: bool) -> TraceRecord {
        let state = inner_products(params, t);
        let delta_t = self.delta.update(&state);
        let betas = self.trace.consts.betas();
        let (diag_error, off_error, bias_error) = state.convergence_residuals(&betas);
        let record = TraceRecord {
            residual: state.diag_residual(&betas),
            properties: check_properties(&state, &self.trace.consts, self.trace.eta, delta_t),
            state,
            diag_error,
            off_error,
            bias_error,
            loss,
        };
        if keep {
            self.trace.records.push(record.clone());
        }
        record
    }

    pub fn finish(self) -> DynamicsTrace {
        self.trace
    }
}

/// Least-squares fit of `ln r(t) = c − κ t` over the samples whose residual
/// lies in `[1e−8, 1e−1]`. Returns `κ`.
pub fn fit_log_linear_rate(points: &[(f64, f64)]) -> Result<f64> {
    let window: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(_, r)| (1e-8..=1e-1).contains(&r))
        .map(|&(t, r)| (t, r.ln()))
        .collect();
    if window.len() < 3 {
        return Err(Error::FitWindow(format!(
            "{} of {} samples have residual in [1e-8, 1e-1]",
            window.len(),
            points.len()
        )));
    }
    let m = window.len() as f64;
    let t_mean = window.iter().map(|p| p.0).sum::<f64>() / m;
    let y_mean = window.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = window.iter().map(|&(t, y)| (t - t_mean) * (y - y_mean)).sum();
    let sxx: f64 = window.iter().map(|&(t, _)| (t - t_mean).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::FitWindow("all fit samples share one iteration".into()));
    }
    Ok(-sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub fitted: f64,
    /// `ηβ1γ`.
    pub predicted: f64,
    pub ratio: f64,
}

/// Fits the decay of `max_i |β3 − β1 c_iᵀb_i|` and compares it with `ηβ1γ`.
pub fn fit_convergence_rate(trace: &DynamicsTrace) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = trace.records.iter().map(|r| (r.state.t as f64, r.residual)).collect();
    let fitted = fit_log_linear_rate(&points)?;
    let predicted = trace.eta * trace.consts.beta1 * trace.consts.gamma;
    Ok(RateFit { fitted, predicted, ratio: fitted / predicted })
}
