//! Population and empirical gradient descent.
//!
//! The population trainer follows the closed-form gradient of the expected
//! loss, so its runs are free of sampling noise. The empirical trainer
//! differentiates the sampled loss by backpropagation through the scan and
//! can also train the step-size projection `w_Δ`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsTrace, TraceRecorder};
use crate::error::{config_err, Error, Result};
use crate::rng::{normal_vector, stream_rng};
use crate::ssm::{empirical_loss, sigmoid, softplus, Dims, MambaParams};
use crate::task_gen::{sample_prompts, PromptInstance};
use crate::theory::{population_loss, require_population_form, Betas, TheoryConstants};

/// Random streams derived from [`TrainConfig::seed`].
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN_DATA: u64 = 1;
    pub const STEP_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TEST_DATA: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// i.i.d. N(0, 1) entries in `W_B` and `W_C`.
    #[default]
    Gaussian,
    /// Mutually orthonormal columns.
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Population,
    Empirical,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(Mode::Population),
            "empirical" => Ok(Mode::Empirical),
            other => Err(config_err(format!("unknown mode '{other}' (expected population or empirical)"))),
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Init::Gaussian),
            "orthogonal" => Ok(Init::Orthogonal),
            other => Err(config_err(format!("unknown init '{other}' (expected gaussian or orthogonal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub n: usize,
    pub d_h: usize,
    pub eta: f64,
    /// Iterations (population) or epochs (empirical).
    pub iterations: usize,
    pub init: Init,
    pub mode: Mode,
    /// Minibatch size for empirical training; `None` is full batch.
    pub batch_size: Option<usize>,
    /// Number of training prompts for empirical training.
    pub train_prompts: usize,
    pub train_wdelta: bool,
    /// Also train `b_Δ` when `train_wdelta` is set.
    pub train_bdelta: bool,
    /// Learning rate of the `w_Δ`/`b_Δ` block.
    pub wdelta_eta: f64,
    /// Standard deviation of the random `w_Δ` initialization.
    pub wdelta_init_std: f64,
    /// Population iterations run on `W_B`, `W_C` before empirical training.
    pub warm_start: usize,
    /// Caps the Euclidean norm of each block's update.
    pub max_step_norm: Option<f64>,
    pub seed: u64,
    /// Population runs store a trace record every this many iterations.
    pub record_every: usize,
    /// Early-stop tolerance on the convergence residual.
    pub tol: f64,
    /// Failure probability used for `δ_max` in the property checks.
    pub confidence: f64,
}

impl TrainConfig {
    /// Defaults: `η = 1/(2d²d_h)`, Gaussian init, population mode.
    pub fn new(d: usize, n: usize, d_h: usize) -> Self {
        Self {
            d,
            n,
            d_h,
            eta: crate::dynamics::max_learning_rate(d.max(1), d_h.max(1)),
            iterations: 200_000,
            init: Init::Gaussian,
            mode: Mode::Population,
            batch_size: None,
            train_prompts: 3000,
            train_wdelta: false,
            train_bdelta: false,
            wdelta_eta: 0.1,
            wdelta_init_std: 0.4,
            warm_start: 0,
            max_step_norm: None,
            seed: 0,
            record_every: 10,
            tol: 1e-6,
            confidence: 0.05,
        }
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.d, self.d_h, self.n)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(config_err(format!("eta must be a finite non-negative number, got {}", self.eta)));
        }
        if !(self.wdelta_eta >= 0.0) || !(self.wdelta_init_std >= 0.0) {
            return Err(config_err("w_delta learning rate and init std must be non-negative"));
        }
        if self.record_every == 0 {
            return Err(config_err("record_every must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(config_err("batch_size must be positive"));
        }
        if self.mode == Mode::Empirical && self.train_prompts == 0 {
            return Err(config_err("empirical training needs at least one prompt"));
        }
        if let Some(m) = self.max_step_norm {
            if !(m > 0.0) {
                return Err(config_err("max_step_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Initial parameters from the `INIT` stream.
    pub fn initial_params(&self) -> Result<MambaParams> {
        let dims = self.dims()?;
        let mut rng = stream_rng(self.seed, streams::INIT);
        match self.init {
            Init::Gaussian => Ok(MambaParams::gaussian_init(dims, &mut rng)),
            Init::Orthogonal => MambaParams::orthogonal_init(dims, &mut rng),
        }
    }

    /// The training set from the `TRAIN_DATA` stream.
    pub fn train_set(&self) -> Result<Vec<PromptInstance>> {
        sample_prompts(self.d, self.n, self.train_prompts, &mut stream_rng(self.seed, streams::TRAIN_DATA))
    }

    /// `count` test prompts from the `TEST_DATA` stream.
    pub fn test_set(&self, count: usize) -> Result<Vec<PromptInstance>> {
        sample_prompts(self.d, self.n, count, &mut stream_rng(self.seed, streams::TEST_DATA))
    }
}

/// Gradient of a loss with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w_b: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub b_b: DVector<f64>,
    pub b_c: DVector<f64>,
    pub w_delta: Option<DVector<f64>>,
    pub b_delta: Option<f64>,
}

impl ParamGrads {
    pub fn zeros(dims: Dims, with_step: bool) -> Self {
        Self {
            w_b: DMatrix::zeros(dims.d_h, dims.token()),
            w_c: DMatrix::zeros(dims.d_h, dims.token()),
            b_b: DVector::zeros(dims.d_h),
            b_c: DVector::zeros(dims.d_h),
            w_delta: with_step.then(|| DVector::zeros(dims.token())),
            b_delta: with_step.then_some(0.0),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.w_b += &other.w_b;
        self.w_c += &other.w_c;
        self.b_b += &other.b_b;
        self.b_c += &other.b_c;
        if let (Some(a), Some(b)) = (self.w_delta.as_mut(), other.w_delta.as_ref()) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.b_delta.as_mut(), other.b_delta) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.w_b *= s;
        self.w_c *= s;
        self.b_b *= s;
        self.b_c *= s;
        if let Some(v) = self.w_delta.as_mut() {
            *v *= s;
        }
        if let Some(v) = self.b_delta.as_mut() {
            *v *= s;
        }
    }

    /// Largest absolute entry over all blocks.
    pub fn amax(&self) -> f64 {
        let mut m = self.w_b.amax().max(self.w_c.amax()).max(self.b_b.amax()).max(self.b_c.amax());
        if let Some(v) = &self.w_delta {
            m = m.max(v.amax());
        }
        if let Some(v) = self.b_delta {
            m = m.max(v.abs());
        }
        m
    }
}

/// Closed-form gradient of the population loss. Valid for `A = −I`,
/// `w_Δ = 0` and zero biases:
///
/// * `∇B = β1 C CᵀB − β3 C`
/// * `∇C = β1 B BᵀC + β2 b bᵀC − β3 B`
/// * `∇b = β2 C Cᵀb`
///
/// The biases and the label column of `W_C` receive zero gradient.
pub fn population_gradients(params: &MambaParams, betas: &Betas) -> Result<ParamGrads> {
    require_population_form(params)?;
    let dims = params.dims;
    let b = params.input_b();
    let c = params.input_c();
    let bias = params.label_b();
    let ctb = c.tr_mul(&b);
    let btc = ctb.transpose();
    let ctbias = c.tr_mul(&bias);
    let mut grads = ParamGrads::zeros(dims, false);
    let grad_b = c * (&ctb * betas.beta1) - c * betas.beta3;
    let grad_c = b * (&btc * betas.beta1) + bias * (ctbias.transpose() * betas.beta2) - b * betas.beta3;
    let grad_bias = c * (&ctbias * betas.beta2);
    grads.w_b.columns_mut(0, dims.d).copy_from(&grad_b);
    grads.w_b.set_column(dims.d, &grad_bias);
    grads.w_c.columns_mut(0, dims.d).copy_from(&grad_c);
    Ok(grads)
}

/// Factor that shrinks a step of norm `norm` to at most `cap`.
fn clip_factor(norm: f64, cap: Option<f64>) -> f64 {
    match cap {
        Some(cap) if norm > cap => cap / norm,
        _ => 1.0,
    }
}

/// `θ ← θ − lr·∇`, with `step_eta` for the `w_Δ`/`b_Δ` block and an
/// optional per-block cap on the update norm.
pub fn apply_update(params: &mut MambaParams, grads: &ParamGrads, eta: f64, step_eta: f64, max_step_norm: Option<f64>) {
    let cap = max_step_norm;
    params.w_b -= &grads.w_b * (eta * clip_factor(eta * grads.w_b.norm(), cap));
    params.w_c -= &grads.w_c * (eta * clip_factor(eta * grads.w_c.norm(), cap));
    params.b_b -= &grads.b_b * (eta * clip_factor(eta * grads.b_b.norm(), cap));
    params.b_c -= &grads.b_c * (eta * clip_factor(eta * grads.b_c.norm(), cap));
    if let Some(g) = &grads.w_delta {
        params.w_delta -= g * (step_eta * clip_factor(step_eta * g.norm(), cap));
    }
    if let Some(g) = grads.b_delta {
        let mut step = g * step_eta;
        if let Some(cap) = max_step_norm {
            step = step.clamp(-cap, cap);
        }
        params.b_delta -= step;
    }
}

/// One simultaneous population gradient step.
pub fn population_step(params: &mut MambaParams, betas: &Betas, eta: f64) -> Result<()> {
    let grads = population_gradients(params, betas)?;
    apply_update(params, &grads, eta, 0.0, None);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PopulationRun {
    pub initial: MambaParams,
    pub params: MambaParams,
    pub trace: DynamicsTrace,
    /// Iterations actually performed.
    pub iterations: usize,
    pub converged: bool,
}

fn max_column_norm_sq(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm_squared()).fold(0.0, f64::max)
}

/// Population gradient descent from `config.initial_params()`.
///
/// Stops once `max(|CᵀB − (β3/β1)I|, |Cᵀb|) < tol` entrywise; aborts with
/// [`Error::Diverged`] if any inner product exceeds `10·d_h`.
pub fn train_population(config: &TrainConfig) -> Result<PopulationRun> {
    config.validate()?;
    train_population_from(config, config.initial_params()?)
}

/// Population gradient descent from given parameters.
pub fn train_population_from(config: &TrainConfig, initial: MambaParams) -> Result<PopulationRun> {
    config.validate()?;
    let consts = TheoryConstants::new(config.d, config.n, config.d_h, config.confidence)?;
    let betas = consts.betas();
    let mut params = initial.clone();
    let mut recorder = TraceRecorder::new(config.eta, consts);
    let limit = 10.0 * config.d_h as f64;
    let mut converged = false;
    let mut t = 0;
    loop {
        let loss = population_loss(&params, &betas)?;
        let keep = t % config.record_every == 0;
        let record = recorder.observe(&params, t, loss, keep);
        let size = max_column_norm_sq(&params.w_b).max(max_column_norm_sq(&params.w_c));
        if !size.is_finite() || size > limit {
            return Err(Error::Diverged {
                iteration: t,
                reason: format!("an inner product reached {size:.3e} > 10 d_h = {limit}"),
            });
        }
        let residual = record.diag_error.max(record.off_error).max(record.bias_error);
        if residual < config.tol {
            converged = true;
        }
        if converged || t == config.iterations {
            if !keep {
                recorder.observe(&params, t, loss, true);
            }
            break;
        }
        population_step(&mut params, &betas, config.eta)?;
        t += 1;
    }
    Ok(PopulationRun { initial, params, trace: recorder.finish(), iterations: t, converged })
}

// ---------------------------------------------------------------------------
// Empirical gradients

/// Per-prompt contribution `r · ∂ŷ/∂θ` by backpropagation through the scan.
fn prompt_gradient_bptt(params: &MambaParams, prompt: &PromptInstance, with_step: bool, grads: &mut ParamGrads) -> f64 {
    let dims = params.dims;
    let label = dims.d;
    let steps = prompt.tokens.ncols();
    let a = &params.a_diag;
    let mut hs: Vec<DVector<f64>> = Vec::with_capacity(steps + 1);
    let mut bs: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut args: Vec<f64> = Vec::with_capacity(steps);
    let mut h = DVector::<f64>::zeros(dims.d_h);
    hs.push(h.clone());
    for l in 0..steps {
        let u = prompt.tokens.column(l);
        let arg = params.w_delta.dot(&u) + params.b_delta;
        let delta = softplus(arg);
        let b = &params.w_b * u + &params.b_b;
        let y = u[label];
        for j in 0..dims.d_h {
            let da = delta * a[j];
            h[j] = da.exp() * h[j] + da.exp_m1() / a[j] * b[j] * y;
        }
        hs.push(h.clone());
        bs.push(b);
        args.push(arg);
    }
    let u_q = prompt.tokens.column(steps - 1);
    let c = &params.w_c * u_q + &params.b_c;
    let residual = c.dot(&h) - prompt.y_q;

    grads.w_c.ger(residual, &h, &u_q, 1.0);
    grads.b_c.axpy(residual, &h, 1.0);
    let mut g = c * residual;
    let mut dbl = DVector::<f64>::zeros(dims.d_h);
    for l in (0..steps).rev() {
        let u = prompt.tokens.column(l);
        let y = u[label];
        let delta = softplus(args[l]);
        let mut d_delta = 0.0;
        for j in 0..dims.d_h {
            let da = delta * a[j];
            let decay = da.exp();
            dbl[j] = g[j] * da.exp_m1() / a[j] * y;
            if with_step {
                d_delta += g[j] * (a[j] * decay * hs[l][j] + decay * bs[l][j] * y);
            }
            g[j] *= decay;
        }
        if y != 0.0 {
            grads.w_b.ger(1.0, &dbl, &u, 1.0);
            grads.b_b += &dbl;
        }
        if with_step {
            let dz = d_delta * sigmoid(args[l]);
            if let Some(w) = grads.w_delta.as_mut() {
                w.axpy(dz, &u, 1.0);
            }
            if let Some(b) = grads.b_delta.as_mut() {
                *b += dz;
            }
        }
    }
    residual
}

/// Same contribution when every token shares one decay: the final state is
/// `h = W_B s + b_B σ` with `s = Σ_l ρ^{L−l} κ y_l u_l` and `σ = Σ_l ρ^{L−l} κ y_l`.
fn prompt_gradient_uniform(params: &MambaParams, prompt: &PromptInstance, grads: &mut ParamGrads) -> f64 {
    let dims = params.dims;
    let steps = prompt.tokens.ncols();
    let a = params.a_diag[0];
    let delta = softplus(params.b_delta);
    let rho = (delta * a).exp();
    let kappa = (delta * a).exp_m1() / a;
    let mut s = DVector::<f64>::zeros(dims.token());
    let mut sigma = 0.0;
    let mut weight = kappa;
    for l in (0..steps).rev() {
        let y = prompt.tokens[(dims.d, l)];
        if y != 0.0 {
            s.axpy(weight * y, &prompt.tokens.column(l), 1.0);
            sigma += weight * y;
        }
        weight *= rho;
    }
    let h = &params.w_b * &s + &params.b_b * sigma;
    let u_q = prompt.tokens.column(steps - 1);
    let c = &params.w_c * u_q + &params.b_c;
    let residual = c.dot(&h) - prompt.y_q;
    grads.w_c.ger(residual, &h, &u_q, 1.0);
    grads.b_c.axpy(residual, &h, 1.0);
    grads.w_b.ger(residual, &c, &s, 1.0);
    grads.b_b.axpy(residual * sigma, &c, 1.0);
    residual
}

const GRAD_CHUNK: usize = 32;

/// Loss and gradient of [`empirical_loss`] over `batch`. The `w_Δ`/`b_Δ`
/// blocks are included when `with_step` is set. Chunks are reduced in a
/// fixed order, so the result does not depend on the thread count.
pub fn empirical_gradients(params: &MambaParams, batch: &[PromptInstance], with_step: bool) -> Result<(f64, ParamGrads)> {
    params.check_dims()?;
    if batch.is_empty() {
        return Err(Error::Usage("empirical_gradients called with an empty batch".into()));
    }
    if let Some(p) = batch.iter().find(|p| p.dim() != params.dims.d) {
        return Err(Error::Dimension(format!("prompt has d = {}, model expects {}", p.dim(), params.dims.d)));
    }
    if params.a_diag.iter().any(|&a| a == 0.0) {
        return Err(Error::Degenerate("A has a zero diagonal entry; ZOH is singular".into()));
    }
    let uniform = !with_step && params.has_uniform_decay();
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = ParamGrads::zeros(params.dims, with_step);
            let mut loss = 0.0;
            for p in chunk {
                let r = if uniform {
                    prompt_gradient_uniform(params, p, &mut g)
                } else {
                    prompt_gradient_bptt(params, p, with_step, &mut g)
                };
                loss += 0.5 * r * r;
            }
            (loss, g)
        })
        .collect();
    let mut total = ParamGrads::zeros(params.dims, with_step);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let m = batch.len() as f64;
    total.scale(1.0 / m);
    Ok((loss / m, total))
}

#[derive(Debug, Clone)]
pub struct EmpiricalRun {
    pub initial: MambaParams,
    pub params: MambaParams,
    /// Training loss at the start of each epoch, then after the last one.
    pub losses: Vec<f64>,
    /// `‖w_Δ‖₂` at the same points.
    pub wdelta_norms: Vec<f64>,
}

/// Initial parameters for empirical training: the configured init, an
/// optional population warm start, then a random `w_Δ` if it is trainable.
pub fn empirical_initial_params(config: &TrainConfig) -> Result<MambaParams> {
    let mut params = config.initial_params()?;
    if config.warm_start > 0 {
        let warm = TrainConfig { iterations: config.warm_start, tol: 0.0, record_every: config.warm_start, ..config.clone() };
        params = train_population_from(&warm, params)?.params;
    }
    if config.train_wdelta {
        let mut rng = stream_rng(config.seed, streams::STEP_INIT);
        params.w_delta = normal_vector(config.d + 1, &mut rng) * config.wdelta_init_std;
    }
    Ok(params)
}

/// Gradient descent on the empirical loss over `prompts`.
pub fn train_empirical(config: &TrainConfig, prompts: &[PromptInstance]) -> Result<EmpiricalRun> {
    config.validate()?;
    let initial = empirical_initial_params(config)?;
    train_empirical_from(config, initial, prompts)
}

pub fn train_empirical_from(config: &TrainConfig, initial: MambaParams, prompts: &[PromptInstance]) -> Result<EmpiricalRun> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Usage("train_empirical called with no prompts".into()));
    }
    let mut params = initial.clone();
    let batch_size = config.batch_size.unwrap_or(prompts.len()).min(prompts.len());
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut shuffle = stream_rng(config.seed, streams::SHUFFLE);
    let mut losses = Vec::with_capacity(config.iterations + 1);
    let mut wdelta_norms = Vec::with_capacity(config.iterations + 1);
    let check = |loss: f64, epoch: usize| -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged { iteration: epoch, reason: format!("training loss became {loss}") })
        }
    };
    for epoch in 0..config.iterations {
        if batch_size == prompts.len() {
            let (loss, mut grads) = empirical_gradients(&params, prompts, config.train_wdelta)?;
            check(loss, epoch)?;
            losses.push(loss);
            wdelta_norms.push(params.w_delta.norm());
            if !config.train_bdelta {
                grads.b_delta = None;
            }
            apply_update(&mut params, &grads, config.eta, config.wdelta_eta, config.max_step_norm);
        } else {
            let loss = empirical_loss(&params, prompts)?;
            check(loss, epoch)?;
            losses.push(loss);
            wdelta_norms.push(params.w_delta.norm());
            order.shuffle(&mut shuffle);
            for idx in order.chunks(batch_size) {
                let batch: Vec<PromptInstance> = idx.iter().map(|&i| prompts[i].clone()).collect();
                let (_, mut grads) = empirical_gradients(&params, &batch, config.train_wdelta)?;
                if !config.train_bdelta {
                    grads.b_delta = None;
                }
                apply_update(&mut params, &grads, config.eta, config.wdelta_eta, config.max_step_norm);
            }
        }
    }
    // Same reduction as the recorded losses so an idle run is bit-identical.
    let loss = if batch_size == prompts.len() {
        empirical_gradients(&params, prompts, config.train_wdelta)?.0
    } else {
        empirical_loss(&params, prompts)?
    };
    check(loss, config.iterations)?;
    losses.push(loss);
    wdelta_norms.push(params.w_delta.norm());
    Ok(EmpiricalRun { initial, params, losses, wdelta_norms })
}

// ---------------------------------------------------------------------------
// Finite-difference check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub eps: f64,
    pub threshold: f64,
    pub blocks: Vec<BlockCheck>,
    pub passed: bool,
}

impl GradReport {
    pub fn block(&self, name: &str) -> Option<&BlockCheck> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − f| / max(|a|, |f|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

type Accessor = fn(&mut MambaParams, usize) -> &mut f64;

fn block_accessors(with_step: bool) -> Vec<(&'static str, Accessor)> {
    let mut blocks: Vec<(&'static str, Accessor)> = vec![
        ("w_b", |p, i| &mut p.w_b.as_mut_slice()[i]),
        ("w_c", |p, i| &mut p.w_c.as_mut_slice()[i]),
        ("b_b", |p, i| &mut p.b_b.as_mut_slice()[i]),
        ("b_c", |p, i| &mut p.b_c.as_mut_slice()[i]),
    ];
    if with_step {
        blocks.push(("w_delta", |p, i| &mut p.w_delta.as_mut_slice()[i]));
        blocks.push(("b_delta", |p, _| &mut p.b_delta));
    }
    blocks
}

fn analytic_block(grads: &ParamGrads, name: &str) -> Vec<f64> {
    match name {
        "w_b" => grads.w_b.as_slice().to_vec(),
        "w_c" => grads.w_c.as_slice().to_vec(),
        "b_b" => grads.b_b.as_slice().to_vec(),
        "b_c" => grads.b_c.as_slice().to_vec(),
        "w_delta" => grads.w_delta.as_ref().map(|v| v.as_slice().to_vec()).unwrap_or_default(),
        "b_delta" => grads.b_delta.into_iter().collect(),
        _ => Vec::new(),
    }
}

/// Compares [`empirical_gradients`] with central differences of
/// [`empirical_loss`]. Every coordinate is checked when the model has
/// fewer than 10⁴ parameters, otherwise at most 2000 per block chosen by a
/// seeded shuffle.
pub fn gradient_check(
    params: &MambaParams,
    batch: &[PromptInstance],
    eps: f64,
    with_step: bool,
    threshold: f64,
    seed: u64,
) -> Result<GradReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(config_err(format!("finite-difference eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let (_, grads) = empirical_gradients(params, batch, with_step)?;
    let accessors = block_accessors(with_step);
    let blocks: Vec<(&str, Accessor, Vec<f64>)> =
        accessors.into_iter().map(|(name, acc)| (name, acc, analytic_block(&grads, name))).collect();
    let total: usize = blocks.iter().map(|b| b.2.len()).sum();
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::new();
    for (name, access, analytic) in blocks {
        let mut idx: Vec<usize> = (0..analytic.len()).collect();
        if total >= 10_000 && idx.len() > 2000 {
            idx.shuffle(&mut rng);
            idx.truncate(2000);
        }
        let errors: Vec<f64> = idx
            .par_iter()
            .map(|&i| {
                let mut p = params.clone();
                let orig = *access(&mut p, i);
                *access(&mut p, i) = orig + eps;
                let plus = empirical_loss(&p, batch)?;
                *access(&mut p, i) = orig - eps;
                let minus = empirical_loss(&p, batch)?;
                Ok(relative_error(analytic[i], (plus - minus) / (2.0 * eps)))
            })
            .collect::<Result<_>>()?;
        out.push(BlockCheck {
            name: name.to_string(),
            checked: idx.len(),
            total: analytic.len(),
            max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        });
    }
    let passed = out.iter().all(|b| b.max_rel_error < threshold);
    Ok(GradReport { eps, threshold, blocks: out, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::converged_params;

    #[test]
    fn fixed_point_has_zero_gradient() {
        let dims = Dims::new(4, 20, 50).unwrap();
        let p = converged_params(dims, &mut stream_rng(0, 0)).unwrap();
        let betas = Betas::new(4, 50).unwrap();
        let g = population_gradients(&p, &betas).unwrap();
        assert!(g.amax() < 1e-12, "{}", g.amax());
    }

    #[test]
    fn zero_b_gradient() {
        let dims = Dims::new(3, 10, 20).unwrap();
        let mut p = MambaParams::gaussian_init(dims, &mut stream_rng(1, 0));
        p.w_b.fill(0.0);
        let betas = Betas::new(3, 20).unwrap();
        let g = population_gradients(&p, &betas).unwrap();
        let expected = p.input_c() * -betas.beta3;
        assert!((g.w_b.columns(0, 3) - expected).amax() < 1e-14);
        assert_eq!(g.w_b.column(3).amax(), 0.0);
        assert_eq!(g.w_c.amax(), 0.0);
    }

    #[test]
    fn rejects_nonzero_bias() {
        let dims = Dims::new(2, 4, 5).unwrap();
        let mut p = MambaParams::zeros(dims);
        p.b_c[0] = 0.1;
        assert!(population_gradients(&p, &Betas::new(2, 5).unwrap()).is_err());
    }

    #[test]
    fn uniform_path_matches_bptt() {
        let dims = Dims::new(3, 7, 6).unwrap();
        let mut rng = stream_rng(4, 0);
        let mut p = MambaParams::gaussian_init(dims, &mut rng);
        p.b_b = normal_vector(7, &mut rng);
        p.b_c = normal_vector(7, &mut rng);
        let prompts = sample_prompts(3, 6, 5, &mut rng).unwrap();
        let mut fast = ParamGrads::zeros(dims, false);
        let mut slow = ParamGrads::zeros(dims, false);
        for q in &prompts {
            let r1 = prompt_gradient_uniform(&p, q, &mut fast);
            let r2 = prompt_gradient_bptt(&p, q, false, &mut slow);
            assert!((r1 - r2).abs() < 1e-12);
        }
        assert!((fast.w_b - slow.w_b).amax() < 1e-11);
        assert!((fast.w_c - slow.w_c).amax() < 1e-11);
        assert!((fast.b_b - slow.b_b).amax() < 1e-11);
        assert!((fast.b_c - slow.b_c).amax() < 1e-11);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let dims = Dims::new(2, 3, 3).unwrap();
        let p = MambaParams::zeros(dims);
        let batch = sample_prompts(2, 3, 2, &mut stream_rng(0, 0)).unwrap();
        assert!(gradient_check(&p, &batch, 1e-2, false, 1e-4, 0).is_err());
    }
}
