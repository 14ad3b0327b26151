//! Closed-form quantities: the decay `α`, the moment coefficients
//! `β1, β2, β3`, the converged predictor, the population loss, the
//! linear-attention and static-SSM baselines, and the scalar dynamics of
//! the orthogonal initialization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::ssm::{orthonormal_columns, Dims, MambaParams};
use crate::task_gen::{decay_alpha, PromptInstance};

/// Coefficients of the population loss, which depend only on `(d, N)`.
///
/// `β1` and `β2` are the second moments of the α-weighted label-input and
/// squared-label sums (times `(1−α)²`), `β3` their correlation with the task.
///
/// `beta2` counts the shared task in `E[y_i² y_j²] = d(d+2)`; the
/// independence form `d²` is kept as `beta2_independent` for comparison. It
/// is smaller by `2d α²(1−α^N)² − 2d·tail` and is not the coefficient of the
/// population loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta2_independent: f64,
}

impl Betas {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(config_err(format!("betas need d >= 1 and N >= 1 (got d = {d}, N = {n})")));
        }
        let alpha = decay_alpha(n);
        let df = d as f64;
        let a2 = alpha * alpha;
        let an = alpha.powi(n as i32);
        let tail = a2 * (1.0 - alpha) * (1.0 - an * an) / (1.0 + alpha);
        Ok(Self {
            alpha,
            beta1: a2 * (1.0 - an).powi(2) + (df + 1.0) * tail,
            beta2: (df * df + 2.0 * df) * a2 * (1.0 - an).powi(2) + (2.0 * df * df + 4.0 * df) * tail,
            beta3: alpha * (1.0 - an),
            beta2_independent: df * df * a2 * (1.0 - an).powi(2) + (2.0 * df * df + 6.0 * df) * tail,
        })
    }

    /// The fixed point `β3/β1` of every diagonal product `c_iᵀb_i`.
    pub fn target(&self) -> f64 {
        self.beta3 / self.beta1
    }
}

/// `2(1+α) / (α(3(1−α)d + 4 − 2α))`, algebraically equal to `β3/β1`.
pub fn beta_closed_form(d: usize, n: usize) -> f64 {
    let alpha = decay_alpha(n);
    2.0 * (1.0 + alpha) / (alpha * (3.0 * (1.0 - alpha) * d as f64 + 4.0 - 2.0 * alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub d: usize,
    pub n: usize,
    pub d_h: usize,
    /// Failure probability `δ` of the initialization concentration bounds.
    pub confidence: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta2_independent: f64,
    pub beta: f64,
    /// Lower bound `d_h/2` on squared column norms.
    pub gamma: f64,
    /// Cap `3√(d_h ln(4d(2d+1)/δ))` on cross interactions.
    pub delta_max: f64,
}

impl TheoryConstants {
    pub fn new(d: usize, n: usize, d_h: usize, confidence: f64) -> Result<Self> {
        if d_h == 0 {
            return Err(config_err("d_h must be positive"));
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(config_err(format!("confidence must lie in (0, 1), got {confidence}")));
        }
        let betas = Betas::new(d, n)?;
        let mut consts = Self {
            d,
            n,
            d_h,
            confidence,
            alpha: betas.alpha,
            beta1: betas.beta1,
            beta2: betas.beta2,
            beta3: betas.beta3,
            beta2_independent: betas.beta2_independent,
            beta: beta_closed_form(d, n),
            gamma: d_h as f64 / 2.0,
            delta_max: 0.0,
        };
        consts.delta_max = 3.0 * (d_h as f64 * consts.log_term()).sqrt();
        Ok(consts)
    }

    pub fn betas(&self) -> Betas {
        Betas {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
            beta2_independent: self.beta2_independent,
        }
    }

    /// `ln(4d(2d+1)/δ)`.
    pub fn log_term(&self) -> f64 {
        let d = self.d as f64;
        (4.0 * d * (2.0 * d + 1.0) / self.confidence).ln()
    }

    /// `2√(d_h ln(4d(2d+1)/δ))`, the initial value of the running cross-interaction bound.
    pub fn delta_floor(&self) -> f64 {
        2.0 * (self.d_h as f64 * self.log_term()).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalLoss {
    pub loss: f64,
    /// `3d(d+1)/(2N)`.
    pub bound: f64,
}

/// Population loss at the fixed point, `(d/2)(1 − β3²/β1)`, written in the
/// cancellation-free form `d(d+1)α²(1−α)(1−α^{2N}) / (2(1+α)β1)`.
pub fn theoretical_loss(d: usize, n: usize) -> Result<TheoreticalLoss> {
    let b = Betas::new(d, n)?;
    let (df, alpha) = (d as f64, b.alpha);
    let a2n = alpha.powi(2 * n as i32);
    let loss = df * (df + 1.0) * alpha * alpha * (1.0 - alpha) * (1.0 - a2n) / (2.0 * (1.0 + alpha) * b.beta1);
    let bound = 3.0 * df * (df + 1.0) / (2.0 * n as f64);
    debug_assert!(loss <= bound);
    Ok(TheoreticalLoss { loss, bound })
}

/// `x_qᵀ Σ_{i<N} (1−α) α^{i+1} β y_{N−i} x_{N−i}` with `β = β3/β1`.
pub fn converged_predict(prompt: &PromptInstance) -> Result<f64> {
    let n = prompt.context_len();
    let b = Betas::new(prompt.dim(), n)?;
    let weighted = weighted_label_sum(prompt, b.alpha);
    Ok((1.0 - b.alpha) * b.target() * prompt.x_q.dot(&weighted))
}

/// `Σ_{i<N} α^{i+1} y_{N−i} x_{N−i}`.
fn weighted_label_sum(prompt: &PromptInstance, alpha: f64) -> DVector<f64> {
    let n = prompt.context_len();
    let mut acc = DVector::zeros(prompt.dim());
    let mut weight = alpha;
    for l in (0..n).rev() {
        acc.axpy(weight * prompt.ys[l], &prompt.xs.column(l), 1.0);
        weight *= alpha;
    }
    acc
}

/// One token of the converged projected-state recursion:
/// `h̃ ← α h̃ + (1−α) β y x`, a fixed-size step toward `β y x`.
pub fn projected_state_update(h_tilde: &DVector<f64>, x: &DVector<f64>, y: f64, betas: &Betas) -> DVector<f64> {
    let alpha = betas.alpha;
    h_tilde * alpha + x * ((1.0 - alpha) * betas.target() * y)
}

/// Optimal scale `N/(N+d+1)` for the linear-attention predictor
/// `(c/N) x_qᵀ Σ y_i x_i`.
pub fn linear_attention_optimal_scale(d: usize, n: usize) -> f64 {
    n as f64 / (n + d + 1) as f64
}

/// Loss of the optimally scaled linear-attention predictor, `d(d+1) / (2(N+d+1))`.
pub fn linear_attention_optimal_loss(d: usize, n: usize) -> Result<f64> {
    if d == 0 || n == 0 {
        return Err(config_err("linear attention loss needs d >= 1 and N >= 1"));
    }
    let df = d as f64;
    Ok(df * (df + 1.0) / (2.0 * (n + d + 1) as f64))
}

/// `(c/N) x_qᵀ Σ y_i x_i`.
pub fn linear_attention_predict(prompt: &PromptInstance, scale: f64) -> f64 {
    let s = &prompt.xs * &prompt.ys;
    scale / prompt.context_len() as f64 * prompt.x_q.dot(&s)
}

/// A static (input-independent) state-space layer on the label channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSsm {
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub a_diag: DVector<f64>,
    pub delta: f64,
}

impl StaticSsm {
    /// Coefficients `Cᵀ Ā^{L−j} B̄` applied to token `j` of an `L`-token input.
    pub fn coefficients(&self, tokens: usize) -> Result<Vec<f64>> {
        if self.a_diag.iter().any(|&a| a == 0.0) {
            return Err(Error::Degenerate("A has a zero diagonal entry; ZOH is singular".into()));
        }
        let a_bar = self.a_diag.map(|a| (self.delta * a).exp());
        let b_bar = DVector::from_fn(self.b.len(), |j, _| {
            let a = self.a_diag[j];
            (self.delta * a).exp_m1() / a * self.b[j]
        });
        let mut coeffs = vec![0.0; tokens];
        let mut state = b_bar;
        for j in (0..tokens).rev() {
            coeffs[j] = self.c.dot(&state);
            state.component_mul_assign(&a_bar);
        }
        Ok(coeffs)
    }
}

/// Output of a static SSM at the query position on the label channel.
pub fn s4_static_predict(model: &StaticSsm, prompt: &PromptInstance) -> Result<f64> {
    let label = prompt.dim();
    let coeffs = model.coefficients(prompt.tokens.ncols())?;
    Ok(coeffs.iter().enumerate().map(|(j, k)| k * prompt.tokens[(label, j)]).sum())
}

/// Exact population loss of a model with `A = −I`, `w_Δ = 0` and zero biases:
/// `½(β1‖CᵀB‖² + β2‖Cᵀb‖² − 2β3 tr(CᵀB) + d)`.
pub fn population_loss(params: &MambaParams, betas: &Betas) -> Result<f64> {
    require_population_form(params)?;
    let c = params.input_c();
    let cb = c.tr_mul(&params.input_b());
    let cbias = c.tr_mul(&params.label_b());
    Ok(0.5
        * (betas.beta1 * cb.norm_squared() + betas.beta2 * cbias.norm_squared() - 2.0 * betas.beta3 * cb.trace()
            + params.dims.d as f64))
}

/// Errors unless the parameters are in the form the closed-form population
/// loss and gradients assume.
pub fn require_population_form(params: &MambaParams) -> Result<()> {
    if params.b_b.iter().any(|&v| v != 0.0) || params.b_c.iter().any(|&v| v != 0.0) {
        return Err(config_err("closed-form population quantities require b_B = b_C = 0"));
    }
    let expected = crate::ssm::default_step_bias(params.dims.n);
    if params.w_delta.iter().any(|&v| v != 0.0)
        || params.a_diag.iter().any(|&a| a != -1.0)
        || (params.b_delta - expected).abs() > 1e-12 * expected.abs().max(1.0)
    {
        return Err(config_err("closed-form population quantities require A = -I, w_delta = 0 and the default b_delta"));
    }
    Ok(())
}

/// Parameters at the fixed point: `CᵀB = (β3/β1) I`, `Cᵀb = 0`, zero biases.
/// Columns of `C` are orthogonal with squared norm `d_h/2`. Requires `d_h ≥ d + 2`.
pub fn converged_params<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Result<MambaParams> {
    if dims.d_h < dims.d + 2 {
        return Err(config_err(format!("converged params need d_h >= d + 2, got {}", dims.d_h)));
    }
    let betas = Betas::new(dims.d, dims.n)?;
    let q = orthonormal_columns(dims.d_h, dims.d + 2, rng);
    let scale = (dims.d_h as f64 / 2.0).sqrt();
    let mut w_b = DMatrix::zeros(dims.d_h, dims.token());
    let mut w_c = DMatrix::zeros(dims.d_h, dims.token());
    for i in 0..dims.d {
        w_c.set_column(i, &(q.column(i) * scale));
        w_b.set_column(i, &(q.column(i) * (betas.target() / scale)));
    }
    w_b.set_column(dims.d, &(q.column(dims.d) * scale));
    w_c.set_column(dims.d, &(q.column(dims.d + 1) * scale));
    MambaParams::with_projections(dims, w_b, w_c)
}

/// Which update to use for the diagonal product `h(t)` of the orthogonal
/// initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OrthoRecursion {
    /// `h' = h + ηg(β3 − β1h) + η²h(β3 − β1h)²`.
    #[default]
    Published,
    /// `h' = h + 2ηg(β3 − β1h) + η²h(β3 − β1h)²`, which is what the full
    /// matrix update produces when `B = C` share norms.
    MatrixConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoDynamicsTrace {
    pub eta: f64,
    /// `g(t)`: common squared column norm, `t = 0..=T`.
    pub g: Vec<f64>,
    /// `h(t)`: common diagonal product `c_iᵀb_i`, `t = 0..=T`.
    pub h: Vec<f64>,
    /// First `t` with `|β3 − β1 h(t)| < 1e−8`.
    pub converged_at: Option<usize>,
}

/// Scalar dynamics of population GD from orthonormal columns, where every
/// matrix stays a multiple of the identity: `g(0) = 1`, `h(0) = 0`.
pub fn ortho_dynamics(d: usize, n: usize, eta: f64, steps: usize, recursion: OrthoRecursion) -> Result<OrthoDynamicsTrace> {
    if !(eta > 0.0) || steps == 0 {
        return Err(config_err("ortho dynamics need eta > 0 and at least one step"));
    }
    let b = Betas::new(d, n)?;
    let limit = 10.0 * b.target();
    let coupling = match recursion {
        OrthoRecursion::Published => 1.0,
        OrthoRecursion::MatrixConsistent => 2.0,
    };
    let mut g = Vec::with_capacity(steps + 1);
    let mut h = Vec::with_capacity(steps + 1);
    g.push(1.0);
    h.push(0.0);
    let mut converged_at = None;
    for t in 0..steps {
        let (gt, ht) = (g[t], h[t]);
        let r = b.beta3 - b.beta1 * ht;
        if converged_at.is_none() && r.abs() < 1e-8 {
            converged_at = Some(t);
        }
        let g_next = gt + eta * (2.0 * ht + eta * b.beta3 * gt - eta * b.beta1 * gt * ht) * r;
        let h_next = ht + coupling * eta * gt * r + eta * eta * ht * r * r;
        if !h_next.is_finite() || h_next.abs() > limit || !g_next.is_finite() {
            return Err(Error::Unstable { eta, iteration: t + 1 });
        }
        g.push(g_next);
        h.push(h_next);
    }
    if converged_at.is_none() && (b.beta3 - b.beta1 * h[steps]).abs() < 1e-8 {
        converged_at = Some(steps);
    }
    Ok(OrthoDynamicsTrace { eta, g, h, converged_at })
}
