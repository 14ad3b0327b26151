//! Single-layer selective state-space (S6) model.
//!
//! For token `u_l ∈ R^{d+1}` the layer selects
//! `B_l = W_B u_l + b_B`, `C_l = W_C u_l + b_C`, `Δ_l = softplus(w_Δ·u_l + b_Δ)`,
//! discretizes the diagonal `A` by zero-order hold and runs the recurrence
//! `h_l^{(i)} = Ā_l h_{l-1}^{(i)} + B̄_l u_l^{(i)}` on every channel `i`,
//! reading out `o_l^{(i)} = C_l·h_l^{(i)}`. The prediction is the label
//! channel of the last (query) output.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::normal_matrix;
use crate::task_gen::PromptInstance;

/// Model sizes: input dimension `d`, hidden width `d_h`, context length `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub d_h: usize,
    pub n: usize,
}

impl Dims {
    pub fn new(d: usize, d_h: usize, n: usize) -> Result<Self> {
        if d == 0 || d_h == 0 || n == 0 {
            return Err(config_err(format!("dims must be positive (d = {d}, d_h = {d_h}, N = {n})")));
        }
        Ok(Self { d, d_h, n })
    }

    /// Token width `d + 1`.
    pub fn token(&self) -> usize {
        self.d + 1
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The step bias `ln(exp(ln2/N) − 1)`, which makes `Δ = ln2/N` when `w_Δ = 0`.
pub fn default_step_bias(n: usize) -> f64 {
    (std::f64::consts::LN_2 / n as f64).exp_m1().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MambaParams {
    pub w_b: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub b_b: DVector<f64>,
    pub b_c: DVector<f64>,
    pub w_delta: DVector<f64>,
    pub b_delta: f64,
    /// Diagonal of the state matrix `A`.
    pub a_diag: DVector<f64>,
    pub dims: Dims,
}

impl MambaParams {
    /// Given projections with every other block at its fixed default:
    /// `A = −I`, `w_Δ = 0`, `b_Δ = ln(exp(ln2/N) − 1)`, zero biases.
    pub fn with_projections(dims: Dims, w_b: DMatrix<f64>, w_c: DMatrix<f64>) -> Result<Self> {
        let shape = (dims.d_h, dims.token());
        if w_b.shape() != shape || w_c.shape() != shape {
            return Err(Error::Dimension(format!(
                "projections must be {}x{}, got {:?} and {:?}",
                shape.0,
                shape.1,
                w_b.shape(),
                w_c.shape()
            )));
        }
        Ok(Self {
            w_b,
            w_c,
            b_b: DVector::zeros(dims.d_h),
            b_c: DVector::zeros(dims.d_h),
            w_delta: DVector::zeros(dims.token()),
            b_delta: default_step_bias(dims.n),
            a_diag: DVector::from_element(dims.d_h, -1.0),
            dims,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        let shape = (dims.d_h, dims.token());
        Self::with_projections(dims, DMatrix::zeros(shape.0, shape.1), DMatrix::zeros(shape.0, shape.1))
            .expect("shapes built from dims")
    }

    /// `W_B` then `W_C` with i.i.d. N(0, 1) entries.
    pub fn gaussian_init<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let w_b = normal_matrix(dims.d_h, dims.token(), rng);
        let w_c = normal_matrix(dims.d_h, dims.token(), rng);
        Self::with_projections(dims, w_b, w_c).expect("shapes built from dims")
    }

    /// All `2d + 2` columns of `W_B` and `W_C` mutually orthonormal.
    /// Requires `d_h ≥ 2d + 2`.
    pub fn orthogonal_init<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Result<Self> {
        let cols = 2 * dims.token();
        if dims.d_h < cols {
            return Err(config_err(format!(
                "orthogonal init needs d_h >= 2d + 2 = {cols}, got {}",
                dims.d_h
            )));
        }
        let q = orthonormal_columns(dims.d_h, cols, rng);
        let w_b = q.columns(0, dims.token()).into_owned();
        let w_c = q.columns(dims.token(), dims.token()).into_owned();
        Self::with_projections(dims, w_b, w_c)
    }

    /// `B`: the first `d` columns of `W_B`.
    pub fn input_b(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.w_b.columns(0, self.dims.d)
    }

    /// `b`: the label column of `W_B`.
    pub fn label_b(&self) -> DVectorView<'_, f64> {
        self.w_b.column(self.dims.d)
    }

    /// `C`: the first `d` columns of `W_C`.
    pub fn input_c(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.w_c.columns(0, self.dims.d)
    }

    /// `c`: the label column of `W_C`.
    pub fn label_c(&self) -> DVectorView<'_, f64> {
        self.w_c.column(self.dims.d)
    }

    /// True when `Δ` and `Ā` are the same for every token (`w_Δ = 0`) and
    /// all diagonal entries of `A` are equal, so the recurrence weights
    /// collapse to one scalar per token.
    pub fn has_uniform_decay(&self) -> bool {
        self.w_delta.iter().all(|&v| v == 0.0)
            && self.a_diag.iter().all(|&a| a == self.a_diag[0])
    }

    pub fn check_dims(&self) -> Result<()> {
        let Dims { d_h, .. } = self.dims;
        let t = self.dims.token();
        let ok = self.w_b.shape() == (d_h, t)
            && self.w_c.shape() == (d_h, t)
            && self.b_b.len() == d_h
            && self.b_c.len() == d_h
            && self.w_delta.len() == t
            && self.a_diag.len() == d_h;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!("parameter blocks do not match dims {:?}", self.dims)))
        }
    }

    fn check_prompt(&self, prompt: &PromptInstance) -> Result<()> {
        if prompt.dim() != self.dims.d || prompt.tokens.nrows() != self.dims.token() {
            return Err(Error::Dimension(format!(
                "prompt has d = {}, model expects d = {}",
                prompt.dim(),
                self.dims.d
            )));
        }
        Ok(())
    }
}

/// `rows × cols` matrix with orthonormal columns (QR of a Gaussian matrix).
pub fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = normal_matrix(rows, cols, rng);
    g.qr().q().columns(0, cols).into_owned()
}

/// Discretized per-token quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Diagonal of `Ā_l = exp(Δ_l A)`.
    pub a_bar: DVector<f64>,
    pub b_bar: DVector<f64>,
    pub c: DVector<f64>,
    pub delta: f64,
    /// `B_l` before discretization.
    pub b: DVector<f64>,
    /// Pre-activation `w_Δ·u + b_Δ`.
    pub delta_arg: f64,
}

/// Selection and zero-order-hold discretization for one token.
pub fn selection_discretize(params: &MambaParams, u: DVectorView<'_, f64>) -> Result<Selection> {
    if u.len() != params.dims.token() {
        return Err(Error::Dimension(format!(
            "token has length {}, expected {}",
            u.len(),
            params.dims.token()
        )));
    }
    if let Some(j) = params.a_diag.iter().position(|&a| a == 0.0) {
        return Err(Error::Degenerate(format!("A has a zero diagonal entry at {j}; ZOH is singular")));
    }
    let delta_arg = params.w_delta.dot(&u) + params.b_delta;
    let delta = softplus(delta_arg);
    let b = &params.w_b * u + &params.b_b;
    let c = &params.w_c * u + &params.b_c;
    let a_bar = params.a_diag.map(|a| (delta * a).exp());
    let b_bar = DVector::from_fn(b.len(), |j, _| {
        let a = params.a_diag[j];
        (delta * a).exp_m1() / a * b[j]
    });
    Ok(Selection { a_bar, b_bar, c, delta, b, delta_arg })
}

/// Dense reference for the discretization: `Ā = exp(ΔA)` via a general
/// matrix exponential and `B̄ = (ΔA)^{-1}(exp(ΔA) − I) ΔB_l` via a solve.
pub fn selection_discretize_dense(params: &MambaParams, u: DVectorView<'_, f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sel = selection_discretize(params, u)?;
    let d_h = params.dims.d_h;
    let delta_a = DMatrix::from_diagonal(&params.a_diag) * sel.delta;
    let a_bar = delta_a.exp();
    let rhs = (&a_bar - DMatrix::<f64>::identity(d_h, d_h)) * (&sel.b * sel.delta);
    let b_bar = delta_a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("ΔA is singular".into()))?;
    Ok((a_bar, b_bar))
}

/// One recurrence step on all channels. `hidden` is `d_h × (d+1)`, one
/// column per channel.
pub fn scan_step(
    hidden: &DMatrix<f64>,
    sel: &Selection,
    u: DVectorView<'_, f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut next = hidden.clone();
    for (i, mut col) in next.column_iter_mut().enumerate() {
        col.component_mul_assign(&sel.a_bar);
        col.axpy(u[i], &sel.b_bar, 1.0);
    }
    let out = next.tr_mul(&sel.c);
    (next, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `hidden[l]` for `l = 0..=N+1`; `hidden[0]` is zero. Empty unless retained.
    pub hidden: Vec<DMatrix<f64>>,
    /// `outputs[l-1] = o_l`. Empty unless retained.
    pub outputs: Vec<DVector<f64>>,
    pub deltas: Vec<f64>,
    pub prediction: f64,
}

/// Runs the scan over all `N + 1` tokens. With `retain = false` only the
/// step sizes and the prediction are kept.
pub fn forward_predict(params: &MambaParams, prompt: &PromptInstance, retain: bool) -> Result<ForwardTrace> {
    params.check_prompt(prompt)?;
    let steps = prompt.tokens.ncols();
    let mut hidden = DMatrix::zeros(params.dims.d_h, params.dims.token());
    let mut trace = ForwardTrace {
        hidden: Vec::new(),
        outputs: Vec::new(),
        deltas: Vec::with_capacity(steps),
        prediction: 0.0,
    };
    if retain {
        trace.hidden.push(hidden.clone());
    }
    let mut last = DVector::zeros(params.dims.token());
    for l in 0..steps {
        let u = prompt.tokens.column(l);
        let sel = selection_discretize(params, u)?;
        let (next, out) = scan_step(&hidden, &sel, u);
        hidden = next;
        trace.deltas.push(sel.delta);
        if retain {
            trace.hidden.push(hidden.clone());
            trace.outputs.push(out.clone());
        }
        last = out;
    }
    trace.prediction = last[params.dims.d];
    Ok(trace)
}

/// Prediction `ŷ_q` computed on the label channel only.
pub fn predict(params: &MambaParams, prompt: &PromptInstance) -> Result<f64> {
    params.check_prompt(prompt)?;
    if let Some(j) = params.a_diag.iter().position(|&a| a == 0.0) {
        return Err(Error::Degenerate(format!("A has a zero diagonal entry at {j}; ZOH is singular")));
    }
    let label = params.dims.d;
    let mut h = DVector::<f64>::zeros(params.dims.d_h);
    let mut b = DVector::<f64>::zeros(params.dims.d_h);
    let steps = prompt.tokens.ncols();
    for l in 0..steps {
        let u = prompt.tokens.column(l);
        let delta = softplus(params.w_delta.dot(&u) + params.b_delta);
        let y = u[label];
        if y == 0.0 {
            for (hj, &a) in h.iter_mut().zip(params.a_diag.iter()) {
                *hj *= (delta * a).exp();
            }
            continue;
        }
        b.gemv(1.0, &params.w_b, &u, 0.0);
        b += &params.b_b;
        for ((hj, &a), &bj) in h.iter_mut().zip(params.a_diag.iter()).zip(b.iter()) {
            let da = delta * a;
            *hj = da.exp() * *hj + da.exp_m1() / a * bj * y;
        }
    }
    let u_q = prompt.tokens.column(steps - 1);
    let c = &params.w_c * u_q + &params.b_c;
    Ok(c.dot(&h))
}

/// Mean of `½(ŷ_q − y_q)²` over the batch.
pub fn empirical_loss(params: &MambaParams, prompts: &[PromptInstance]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Usage("empirical_loss called with an empty batch".into()));
    }
    let losses: Vec<f64> = prompts
        .par_iter()
        .map(|p| predict(params, p).map(|yhat| 0.5 * (yhat - p.y_q).powi(2)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / prompts.len() as f64)
}

/// Projected label-channel states `h̃_l = Cᵀ h_l^{(d+1)}` for `l = 1..=N`.
pub fn projected_states(params: &MambaParams, prompt: &PromptInstance) -> Result<Vec<DVector<f64>>> {
    let trace = forward_predict(params, prompt, true)?;
    let n = prompt.context_len();
    let c = params.input_c();
    Ok((1..=n).map(|l| c.tr_mul(&trace.hidden[l].column(params.dims.d))).collect())
}
