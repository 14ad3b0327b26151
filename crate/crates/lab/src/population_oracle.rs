//! Finite differences of the Monte-Carlo population loss.
//!
//! With `A = −I`, `w_Δ = 0` and zero biases the prediction is
//! `x_qᵀ M s` with `M = CᵀW_B` and `s` the decayed label-weighted token
//! sum. The query input is independent of `(w, s)`, so it is integrated
//! out per prompt: `E_{x_q} ½(x_qᵀ(Ms − w))² = ½‖Ms − w‖²`.
//!
//! Given the context inputs, `s = (Kw, wᵀKw)` with `K = Σ_l c_l x_l x_lᵀ`,
//! so the task is integrated out as well with Gaussian moments:
//! `E[s_x s_xᵀ] = K²`, `E[s_y²] = (tr K)² + 2 tr K²`, `E[s_x wᵀ] = K`, odd
//! terms vanish. What remains is an average over sampled contexts of a
//! quadratic form in `M`. Accumulating its coefficients once gives the
//! Monte-Carlo loss for any parameters on the same contexts, which is what
//! the central differences are taken of.

use mamba_icl::rng::stream_rng;
use mamba_icl::ssm::{softplus, MambaParams};
use mamba_icl::task_gen::sample_prompt;
use mamba_icl::theory::{require_population_form, Betas};
use mamba_icl::training::population_gradients;
use std::ops::AddAssign;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

const CHUNK: usize = 1 << 14;

/// Context averages of `E_w[s sᵀ]` and `E_w[s wᵀ]` over `samples` prompts.
#[derive(Debug, Clone)]
pub struct LossMoments {
    pub d: usize,
    pub n: usize,
    pub samples: usize,
    ss: DMatrix<f64>,
    sw: DMatrix<f64>,
    ww: f64,
}

impl LossMoments {
    pub fn sample(d: usize, n: usize, samples: usize, seed: u64) -> LabResult<Self> {
        if d == 0 || n == 0 || samples == 0 {
            return Err(LabError::Config("loss moments need d, n and samples positive".into()));
        }
        let alpha = (-softplus(mamba_icl::ssm::default_step_bias(n))).exp();
        let chunks = samples.div_ceil(CHUNK);
        let parts: Vec<(DMatrix<f64>, DMatrix<f64>, f64)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream_rng(seed, c as u64);
                let count = CHUNK.min(samples - c * CHUNK);
                let mut ss = DMatrix::zeros(d + 1, d + 1);
                let mut sw = DMatrix::zeros(d + 1, d);
                let mut k = DMatrix::zeros(d, d);
                for _ in 0..count {
                    // The task is drawn but unused: the stream matches `sample_prompts`.
                    let p = sample_prompt(d, n, &mut rng).expect("dimensions checked");
                    k.fill(0.0);
                    for l in 0..n {
                        k *= alpha;
                        k.ger(1.0 - alpha, &p.xs.column(l), &p.xs.column(l), 1.0);
                    }
                    k *= alpha;
                    let k2 = &k * &k;
                    let tr = k.trace();
                    ss.view_mut((0, 0), (d, d)).add_assign(&k2);
                    ss[(d, d)] += tr * tr + 2.0 * k2.trace();
                    sw.view_mut((0, 0), (d, d)).add_assign(&k);
                }
                (ss, sw, count as f64 * d as f64)
            })
            .collect();
        let mut ss = DMatrix::zeros(d + 1, d + 1);
        let mut sw = DMatrix::zeros(d + 1, d);
        let mut ww = 0.0;
        for (a, b, c) in parts {
            ss += a;
            sw += b;
            ww += c;
        }
        let m = samples as f64;
        Ok(Self { d, n, samples, ss: ss / m, sw: sw / m, ww: ww / m })
    }

    /// Monte-Carlo loss `mean ½‖Ms − w‖²` of `params` on the sampled prompts.
    pub fn loss(&self, params: &MambaParams) -> LabResult<f64> {
        require_population_form(params)?;
        if params.dims.d != self.d || params.dims.n != self.n {
            return Err(LabError::Config("parameters do not match the sampled dimensions".into()));
        }
        let m = params.input_c().tr_mul(&params.w_b);
        let quad = (&m * &self.ss).component_mul(&m).sum();
        let cross = (&m * &self.sw).trace();
        Ok(0.5 * (quad - 2.0 * cross + self.ww))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    /// `‖closed form − finite difference‖_F / ‖finite difference‖_F`.
    pub relative_error: f64,
    pub fd_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationGradReport {
    pub samples: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
    /// Largest entry of the closed-form and finite-difference gradients
    /// with respect to the label column of `W_C`, which should both vanish.
    pub label_c_max: f64,
    pub passed: bool,
}

impl PopulationGradReport {
    pub fn block(&self, name: &str) -> Option<&BlockError> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Central differences of [`LossMoments::loss`] against
/// [`population_gradients`] for the input columns `B`, `C` and the label
/// column `b` of `W_B`.
pub fn population_gradient_check(
    params: &MambaParams,
    betas: &Betas,
    moments: &LossMoments,
    eps: f64,
    tolerance: f64,
) -> LabResult<PopulationGradReport> {
    let closed = population_gradients(params, betas)?;
    let d = params.dims.d;
    let d_h = params.dims.d_h;
    let mut fd_b = DMatrix::zeros(d_h, d + 1);
    let mut fd_c = DMatrix::zeros(d_h, d + 1);
    for j in 0..=d {
        for i in 0..d_h {
            for (target, fd) in [(0, &mut fd_b), (1, &mut fd_c)] {
                let mut plus = params.clone();
                let mut minus = params.clone();
                if target == 0 {
                    plus.w_b[(i, j)] += eps;
                    minus.w_b[(i, j)] -= eps;
                } else {
                    plus.w_c[(i, j)] += eps;
                    minus.w_c[(i, j)] -= eps;
                }
                fd[(i, j)] = (moments.loss(&plus)? - moments.loss(&minus)?) / (2.0 * eps);
            }
        }
    }
    let compare = |name: &str, cf: DMatrix<f64>, fd: DMatrix<f64>| BlockError {
        name: name.to_string(),
        relative_error: (&cf - &fd).norm() / fd.norm().max(f64::MIN_POSITIVE),
        fd_norm: fd.norm(),
    };
    let blocks = vec![
        compare("B", closed.w_b.columns(0, d).into_owned(), fd_b.columns(0, d).into_owned()),
        compare("C", closed.w_c.columns(0, d).into_owned(), fd_c.columns(0, d).into_owned()),
        compare("b", closed.w_b.columns(d, 1).into_owned(), fd_b.columns(d, 1).into_owned()),
    ];
    let label_c_max = closed.w_c.column(d).amax().max(fd_c.column(d).amax());
    let passed = blocks.iter().all(|b| b.relative_error < tolerance) && label_c_max == 0.0;
    Ok(PopulationGradReport { samples: moments.samples, eps, tolerance, blocks, label_c_max, passed })
}
