//! In-context linear-regression tasks and Monte-Carlo expectation oracles.
//!
//! A prompt carries a task vector `w ~ N(0, I_d)`, `N` context pairs
//! `(x_i, w·x_i)` and a query `x_q`. Tokens are fed query-last:
//! `e_1, …, e_N, e_q` with `e_i = (x_i, y_i)` and `e_q = (x_q, 0)`.
//!
//! The oracles draw `M` independent tasks and compare sample means of the
//! Gaussian moment identities used by the closed-form gradient against their
//! exact values, at a tolerance of `k` standard errors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{normal_matrix, normal_vector, stream_rng};

/// One in-context regression task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    pub w: DVector<f64>,
    /// Context inputs, one column per example (`d × N`).
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub x_q: DVector<f64>,
    pub y_q: f64,
    /// Embedded prompt, one column per token (`(d+1) × (N+1)`), query last.
    pub tokens: DMatrix<f64>,
}

impl PromptInstance {
    /// Builds the labels and embedding for a given task and inputs.
    pub fn from_task(w: DVector<f64>, xs: DMatrix<f64>, x_q: DVector<f64>) -> Result<Self> {
        let d = w.len();
        if d == 0 || xs.ncols() == 0 {
            return Err(config_err("prompt needs d >= 1 and N >= 1"));
        }
        if xs.nrows() != d || x_q.len() != d {
            return Err(Error::Dimension(format!(
                "task has d = {d} but xs is {}x{} and x_q has length {}",
                xs.nrows(),
                xs.ncols(),
                x_q.len()
            )));
        }
        let n = xs.ncols();
        let ys = DVector::from_fn(n, |i, _| w.dot(&xs.column(i)));
        let y_q = w.dot(&x_q);
        let mut tokens = DMatrix::zeros(d + 1, n + 1);
        for i in 0..n {
            tokens.view_mut((0, i), (d, 1)).copy_from(&xs.column(i));
            tokens[(d, i)] = ys[i];
        }
        tokens.view_mut((0, n), (d, 1)).copy_from(&x_q);
        Ok(Self { w, xs, ys, x_q, y_q, tokens })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn context_len(&self) -> usize {
        self.xs.ncols()
    }

    /// Same inputs, different task vector.
    pub fn with_task(&self, w: DVector<f64>) -> Result<Self> {
        Self::from_task(w, self.xs.clone(), self.x_q.clone())
    }
}

/// Draws a prompt: `w`, then the `N` context inputs, then the query.
pub fn sample_prompt<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Result<PromptInstance> {
    if d == 0 || n == 0 {
        return Err(config_err(format!("sample_prompt needs d >= 1 and N >= 1 (got d = {d}, N = {n})")));
    }
    let w = normal_vector(d, rng);
    let xs = normal_matrix(d, n, rng);
    let x_q = normal_vector(d, rng);
    PromptInstance::from_task(w, xs, x_q)
}

/// `count` prompts drawn from one stream.
pub fn sample_prompts<R: Rng + ?Sized>(
    d: usize,
    n: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PromptInstance>> {
    (0..count).map(|_| sample_prompt(d, n, rng)).collect()
}

/// The decay factor `exp(-ln 2 / N)` that halves a token's weight over `N` steps.
pub fn decay_alpha(n: usize) -> f64 {
    (-std::f64::consts::LN_2 / n as f64).exp()
}

// ---------------------------------------------------------------------------
// Monte-Carlo oracles

const CHUNK: usize = 1 << 14;

/// Running mean and sum of squared deviations per entry (Welford / Chan merge).
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        Self { count: 0, mean: vec![0.0; width], m2: vec![0.0; width] }
    }

    pub fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard error of each mean: sample std / sqrt(M).
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|&m2| if self.count > 1 { (m2 / (n - 1.0)).sqrt() / n.sqrt() } else { f64::INFINITY })
            .collect()
    }
}

/// Runs `sampler` over `samples` draws split into fixed-size chunks, one
/// random stream per chunk, and merges the chunks in order.
fn accumulate<F>(seed: u64, samples: usize, width: usize, sampler: F) -> MomentAccumulator
where
    F: Fn(&mut crate::rng::StreamRng, &mut [f64]) + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<MomentAccumulator> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let mut acc = MomentAccumulator::new(width);
            let mut buf = vec![0.0; width];
            let len = CHUNK.min(samples - c * CHUNK);
            for _ in 0..len {
                sampler(&mut rng, &mut buf);
                acc.push(&buf);
            }
            acc
        })
        .collect();
    let mut total = MomentAccumulator::new(width);
    for part in &parts {
        total.merge(part);
    }
    total
}

/// Sample count, seed and tolerance for an oracle run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleConfig {
    pub samples: usize,
    pub seed: u64,
    /// Pass threshold in standard errors.
    pub k: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { samples: 1_000_000, seed: 0, k: 4.0 }
    }
}

/// Comparison of one (possibly matrix-valued) expectation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    /// Entry layout: `[rows, cols]`, column-major.
    pub shape: [usize; 2],
    pub closed_form: Vec<f64>,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub samples: usize,
    /// Largest |estimate − closed form| / SE over the entries.
    pub max_z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub d: usize,
    pub n: Option<usize>,
    pub k: f64,
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&OracleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Quantity {
    name: &'static str,
    shape: [usize; 2],
    closed_form: Vec<f64>,
}

impl Quantity {
    fn scalar(name: &'static str, value: f64) -> Self {
        Self { name, shape: [1, 1], closed_form: vec![value] }
    }

    fn zero_vector(name: &'static str, d: usize) -> Self {
        Self { name, shape: [d, 1], closed_form: vec![0.0; d] }
    }

    fn scaled_identity(name: &'static str, d: usize, scale: f64) -> Self {
        let closed_form = DMatrix::<f64>::identity(d, d).scale(scale).as_slice().to_vec();
        Self { name, shape: [d, d], closed_form }
    }

    fn width(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

fn build_report(d: usize, n: Option<usize>, k: f64, quantities: &[Quantity], acc: &MomentAccumulator) -> OracleReport {
    let se = acc.std_error();
    let mut offset = 0;
    let checks = quantities
        .iter()
        .map(|q| {
            let range = offset..offset + q.width();
            offset += q.width();
            let estimate = acc.mean()[range.clone()].to_vec();
            let std_error = se[range].to_vec();
            let mut max_z: f64 = 0.0;
            let mut passed = true;
            for ((&est, &cf), &s) in estimate.iter().zip(&q.closed_form).zip(&std_error) {
                let diff = (est - cf).abs();
                if diff == 0.0 {
                    continue;
                }
                let z = if s > 0.0 { diff / s } else { f64::INFINITY };
                max_z = max_z.max(z);
                passed &= diff <= k * s;
            }
            OracleCheck {
                name: q.name.to_string(),
                shape: q.shape,
                closed_form: q.closed_form.clone(),
                estimate,
                std_error,
                samples: acc.count(),
                max_z,
                passed,
            }
        })
        .collect();
    OracleReport { d, n, k, checks }
}

/// Single-example Gaussian moments with `y = xᵀw`:
/// `E[y²] = d`, `E[y⁴] = 3d(d+2)`, `E[x xᵀ w wᵀ x xᵀ] = (d+2) I`.
pub fn mc_moment_oracle(d: usize, config: OracleConfig) -> Result<OracleReport> {
    if d == 0 || config.samples < 2 {
        return Err(config_err("moment oracle needs d >= 1 and at least two samples"));
    }
    let df = d as f64;
    let quantities = [
        Quantity::scalar("E[y^2]", df),
        Quantity::scalar("E[y^4]", 3.0 * df * (df + 2.0)),
        Quantity::scaled_identity("E[x x^T w w^T x x^T]", d, df + 2.0),
    ];
    let width = 2 + d * d;
    let acc = accumulate(config.seed, config.samples, width, |rng, out| {
        let x = normal_vector(d, rng);
        let w = normal_vector(d, rng);
        let y = x.dot(&w);
        out[0] = y * y;
        out[1] = y * y * y * y;
        // x xᵀ w wᵀ x xᵀ = y² x xᵀ
        for j in 0..d {
            for i in 0..d {
                out[2 + j * d + i] = y * y * x[i] * x[j];
            }
        }
    });
    Ok(build_report(d, None, config.k, &quantities, &acc))
}

/// Exact values of the α-weighted sums over a prompt, with `a_i = α^{i+1}`
/// weighting example `N − i` and `α = exp(−ln2/N)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SequenceMoments {
    pub alpha: f64,
    /// `E[ΣΣ a_i a_j y_i y_j x_i x_jᵀ]` as a multiple of `I`.
    pub label_input_second: f64,
    /// `E[ΣΣ a_i a_j y_i² y_j²] = (d² + 2d)(Σa)² + (2d² + 4d)Σa²`. Labels
    /// share the task, so `E[y_i² y_j²] = E[‖w‖⁴] = d(d+2)` for `i ≠ j`.
    pub label_fourth: f64,
    /// `d²(Σa)² + (2d² + 6d)Σa²`, the value obtained by treating `y_i²` and
    /// `y_j²` as independent. Wrong whenever `N ≥ 2`.
    pub label_fourth_independent: f64,
    /// `E[Σ a_i y_i x_i wᵀ]` as a multiple of `I`.
    pub label_input_task: f64,
    /// `E[ΣΣ a_i a_j y_i y_j]`.
    pub label_second: f64,
}

impl SequenceMoments {
    pub fn new(d: usize, n: usize) -> Self {
        let alpha = decay_alpha(n);
        let df = d as f64;
        let a2 = alpha * alpha;
        let an = alpha.powi(n as i32);
        let a2n = an * an;
        let geometric = a2 * (1.0 - an).powi(2) / (1.0 - alpha).powi(2);
        let diagonal = a2 * (1.0 - a2n) / ((1.0 - alpha) * (1.0 + alpha));
        Self {
            alpha,
            label_input_second: geometric + (df + 1.0) * diagonal,
            label_fourth: (df * df + 2.0 * df) * geometric + (2.0 * df * df + 4.0 * df) * diagonal,
            label_fourth_independent: df * df * geometric + (2.0 * df * df + 6.0 * df) * diagonal,
            label_input_task: alpha * (1.0 - an) / (1.0 - alpha),
            label_second: df * diagonal,
        }
    }
}

/// Prompt-level α-weighted expectations, compared entrywise; matrix
/// identities against `scalar · I`, odd moments against 0.
///
/// The nine identities come first. A tenth check compares the fourth-order
/// sample against the independent-labels value, which is expected to fail
/// for `N ≥ 2` at large `M`.
pub fn mc_sequence_oracle(d: usize, n: usize, config: OracleConfig) -> Result<OracleReport> {
    if d == 0 || n == 0 || config.samples < 2 {
        return Err(config_err("sequence oracle needs d >= 1, N >= 1 and at least two samples"));
    }
    let exact = SequenceMoments::new(d, n);
    let quantities = [
        Quantity::scaled_identity("sum_ij a_i a_j y_i y_j x_i x_j^T", d, exact.label_input_second),
        Quantity::zero_vector("sum_ij a_i a_j y_i y_j^2 x_i", d),
        Quantity::scalar("sum_ij a_i a_j y_i^2 y_j^2", exact.label_fourth),
        Quantity::scaled_identity("sum_i a_i y_i x_i w^T", d, exact.label_input_task),
        Quantity::zero_vector("sum_i a_i y_i^2 w", d),
        Quantity::zero_vector("sum_ij a_i a_j x_i y_i y_j", d),
        Quantity::scalar("sum_ij a_i a_j y_i^2 y_j", 0.0),
        Quantity::scalar("sum_ij a_i a_j y_i y_j", exact.label_second),
        Quantity::zero_vector("sum_i a_i y_i w", d),
        Quantity::scalar("sum_ij a_i a_j y_i^2 y_j^2 (independent labels)", exact.label_fourth_independent),
    ];
    let width: usize = quantities.iter().map(Quantity::width).sum();
    let alpha = exact.alpha;
    let acc = accumulate(config.seed, config.samples, width, |rng, out| {
        let w = normal_vector(d, rng);
        // s1 = Σ a y x, s2 = Σ a y², s0 = Σ a y; the double sums factor into products of these.
        let mut s1 = DVector::<f64>::zeros(d);
        let (mut s2, mut s0) = (0.0, 0.0);
        let mut weight = alpha.powi(n as i32);
        for _ in 0..n {
            let x = normal_vector(d, rng);
            let y = x.dot(&w);
            s1.axpy(weight * y, &x, 1.0);
            s2 += weight * y * y;
            s0 += weight * y;
            weight /= alpha;
        }
        let mut k = 0;
        let mut put = |v: f64| {
            out[k] = v;
            k += 1;
        };
        for j in 0..d {
            for i in 0..d {
                put(s1[i] * s1[j]);
            }
        }
        for i in 0..d {
            put(s1[i] * s2);
        }
        put(s2 * s2);
        for j in 0..d {
            for i in 0..d {
                put(s1[i] * w[j]);
            }
        }
        for i in 0..d {
            put(s2 * w[i]);
        }
        for i in 0..d {
            put(s1[i] * s0);
        }
        put(s2 * s0);
        put(s0 * s0);
        for i in 0..d {
            put(s0 * w[i]);
        }
        put(s2 * s2);
    });
    Ok(build_report(d, Some(n), config.k, &quantities, &acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn prompt_shapes_and_labels() {
        let mut rng = stream_rng(11, 0);
        let p = sample_prompt(4, 50, &mut rng).unwrap();
        assert_eq!(p.tokens.shape(), (5, 51));
        for i in 0..50 {
            assert_eq!(p.ys[i] - p.w.dot(&p.xs.column(i)), 0.0);
            assert_eq!(p.tokens[(4, i)], p.ys[i]);
        }
        assert_eq!(p.tokens[(4, 50)], 0.0);
        assert_eq!(p.y_q, p.w.dot(&p.x_q));
    }

    #[test]
    fn smallest_prompt() {
        let mut rng = stream_rng(1, 0);
        let p = sample_prompt(1, 1, &mut rng).unwrap();
        assert_eq!(p.tokens.shape(), (2, 2));
        assert_eq!(p.tokens[(0, 0)], p.xs[(0, 0)]);
        assert_eq!(p.tokens[(1, 0)], p.w[0] * p.xs[(0, 0)]);
        assert_eq!(p.tokens[(0, 1)], p.x_q[0]);
        assert_eq!(p.tokens[(1, 1)], 0.0);
    }

    #[test]
    fn rejects_empty_dimensions() {
        let mut rng = stream_rng(1, 0);
        assert!(matches!(sample_prompt(0, 5, &mut rng), Err(Error::Config(_))));
        assert!(matches!(sample_prompt(3, 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_prompt() {
        let a = sample_prompt(3, 7, &mut stream_rng(5, 2)).unwrap();
        let b = sample_prompt(3, 7, &mut stream_rng(5, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..101).map(|i| ((i * 37) % 17) as f64 - 3.5).collect();
        let mut whole = MomentAccumulator::new(1);
        xs.iter().for_each(|&x| whole.push(&[x]));
        let mut left = MomentAccumulator::new(1);
        let mut right = MomentAccumulator::new(1);
        xs[..40].iter().for_each(|&x| left.push(&[x]));
        xs[40..].iter().for_each(|&x| right.push(&[x]));
        left.merge(&right);
        assert!((left.mean()[0] - whole.mean()[0]).abs() < 1e-12);
        assert!((left.std_error()[0] - whole.std_error()[0]).abs() < 1e-12);
    }

    #[test]
    fn moment_closed_forms() {
        let report = mc_moment_oracle(4, OracleConfig { samples: 10, seed: 0, k: 4.0 }).unwrap();
        assert_eq!(report.check("E[y^2]").unwrap().closed_form, vec![4.0]);
        let report = mc_moment_oracle(2, OracleConfig { samples: 10, seed: 0, k: 4.0 }).unwrap();
        assert_eq!(report.check("E[y^4]").unwrap().closed_form, vec![24.0]);
    }

    #[test]
    fn sequence_closed_forms_single_term() {
        // N = 1: the double sums have the single term i = j = 0 with weight α².
        let m = SequenceMoments::new(1, 1);
        assert!((m.alpha - 0.5).abs() < 1e-15);
        let a2 = m.alpha * m.alpha;
        assert!((m.label_fourth - 9.0 * a2).abs() < 1e-12);
        assert!((m.label_fourth_independent - m.label_fourth).abs() < 1e-12);
        assert!((m.label_second - a2).abs() < 1e-12);
        // E[y² x xᵀ] = (d+2) I = 3 for d = 1.
        assert!((m.label_input_second - 3.0 * a2).abs() < 1e-12);
        assert!((m.label_input_task - m.alpha).abs() < 1e-12);
    }

    #[test]
    fn sequence_closed_form_matches_direct_sum() {
        // d = 2, N = 4: Σ_i Σ_j α^{i+j+2} E[y_i y_j] keeps only i = j, each E[y²] = d.
        let (d, n) = (2usize, 4usize);
        let alpha = decay_alpha(n);
        let direct: f64 = (0..n).map(|i| alpha.powi(2 * i as i32 + 2) * d as f64).sum();
        let m = SequenceMoments::new(d, n);
        assert!((m.label_second - direct).abs() < 1e-12);
    }
}
