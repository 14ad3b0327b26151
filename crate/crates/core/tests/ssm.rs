use mamba_icl::rng::{normal_vector, stream_rng};
use mamba_icl::ssm::{
    empirical_loss, forward_predict, predict, projected_states, scan_step, selection_discretize,
    selection_discretize_dense, Dims, MambaParams,
};
use mamba_icl::task_gen::{sample_prompt, sample_prompts, PromptInstance};
use mamba_icl::theory::{converged_params, converged_predict, theoretical_loss};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `(1−α)(C x_q + b_C)ᵀ Σ_{i<N} α^{i+1} y_{N−i} (B x_{N−i} + y_{N−i} b + b_B)`,
/// written out token by token.
fn unrolled_prediction(params: &MambaParams, prompt: &PromptInstance) -> f64 {
    let n = prompt.context_len();
    let alpha = (-std::f64::consts::LN_2 / n as f64).exp();
    let b = params.input_b();
    let bias = params.label_b();
    let mut state = DVector::zeros(params.dims.d_h);
    for i in 0..n {
        let l = n - 1 - i;
        let x = prompt.xs.column(l);
        let y = prompt.ys[l];
        let select = b * x + bias * y + &params.b_b;
        state += select * (alpha.powi(i as i32 + 1) * y);
    }
    let c = params.input_c() * &prompt.x_q + &params.b_c;
    (1.0 - alpha) * c.dot(&state)
}

fn assumption_params(d: usize, d_h: usize, n: usize, seed: u64) -> MambaParams {
    MambaParams::gaussian_init(Dims::new(d, d_h, n).unwrap(), &mut stream_rng(seed, 0))
}

#[test]
fn default_step_size_and_decay() {
    let p = assumption_params(4, 8, 50, 0);
    let u = DVector::from_element(5, 0.5);
    let sel = selection_discretize(&p, u.column(0)).unwrap();
    let alpha = (-std::f64::consts::LN_2 / 50.0).exp();
    assert!((sel.delta - 0.013_862_943_611_198_9).abs() < 1e-15);
    assert!((alpha - 0.986_232_704_493_0).abs() < 1e-12);
    for j in 0..8 {
        assert!((sel.a_bar[j] - alpha).abs() < 1e-15);
        assert!((sel.b_bar[j] - (1.0 - alpha) * sel.b[j]).abs() < 1e-15);
    }
}

#[test]
fn label_channel_recurrence() {
    let p = assumption_params(3, 6, 10, 1);
    let alpha = (-std::f64::consts::LN_2 / 10.0).exp();
    let u = DVector::from_vec(vec![0.2, -0.4, 1.1, 0.7]);
    let sel = selection_discretize(&p, u.column(0)).unwrap();
    let h = DMatrix::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.1);
    let (next, _) = scan_step(&h, &sel, u.column(0));
    let expected = h.column(3) * alpha + &sel.b * ((1.0 - alpha) * u[3]);
    assert!((next.column(3) - expected).amax() < 1e-15);
}

#[test]
fn zero_projection_predicts_zero() {
    let dims = Dims::new(3, 5, 7).unwrap();
    let mut p = MambaParams::gaussian_init(dims, &mut stream_rng(2, 0));
    p.w_b.fill(0.0);
    let prompt = sample_prompt(3, 7, &mut stream_rng(2, 1)).unwrap();
    assert_eq!(forward_predict(&p, &prompt, false).unwrap().prediction, 0.0);
    assert_eq!(predict(&p, &prompt).unwrap(), 0.0);
}

#[test]
fn zero_projection_loss_is_half_label_variance() {
    let dims = Dims::new(4, 5, 6).unwrap();
    let p = MambaParams::zeros(dims);
    let prompts = sample_prompts(4, 6, 20_000, &mut stream_rng(3, 0)).unwrap();
    let loss = empirical_loss(&p, &prompts).unwrap();
    let direct = prompts.iter().map(|q| 0.5 * q.y_q * q.y_q).sum::<f64>() / prompts.len() as f64;
    assert!((loss - direct).abs() < 1e-12);
    // E[½ y_q²] = d/2 = 2; Var(½ y²) = (3d(d+2) − d²)/4 = 14, SE ≈ 0.026.
    assert!((loss - 2.0).abs() < 4.0 * (14.0f64 / 20_000.0).sqrt());
}

#[test]
fn exact_model_has_zero_loss() {
    // Fixed prompts with labels generated by the model itself.
    let dims = Dims::new(2, 4, 3).unwrap();
    let p = MambaParams::gaussian_init(dims, &mut stream_rng(4, 0));
    let prompts: Vec<PromptInstance> = sample_prompts(2, 3, 5, &mut stream_rng(4, 1))
        .unwrap()
        .into_iter()
        .map(|mut q| {
            q.y_q = predict(&p, &q).unwrap();
            q
        })
        .collect();
    assert_eq!(empirical_loss(&p, &prompts).unwrap(), 0.0);
}

#[test]
fn matches_unrolled_sum_small() {
    let p = assumption_params(2, 5, 3, 5);
    let prompt = sample_prompt(2, 3, &mut stream_rng(5, 1)).unwrap();
    let scan = forward_predict(&p, &prompt, true).unwrap().prediction;
    let direct = unrolled_prediction(&p, &prompt);
    assert!((scan - direct).abs() <= 1e-10 * direct.abs().max(1e-300));
}

#[test]
fn converged_params_reproduce_closed_form_predictor() {
    let dims = Dims::new(4, 80, 50).unwrap();
    let mut rng = stream_rng(6, 0);
    let p = converged_params(dims, &mut rng).unwrap();
    for _ in 0..100 {
        let prompt = sample_prompt(4, 50, &mut rng).unwrap();
        let scan = forward_predict(&p, &prompt, false).unwrap().prediction;
        let closed = converged_predict(&prompt).unwrap();
        assert!((scan - closed).abs() <= 1e-10 * closed.abs().max(1e-3), "{scan} vs {closed}");
    }
}

#[test]
fn converged_test_loss_under_bound() {
    let dims = Dims::new(4, 80, 50).unwrap();
    let mut rng = stream_rng(7, 0);
    let p = converged_params(dims, &mut rng).unwrap();
    let test = sample_prompts(4, 50, 1000, &mut rng).unwrap();
    let loss = empirical_loss(&p, &test).unwrap();
    let theory = theoretical_loss(4, 50).unwrap();
    assert!(loss <= theory.bound, "{loss} > {}", theory.bound);
}

#[test]
fn dense_discretization_agrees() {
    let dims = Dims::new(3, 10, 9).unwrap();
    let mut rng = stream_rng(8, 0);
    let mut p = MambaParams::gaussian_init(dims, &mut rng);
    p.a_diag = DVector::from_fn(10, |j, _| -0.3 - 0.2 * j as f64);
    p.w_delta = normal_vector(4, &mut rng) * 0.5;
    let u = normal_vector(4, &mut rng);
    let sel = selection_discretize(&p, u.column(0)).unwrap();
    let (a_bar, b_bar) = selection_discretize_dense(&p, u.column(0)).unwrap();
    assert!((DMatrix::from_diagonal(&sel.a_bar) - a_bar).amax() < 1e-12);
    assert!((sel.b_bar - b_bar).amax() < 1e-12);
}

#[test]
fn projected_states_track_task() {
    let dims = Dims::new(4, 80, 50).unwrap();
    let mut rng = stream_rng(9, 0);
    let p = converged_params(dims, &mut rng).unwrap();
    let prompt = sample_prompt(4, 50, &mut rng).unwrap();
    let states = projected_states(&p, &prompt).unwrap();
    assert_eq!(states.len(), 50);
    let cos = |v: &DVector<f64>| v.dot(&prompt.w) / (v.norm() * prompt.w.norm());
    assert!(cos(&states[49]) > cos(&states[0]));
}

#[test]
fn dimension_mismatch_is_reported() {
    let p = assumption_params(3, 4, 5, 0);
    let prompt = sample_prompt(2, 5, &mut stream_rng(0, 1)).unwrap();
    assert!(forward_predict(&p, &prompt, false).is_err());
    assert!(predict(&p, &prompt).is_err());
}

fn permute(v: &DVector<f64>, perm: &[usize]) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[perm[i]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scan_equals_unrolled_sum(d in 1usize..5, d_h in 1usize..9, n in 1usize..12, seed in any::<u64>()) {
        let p = assumption_params(d, d_h, n, seed);
        let prompt = sample_prompt(d, n, &mut stream_rng(seed, 1)).unwrap();
        let scan = forward_predict(&p, &prompt, false).unwrap().prediction;
        let direct = unrolled_prediction(&p, &prompt);
        let scale = p.input_c().norm() * p.w_b.norm() * prompt.tokens.norm().powi(2);
        prop_assert!((scan - direct).abs() <= 1e-10 * direct.abs().max(1e-6 * scale));
    }

    #[test]
    fn channel_permutation_commutes(d in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
        let dims = Dims::new(d, 5, n).unwrap();
        let mut rng = stream_rng(seed, 0);
        let mut p = MambaParams::gaussian_init(dims, &mut rng);
        p.w_delta = normal_vector(d + 1, &mut rng) * 0.3;
        let prompt = sample_prompt(d, n, &mut rng).unwrap();
        // Reverse the channel order of every token and the matching columns.
        let perm: Vec<usize> = (0..=d).rev().collect();
        let mut q = p.clone();
        for (i, &src) in perm.iter().enumerate() {
            q.w_b.set_column(i, &p.w_b.column(src));
            q.w_c.set_column(i, &p.w_c.column(src));
        }
        q.w_delta = permute(&p.w_delta, &perm);
        let tokens = DMatrix::from_fn(d + 1, n + 1, |i, l| prompt.tokens[(perm[i], l)]);
        let a = forward_predict(&p, &prompt, true).unwrap();
        for l in 0..=n {
            let u = tokens.column(l);
            let u_orig = prompt.tokens.column(l);
            let sel_p = selection_discretize(&q, u).unwrap();
            let sel_o = selection_discretize(&p, u_orig).unwrap();
            prop_assert!((sel_p.b_bar - sel_o.b_bar).amax() < 1e-12);
        }
        // Rerun the scan on permuted tokens by hand and compare outputs.
        let mut h = DMatrix::zeros(5, d + 1);
        for l in 0..=n {
            let sel = selection_discretize(&q, tokens.column(l)).unwrap();
            let (next, out) = scan_step(&h, &sel, tokens.column(l));
            h = next;
            let back = DVector::from_fn(d + 1, |i, _| out[perm.iter().position(|&s| s == i).unwrap()]);
            prop_assert!((back - &a.outputs[l]).amax() <= 1e-12 * a.outputs[l].amax().max(1.0));
        }
    }

    #[test]
    fn label_scaling_is_linear(d in 1usize..4, n in 1usize..8, s in -3.0f64..3.0, seed in any::<u64>()) {
        let mut p = assumption_params(d, 6, n, seed);
        p.w_b.column_mut(d).fill(0.0);
        let prompt = sample_prompt(d, n, &mut stream_rng(seed, 1)).unwrap();
        let scaled = prompt.with_task(&prompt.w * s).unwrap();
        let y = predict(&p, &prompt).unwrap();
        let ys = predict(&p, &scaled).unwrap();
        prop_assert!((ys - s * y).abs() <= 1e-10 * (s * y).abs().max(1e-9));
    }
}
