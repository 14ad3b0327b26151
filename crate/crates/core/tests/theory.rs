use mamba_icl::rng::{normal_vector, stream_rng};
use mamba_icl::ssm::{orthonormal_columns, Dims, MambaParams};
use mamba_icl::task_gen::{sample_prompt, sample_prompts, PromptInstance, SequenceMoments};
use mamba_icl::theory::{
    beta_closed_form, converged_predict, linear_attention_optimal_loss, linear_attention_optimal_scale,
    linear_attention_predict, ortho_dynamics, population_loss, projected_state_update, s4_static_predict,
    theoretical_loss, Betas, OrthoRecursion, StaticSsm, TheoryConstants,
};
use mamba_icl::training::population_step;
use nalgebra::{DMatrix, DVector};

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[test]
fn short_context_table() {
    let expected = [8.4484, 7.8425, 7.3173, 6.8579, 6.4526, 6.0926, 5.7706, 5.4810, 5.2190];
    for (k, n) in (4..=20).step_by(2).enumerate() {
        assert_eq!(round4(theoretical_loss(20, n).unwrap().loss), expected[k], "N = {n}");
    }
}

#[test]
fn linear_attention_table() {
    let mamba = [2.6671, 1.8189, 1.3800, 1.1117, 0.9308, 0.8005, 0.7022, 0.6254];
    let la = [2.6190, 1.7742, 1.3415, 1.0784, 0.9016, 0.7746, 0.6790, 0.6044];
    for (k, n) in (10..=80).step_by(10).enumerate() {
        assert_eq!(round4(linear_attention_optimal_loss(10, n).unwrap()), la[k], "N = {n}");
        assert!((theoretical_loss(10, n).unwrap().loss - mamba[k]).abs() < 1e-3, "N = {n}");
        assert!(linear_attention_optimal_loss(10, n).unwrap() <= theoretical_loss(10, n).unwrap().loss);
    }
}

#[test]
fn loss_from_target_ratio() {
    // (d/2)(1 − β3²/β1) for d = 10, N = 10.
    let b = Betas::new(10, 10).unwrap();
    let ratio = b.beta3 * b.beta3 / b.beta1;
    assert!((ratio - 0.4666).abs() < 1e-4);
    assert!((5.0 * (1.0 - ratio) - theoretical_loss(10, 10).unwrap().loss).abs() < 1e-12);
}

#[test]
fn reference_values() {
    assert!((theoretical_loss(4, 30).unwrap().loss - 0.2954).abs() < 5e-5);
    let t = theoretical_loss(4, 50).unwrap();
    assert!((t.bound - 0.6).abs() < 1e-15);
    let b = Betas::new(4, 50).unwrap();
    assert!((b.alpha - 0.986_232_704_49).abs() < 1e-10);
    assert!((b.beta1 - 0.268_445_57).abs() < 1e-8);
    // Direct double sum (1−α)² Σ_ij α^{i+j+2} E[y_i² y_j²].
    assert!((b.beta2 - 6.078_635_29).abs() < 1e-8);
    assert!((b.beta2_independent - 4.173_776_33).abs() < 1e-8);
    assert!((b.beta3 - 0.493_116_35).abs() < 1e-8);
}

#[test]
fn identities_over_grid() {
    for d in [2, 4, 10, 20] {
        let mut last = f64::INFINITY;
        for n in 4..=100 {
            let c = TheoryConstants::new(d, n, 80, 0.05).unwrap();
            assert!((c.beta - c.beta3 / c.beta1).abs() < 1e-12);
            assert!((c.alpha.powi(n as i32) - 0.5).abs() < 1e-12);
            assert!((c.alpha.powi(2 * n as i32) - 0.25).abs() < 1e-12);
            let t = theoretical_loss(d, n).unwrap();
            assert!(t.loss <= t.bound);
            assert!(t.loss < last, "loss not decreasing at d = {d}, N = {n}");
            last = t.loss;
            if n as f64 >= mamba_icl::dynamics::min_context_len(d) {
                assert!(c.beta2 >= 4.0 * c.beta1);
            }
        }
    }
}

#[test]
fn betas_match_sequence_moments() {
    // β1 and β2 are the α-weighted second moments scaled by (1−α)²; β3 by (1−α).
    for (d, n) in [(1, 1), (2, 4), (4, 50), (10, 20)] {
        let b = Betas::new(d, n).unwrap();
        let m = SequenceMoments::new(d, n);
        let s = 1.0 - m.alpha;
        assert!((b.beta1 - s * s * m.label_input_second).abs() < 1e-12);
        assert!((b.beta2 - s * s * m.label_fourth).abs() < 1e-10);
        assert!((b.beta2_independent - s * s * m.label_fourth_independent).abs() < 1e-10);
        assert!((b.beta3 - s * m.label_input_task).abs() < 1e-12);
    }
}

#[test]
fn delta_max_formula() {
    let c = TheoryConstants::new(4, 50, 80, 0.05).unwrap();
    let expected = 3.0 * (80.0 * (4.0 * 4.0 * 9.0 / 0.05f64).ln()).sqrt();
    assert!((c.delta_max - expected).abs() < 1e-12);
    assert_eq!(c.gamma, 40.0);
}

#[test]
fn single_token_converged_prediction() {
    let prompt = PromptInstance::from_task(
        DVector::from_vec(vec![1.5]),
        DMatrix::from_vec(1, 1, vec![0.8]),
        DVector::from_vec(vec![-0.6]),
    )
    .unwrap();
    let alpha = 0.5;
    let beta = beta_closed_form(1, 1);
    let expected = (1.0 - alpha) * alpha * beta * (1.5 * 0.8) * 0.8 * -0.6;
    assert!((converged_predict(&prompt).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn zero_labels_predict_zero() {
    let mut rng = stream_rng(1, 0);
    let p = sample_prompt(3, 10, &mut rng).unwrap();
    let zeroed = p.with_task(DVector::zeros(3)).unwrap();
    assert_eq!(converged_predict(&zeroed).unwrap(), 0.0);
}

#[test]
fn projected_recursion_telescopes() {
    let mut rng = stream_rng(2, 0);
    for n in [1, 5, 50] {
        let prompt = sample_prompt(4, n, &mut rng).unwrap();
        let betas = Betas::new(4, n).unwrap();
        let mut h = DVector::zeros(4);
        for l in 0..n {
            h = projected_state_update(&h, &prompt.xs.column(l).into_owned(), prompt.ys[l], &betas);
        }
        // The query token carries label 0: one more decay step.
        h = projected_state_update(&h, &prompt.x_q, 0.0, &betas);
        let closed = converged_predict(&prompt).unwrap();
        assert!((h.dot(&prompt.x_q) - closed).abs() <= 1e-12 * closed.abs().max(1.0));
    }
}

#[test]
fn projected_fixed_point_and_base_case() {
    let betas = Betas::new(3, 10).unwrap();
    let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
    let fixed = &x * (betas.target() * 1.7);
    assert!((projected_state_update(&fixed, &x, 1.7, &betas) - &fixed).amax() < 1e-15);
    let base = projected_state_update(&DVector::zeros(3), &x, 1.7, &betas);
    assert!((base - &x * ((1.0 - betas.alpha) * betas.target() * 1.7)).amax() < 1e-15);
}

#[test]
fn linear_attention_scale_minimizes_loss() {
    // Monte-Carlo loss of (c/N) x_qᵀ Σ y_i x_i near the optimal scale.
    let (d, n) = (3, 12);
    let prompts = sample_prompts(d, n, 100_000, &mut stream_rng(3, 0)).unwrap();
    let loss = |c: f64| prompts.iter().map(|p| 0.5 * (linear_attention_predict(p, c) - p.y_q).powi(2)).sum::<f64>() / prompts.len() as f64;
    let star = linear_attention_optimal_scale(d, n);
    let exact = linear_attention_optimal_loss(d, n).unwrap();
    assert!((loss(star) - exact).abs() < 0.05 * exact);
    assert!(loss(star) < loss(star * 1.3));
    assert!(loss(star) < loss(star * 0.7));
}

#[test]
fn linear_attention_vanishes_like_inverse_n() {
    let a = linear_attention_optimal_loss(1, 1_000).unwrap();
    let b = linear_attention_optimal_loss(1, 2_000).unwrap();
    assert!((a / b - 2.0).abs() < 0.01);
}

#[test]
fn static_ssm_coefficients_ignore_task() {
    let mut rng = stream_rng(4, 0);
    let model = StaticSsm {
        b: normal_vector(6, &mut rng),
        c: normal_vector(6, &mut rng),
        a_diag: DVector::from_element(6, -1.0),
        delta: 0.05,
    };
    let p = sample_prompt(4, 20, &mut rng).unwrap();
    let q = p.with_task(normal_vector(4, &mut rng)).unwrap();
    let k = model.coefficients(p.tokens.ncols()).unwrap();
    assert_eq!(k, model.coefficients(q.tokens.ncols()).unwrap());
    let direct: f64 = (0..=20).map(|j| k[j] * p.tokens[(4, j)]).sum();
    assert!((s4_static_predict(&model, &p).unwrap() - direct).abs() < 1e-12);
    let zero = StaticSsm { b: DVector::zeros(6), ..model };
    assert_eq!(s4_static_predict(&zero, &p).unwrap(), 0.0);
}

#[test]
fn static_ssm_cannot_beat_linear_attention() {
    let (d, n) = (4, 20);
    let mut rng = stream_rng(5, 0);
    let model = StaticSsm {
        b: normal_vector(8, &mut rng),
        c: normal_vector(8, &mut rng),
        a_diag: DVector::from_element(8, -1.0),
        delta: std::f64::consts::LN_2 / n as f64,
    };
    let prompts = sample_prompts(d, n, 40_000, &mut rng).unwrap();
    let outputs: Vec<f64> = prompts.iter().map(|p| s4_static_predict(&model, p).unwrap()).collect();
    // Best scalar multiple of the static output, fitted on the same prompts.
    let num: f64 = outputs.iter().zip(&prompts).map(|(o, p)| o * p.y_q).sum();
    let den: f64 = outputs.iter().map(|o| o * o).sum();
    let scale = num / den;
    let loss = outputs.iter().zip(&prompts).map(|(o, p)| 0.5 * (scale * o - p.y_q).powi(2)).sum::<f64>() / prompts.len() as f64;
    assert!(loss >= linear_attention_optimal_loss(d, n).unwrap());
}

#[test]
fn ortho_dynamics_converge() {
    let b = Betas::new(4, 50).unwrap();
    let trace = ortho_dynamics(4, 50, 0.01, 100_000, OrthoRecursion::Published).unwrap();
    assert!((trace.h.last().unwrap() - b.target()).abs() < 1e-8);
    assert!(trace.converged_at.is_some());
    // Monotone approach from below.
    assert!(trace.h.windows(2).all(|w| w[1] >= w[0] - 1e-15));
}

#[test]
fn ortho_fixed_point_is_stationary() {
    // g and h stay put once the residual vanishes: check through the recursion from the fixed point.
    let b = Betas::new(4, 50).unwrap();
    let trace = ortho_dynamics(4, 50, 0.01, 100_000, OrthoRecursion::Published).unwrap();
    let t = trace.converged_at.unwrap();
    let tail = &trace.h[t..];
    assert!(tail.iter().all(|h| (b.beta3 - b.beta1 * h).abs() < 1e-8));
}

/// Population steps on explicit matrices from orthonormal columns; every
/// Gram block stays a multiple of the identity.
#[test]
fn matrix_consistent_recursion_tracks_matrix_run() {
    let (d, n, d_h, eta) = (4, 50, 20, 0.01);
    let dims = Dims::new(d, d_h, n).unwrap();
    let q = orthonormal_columns(d_h, 2 * d + 2, &mut stream_rng(6, 0));
    // B and C share their columns' orthonormal frame scaled so that b_iᵀb_i = c_iᵀc_i = 1 and c_iᵀb_i = 0.
    let w_b = q.columns(0, d + 1).into_owned();
    let w_c = q.columns(d + 1, d + 1).into_owned();
    let mut params = MambaParams::with_projections(dims, w_b, w_c).unwrap();
    let betas = Betas::new(d, n).unwrap();
    let trace = ortho_dynamics(d, n, eta, 50, OrthoRecursion::MatrixConsistent).unwrap();
    for t in 1..=50 {
        population_step(&mut params, &betas, eta).unwrap();
        let cb = params.input_c().tr_mul(&params.input_b());
        let bb = params.input_b().tr_mul(&params.input_b());
        assert!((cb[(0, 0)] - trace.h[t]).abs() < 1e-12, "t = {t}");
        assert!((bb[(0, 0)] - trace.g[t]).abs() < 1e-12, "t = {t}");
    }
    let loss = population_loss(&params, &betas).unwrap();
    assert!(loss < 2.0);
}
