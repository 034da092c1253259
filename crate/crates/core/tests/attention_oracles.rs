mod common;

use common::{fd_gradient, max_abs, naive_attention, summed_gradient};
use ldit::attention::{
    attention_exact, exp_lowrank, grad_exact, grad_fast, inference_fast, rank_for_accuracy, softmax_matrix, AttentionInstance,
};
use ldit::{rng, DenseMatrix, Error, NormKind};
use proptest::prelude::*;

fn gaussian_instance(d: usize, l: usize, scale: f64, seed: u64) -> AttentionInstance {
    let mut s = rng::stream(seed, 1);
    let mut g = |r, c, k: f64| rng::gaussian_matrix(&mut s, r, c).scale(k);
    AttentionInstance::cross(g(d, l, 1.0), g(d, l, 1.0), g(d, l, 1.0), g(d, d, scale), g(d, d, 1.0), g(d, l, 1.0)).unwrap()
}

/// The bounded instance with its `W_Kᵀ W_Q` split dropped, so `W` is the
/// free variable.
fn unsplit(mut inst: AttentionInstance) -> AttentionInstance {
    inst.split = None;
    inst
}

fn rel_max(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    max_abs(a, b) / b.norm(NormKind::Max).max(1e-300)
}

#[test]
fn exact_attention_matches_naive_oracle() {
    let inst = gaussian_instance(3, 5, 0.5, 1);
    let oracle = naive_attention(&inst.a1, &inst.a2, &inst.a3, &inst.w, &inst.w_ov);
    assert!(max_abs(&attention_exact(&inst).unwrap(), &oracle) <= 1e-12);
    // same check through the W_Kᵀ W_Q split
    let split = AttentionInstance::random_bounded(3, 5, 0.8, 2).unwrap();
    let oracle = naive_attention(&split.a1, &split.a2, &split.a3, &split.w, &split.w_ov);
    assert!(max_abs(&attention_exact(&split).unwrap(), &oracle) <= 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let f = softmax_matrix(&gaussian_instance(4, 9, 0.7, 3)).unwrap();
    for s in f.row_sums() {
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn gradient_matches_finite_differences_d4_l16() {
    let inst = gaussian_instance(4, 16, 0.3, 4);
    let rel = rel_max(&grad_exact(&inst).unwrap(), &fd_gradient(&inst, 1e-5));
    assert!(rel <= 1e-5, "rel = {rel}");
}

#[test]
fn gradient_matches_term_by_term_summation() {
    for seed in 0..5 {
        let inst = gaussian_instance(3 + seed as usize % 3, 7 + seed as usize, 0.4, 10 + seed);
        assert!(max_abs(&grad_exact(&inst).unwrap(), &summed_gradient(&inst)) <= 1e-10);
    }
}

#[test]
fn single_token_gradient_vanishes() {
    let inst = gaussian_instance(3, 1, 1.0, 5);
    assert_eq!(grad_exact(&inst).unwrap().norm(NormKind::Max), 0.0);
    assert!(grad_fast(&inst, 1e-6).unwrap().value.norm(NormKind::Max) <= 1e-12);
    assert!(max_abs(&attention_exact(&inst).unwrap(), &inst.w_ov.matmul(&inst.a3).unwrap()) <= 1e-15);
}

#[test]
fn zero_residual_gives_zero_gradient() {
    let mut inst = gaussian_instance(3, 6, 0.5, 6);
    inst.y = attention_exact(&inst).unwrap();
    assert!(grad_exact(&inst).unwrap().norm(NormKind::Max) <= 1e-12);
}

#[test]
fn zero_scores_are_handled_exactly_by_fast_paths() {
    let mut inst = gaussian_instance(4, 12, 0.0, 7);
    inst.w = DenseMatrix::zeros(4, 4);
    let fast = inference_fast(&inst, 1e-6).unwrap();
    assert_eq!((fast.degree, fast.rank), (0, 1));
    assert!(max_abs(&fast.value, &attention_exact(&inst).unwrap()) <= 1e-12);
    assert!(max_abs(&grad_fast(&inst, 1e-6).unwrap().value, &grad_exact(&inst).unwrap()) <= 1e-10);
    // uniform softmax: every output column is the mean value column
    let v = inst.w_ov.matmul(&inst.a3).unwrap();
    let out = attention_exact(&inst).unwrap();
    for r in 0..4 {
        let mean = v.row(r).iter().sum::<f64>() / 12.0;
        assert!(out.row(r).iter().all(|x| (x - mean).abs() <= 1e-12));
    }
    let (qt, kt) = inst.feature_pair().unwrap();
    let lr = exp_lowrank(&qt, &kt, 1e-6, kt.norm(NormKind::Max)).unwrap();
    assert_eq!(lr.rank, 1);
    assert!(max_abs(&lr.product(), &DenseMatrix::filled(12, 12, 1.0 / 12.0)) <= 1e-15);
}

#[test]
fn tail_rule_example_with_unit_bbar() {
    // B̄ = d·Γ² = 1: g is the smallest integer with e/(g+1)! ≤ eps/4.
    let eps = 1e-6;
    let mut g = 0usize;
    let mut fact = 1.0;
    loop {
        fact *= (g + 1) as f64;
        if std::f64::consts::E / fact <= eps / 4.0 {
            break;
        }
        g += 1;
    }
    let plan = rank_for_accuracy(1.0 / 2f64.sqrt(), 2, eps).unwrap();
    assert_eq!(plan.degree, g);
    assert_eq!(plan.rank, ((g + 1) * (g + 2) / 2) as u128);
}

#[test]
fn low_rank_softmax_within_target_on_small_bounded_instance() {
    let inst = AttentionInstance::random_bounded(2, 8, 0.9, 8).unwrap();
    let (qt, kt) = inst.feature_pair().unwrap();
    let gamma = qt.norm(NormKind::Max).max(kt.norm(NormKind::Max));
    for eps in [1e-3, 1e-6, 1e-9] {
        let lr = exp_lowrank(&qt, &kt, eps, gamma).unwrap();
        let err = max_abs(&lr.product(), &softmax_matrix(&inst).unwrap());
        assert!(err <= eps && err <= lr.err_bound, "eps {eps}: err {err}, bound {}", lr.err_bound);
    }
}

#[test]
fn fast_inference_at_l256() {
    let inst = AttentionInstance::random_bounded(8, 256, 0.5, 9).unwrap();
    let fast = inference_fast(&inst, 1e-6).unwrap();
    assert!(max_abs(&fast.value, &attention_exact(&inst).unwrap()) <= 1e-6);
    let (l, d, k) = (256usize, 8usize, fast.rank);
    assert!(fast.meter.peak_floats <= 4 * l * (k + d), "peak {} vs L(k+d) = {}", fast.meter.peak_floats, l * (k + d));
    assert!(fast.meter.flops <= 8 * (l * k * d) as u64, "flops {}", fast.meter.flops);
}

#[test]
fn fast_gradient_at_l64() {
    let l = 64usize;
    let gamma = 0.4 * (l as f64).ln().sqrt();
    let inst = AttentionInstance::random_bounded(6, l, gamma, 10).unwrap();
    let fast = grad_fast(&inst, 1e-4).unwrap();
    let err = max_abs(&fast.value, &grad_exact(&inst).unwrap());
    assert!(err <= 1e-4 && err <= fast.err_bound, "err {err}, bound {}", fast.err_bound);
    let k2 = fast.rank;
    assert!(fast.meter.peak_floats <= 8 * l * (k2 * k2 + 6), "peak {}", fast.meter.peak_floats);
}

#[test]
fn self_and_cross_modes_agree() {
    let mut s = rng::stream(11, 0);
    let x = rng::gaussian_matrix(&mut s, 4, 10).scale(0.5);
    let a3 = rng::gaussian_matrix(&mut s, 4, 10);
    let w = rng::gaussian_matrix(&mut s, 4, 4).scale(0.3);
    let w_ov = rng::gaussian_matrix(&mut s, 4, 4);
    let y = rng::gaussian_matrix(&mut s, 4, 10);
    let sa = AttentionInstance::self_attention(x.clone(), a3.clone(), w.clone(), w_ov.clone(), y.clone()).unwrap();
    let ca = AttentionInstance::cross(x.clone(), x, a3, w, w_ov, y).unwrap();
    assert_eq!(attention_exact(&sa).unwrap(), attention_exact(&ca).unwrap());
    assert_eq!(grad_exact(&sa).unwrap(), grad_exact(&ca).unwrap());
    assert_eq!(inference_fast(&sa, 1e-6).unwrap().value, inference_fast(&ca, 1e-6).unwrap().value);
    assert_eq!(grad_fast(&sa, 1e-6).unwrap().value, grad_fast(&ca, 1e-6).unwrap().value);
}

#[test]
fn self_mode_rejects_distinct_inputs() {
    let mut inst = gaussian_instance(2, 3, 1.0, 12);
    inst.mode = ldit::attention::AttentionMode::SelfAttention;
    assert!(inst.validate().is_err());
}

#[test]
fn overflow_reports_the_bound() {
    let mut inst = gaussian_instance(2, 4, 1.0, 13);
    inst.w = DenseMatrix::filled(2, 2, 1e4);
    match attention_exact(&inst) {
        Err(Error::Overflow { bound }) => assert!(bound > 700.0),
        other => panic!("expected overflow, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_oracle_agreement(d in 2usize..=8, l in 2usize..=32, seed in 0u64..1000) {
        let inst = gaussian_instance(d, l, 0.5 / d as f64, seed);
        let rel = rel_max(&grad_exact(&inst).unwrap(), &fd_gradient(&inst, 1e-5));
        prop_assert!(rel <= 1e-5, "d {d} L {l}: rel {rel}");
    }

    #[test]
    fn certified_errors_hold(d in 2usize..=5, l in 4usize..=48, gamma in 0.0f64..0.9, eps_exp in 3i32..=9, seed in 0u64..1000) {
        let eps = 10f64.powi(-eps_exp);
        let inst = AttentionInstance::random_bounded(d, l, gamma, seed).unwrap();
        let exact = attention_exact(&inst).unwrap();
        let fast = inference_fast(&inst, eps).unwrap();
        let err = max_abs(&fast.value, &exact);
        prop_assert!(err <= fast.err_bound + 1e-14 && err <= eps, "inference err {err} bound {}", fast.err_bound);
        let g = grad_fast(&inst, eps).unwrap();
        let gerr = max_abs(&g.value, &grad_exact(&inst).unwrap());
        prop_assert!(gerr <= g.err_bound + 1e-14 && gerr <= eps, "gradient err {gerr} bound {}", g.err_bound);
        let (qt, kt) = inst.feature_pair().unwrap();
        let lr = exp_lowrank(&qt, &kt, eps, qt.norm(NormKind::Max).max(kt.norm(NormKind::Max))).unwrap();
        prop_assert!(max_abs(&lr.product(), &softmax_matrix(&inst).unwrap()) <= lr.err_bound.min(eps) + 1e-15);
    }

    #[test]
    fn required_rank_is_monotone_in_gamma(d in 1usize..12, eps_exp in 1i32..10, g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
        let eps = 10f64.powi(-eps_exp);
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = rank_for_accuracy(lo, d, eps).unwrap();
        let b = rank_for_accuracy(hi, d, eps).unwrap();
        prop_assert!(a.degree <= b.degree && a.rank <= b.rank);
    }

    #[test]
    fn unsplit_weights_give_the_same_attention(seed in 0u64..500) {
        let inst = AttentionInstance::random_bounded(3, 6, 0.7, seed).unwrap();
        let plain = unsplit(inst.clone());
        prop_assert!(max_abs(&attention_exact(&inst).unwrap(), &attention_exact(&plain).unwrap()) <= 1e-12);
        prop_assert!(max_abs(&grad_exact(&inst).unwrap(), &grad_exact(&plain).unwrap()) <= 1e-12);
    }
}
