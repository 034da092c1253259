mod common;

use common::{covariance, sym_spectral};
use ldit::diffusion::{
    backward_sample, backward_sample_coupled, dist_proxy, draw_batch, dsm_loss, subspace_error, train, train_step, TrainConfig,
};
use ldit::network::{
    block_norms, score_forward, score_from_latent_map, DsmSample, NetConfig, ReshapeSpec, ScoreNetwork, TransformerBlock,
};
use ldit::rng;
use ldit::score::{decompose_score, latent_target, AnalyticScore, FnScore};
use ldit::subspace::{sample_basis, sample_dataset, DiffusionSchedule, LatentMixtureSpec, MixtureComponent};
use ldit::{DenseMatrix, NormKind};
use proptest::prelude::*;

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(5.0, 0.01, 0.01).unwrap()
}

fn small_net(dd: usize, seed: u64) -> ScoreNetwork {
    let cfg = NetConfig {
        ambient_dim: dd,
        image_side: 4,
        patch_side: 2,
        blocks: 1,
        heads: 1,
        head_dim: None,
        hidden: None,
        pos_enc_scale: 0.1,
        train_pos_enc: false,
        init_scale: 0.3,
    };
    ScoreNetwork::init(&cfg, seed).unwrap()
}

fn train_config(lr: f64, steps: usize, fast: bool) -> TrainConfig {
    TrainConfig {
        n_samples: 64,
        batch_size: 4,
        steps,
        learning_rate: lr,
        seed: 5,
        schedule: schedule(),
        use_fast_grad: fast,
        eps_target: 1e-8,
        log_every: 1,
    }
}

fn small_problem() -> (ldit::subspace::SubspaceSpec, Vec<Vec<f64>>) {
    let spec = sample_basis(20, 16, 3).unwrap();
    let data = sample_dataset(&spec, &LatentMixtureSpec::standard_gaussian(16), 64, 4).unwrap();
    (spec, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reshape_roundtrip((p, n) in (2usize..4, 1usize..4), seed in 0u64..100) {
        let r = ReshapeSpec::new(p * n, p).unwrap();
        prop_assert_eq!((r.token_dim, r.seq_len, r.latent_dim), (p * p, n * n, p * p * n * n));
        let mut s = rng::stream(seed, 0);
        let x = rng::gaussian_vec(&mut s, r.latent_dim);
        prop_assert_eq!(r.unreshape(&r.reshape(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn projector_error_is_rotation_invariant(seed in 0u64..200) {
        let spec = sample_basis(6, 3, seed).unwrap();
        let u = rng::gaussian_matrix(&mut rng::stream(seed, 9), 3, 3).orthonormalize_columns().unwrap();
        let e = subspace_error(&spec.basis.matmul(&u).unwrap(), &spec.basis).unwrap();
        prop_assert!(e.value <= 1e-20 && !e.non_orthonormal);
    }
}

#[test]
fn paper_reshape_dimensions() {
    let r = ReshapeSpec::new(4, 2).unwrap();
    assert_eq!((r.token_dim, r.seq_len, r.latent_dim), (4, 4, 16));
}

#[test]
fn oracle_injection_reproduces_the_analytic_score() {
    let s = schedule();
    let spec = sample_basis(10, 4, 2).unwrap();
    let latent = LatentMixtureSpec::symmetric_pair(&[1.0, -0.5, 0.3, 2.0], 0.4);
    let mut st = rng::stream(3, 0);
    for _ in 0..20 {
        let x = rng::gaussian_vec(&mut st, 10);
        let t: f64 = 0.05 + 4.9 * rand::Rng::random::<f64>(&mut st);
        let injected = score_from_latent_map(&spec.basis, &x, t, |h, t| latent_target(&latent, h, t, &s)).unwrap();
        let total = decompose_score(&spec, &latent, &x, t, &s).unwrap().total;
        for (a, b) in injected.iter().zip(&total) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn zero_blocks_reduce_score_to_projection() {
    let mut net = small_net(20, 1);
    for b in &mut net.blocks {
        for t in b.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    net.pos_enc = DenseMatrix::zeros(4, 4);
    let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let t = 0.7;
    let out = score_forward(&net, &x, t, &schedule()).unwrap();
    let proj = net.encoder.mat_vec(&net.encoder.mat_t_vec(&x).unwrap()).unwrap();
    let sigma = DiffusionSchedule::sigma(t);
    for i in 0..20 {
        assert!((out[i] - (proj[i] - x[i]) / sigma).abs() <= 1e-12);
    }
}

#[test]
fn norm_budget_of_the_rank_one_score_matrix() {
    // W_KQ = uuᵀ with u = (1, δ⁻¹, δ⁻², δ⁻³), δ = 1/2: ‖uuᵀ‖₂ = ‖u‖².
    let u = [1.0, 2.0, 4.0, 8.0];
    let mut block = TransformerBlock::zeros(4, 1, 1, 8);
    block.heads[0].w_k = DenseMatrix::new(1, 4, u.to_vec()).unwrap();
    block.heads[0].w_q = DenseMatrix::new(1, 4, u.to_vec()).unwrap();
    let n = block_norms(&block, &DenseMatrix::zeros(4, 4));
    let u2: f64 = u.iter().map(|v| v * v).sum();
    assert!((n.c_kq - u2).abs() <= 1e-8 * u2, "{} vs {u2}", n.c_kq);
    assert_eq!((n.c_ov, n.c_f, n.c_e), (0.0, 0.0, 0.0));
}

#[test]
fn norm_budget_scales_with_weights() {
    let net = small_net(20, 2);
    let b = &net.blocks[0];
    let n1 = block_norms(b, &net.pos_enc);
    let mut b2 = b.clone();
    for t in b2.tensors_mut() {
        *t = t.scale(2.0);
    }
    let n2 = block_norms(&b2, &net.pos_enc.scale(2.0));
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * b.abs().max(1.0);
    assert!(close(n2.c_f, 2.0 * n1.c_f) && close(n2.c_f_2inf, 2.0 * n1.c_f_2inf) && close(n2.c_e, 2.0 * n1.c_e));
    // products of two weight matrices pick up a factor of four
    assert!(close(n2.c_ov, 4.0 * n1.c_ov) && close(n2.c_kq, 4.0 * n1.c_kq));
}

#[test]
fn dsm_loss_of_an_exact_oracle_is_zero() {
    let s = schedule();
    let x0 = vec![0.3, -1.2, 0.5];
    let xt = vec![0.1, -0.8, 0.9];
    let t = 0.4;
    let (beta, sigma) = (DiffusionSchedule::beta(t), DiffusionSchedule::sigma(t));
    let target: Vec<f64> = x0.iter().zip(&xt).map(|(a, b)| (beta * a - b) / sigma).collect();
    let oracle = FnScore { dim: 3, f: move |_: &[f64], _: f64| Ok(target.clone()) };
    assert_eq!(dsm_loss(&oracle, &[DsmSample { x0, t, xt }], &s).unwrap(), 0.0);
}

#[test]
fn dsm_loss_is_nonnegative_and_checks_time_range() {
    let s = schedule();
    let net = small_net(20, 3);
    let (_, data) = small_problem();
    let batch = draw_batch(&data, 16, &s, &mut rng::stream(1, 1)).unwrap();
    assert!(dsm_loss(&net, &batch, &s).unwrap() >= 0.0);
    let bad = DsmSample { x0: data[0].clone(), t: 0.001, xt: data[0].clone() };
    assert!(dsm_loss(&net, &[bad], &s).is_err());
}

#[test]
fn dsm_loss_matches_one_dimensional_quadrature() {
    // D = 1, x0 ~ N(0,1), true score −x: E‖target − score‖² = 1/σ(t) − 1,
    // averaged over t uniform on [T0, T].
    let s = DiffusionSchedule::new(1.0, 0.1, 0.01).unwrap();
    let spec = sample_basis(1, 1, 0).unwrap();
    let model = AnalyticScore { spec: spec.clone(), latent: LatentMixtureSpec::standard_gaussian(1), schedule: s };
    let data = sample_dataset(&spec, &model.latent, 100_000, 1).unwrap();
    let batch = draw_batch(&data, 100_000, &s, &mut rng::stream(2, 0)).unwrap();
    let mc = dsm_loss(&model, &batch, &s).unwrap();
    // Simpson's rule on [0.1, 1]
    let n = 2000;
    let h = 0.9 / n as f64;
    let g = |t: f64| 1.0 / (1.0 - (-t).exp()) - 1.0;
    let mut acc = g(0.1) + g(1.0);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(0.1 + i as f64 * h);
    }
    let exact = acc * h / 3.0 / 0.9;
    assert!((mc - exact).abs() / exact <= 2e-2, "mc {mc} vs quadrature {exact}");
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let (_, data) = small_problem();
    let net = small_net(20, 4);
    let out = train(&train_config(0.0, 5, false), &data, net.clone(), None).unwrap();
    assert_eq!(out.net, net);
}

#[test]
fn training_is_deterministic() {
    let (spec, data) = small_problem();
    let cfg = train_config(1e-3, 6, false);
    let a = train(&cfg, &data, small_net(20, 5), Some(&spec.basis)).unwrap();
    let b = train(&cfg, &data, small_net(20, 5), Some(&spec.basis)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net, b.net);
}

#[test]
fn encoder_stays_orthonormal_after_every_step() {
    let (_, data) = small_problem();
    let mut net = small_net(20, 6);
    let cfg = train_config(1e-2, 1, false);
    let mut s = rng::stream(7, 0);
    for _ in 0..10 {
        let batch = draw_batch(&data, 4, &cfg.schedule, &mut s).unwrap();
        train_step(&mut net, &batch, &cfg).unwrap();
        let g = net.encoder.matmul_tn(&net.encoder).unwrap().sub(&DenseMatrix::identity(16)).unwrap();
        assert!(g.norm(NormKind::Max) <= 1e-8);
    }
}

#[test]
fn fast_and_exact_training_steps_agree() {
    let (_, data) = small_problem();
    let net = small_net(20, 7);
    let batch = draw_batch(&data, 8, &schedule(), &mut rng::stream(8, 0)).unwrap();
    let mut exact = net.clone();
    let mut fast = net;
    train_step(&mut exact, &batch, &train_config(1e-2, 1, false)).unwrap();
    train_step(&mut fast, &batch, &train_config(1e-2, 1, true)).unwrap();
    let diff = exact
        .tensors()
        .iter()
        .zip(fast.tensors())
        .map(|(a, b)| a.sub(b).unwrap().norm(NormKind::Max))
        .fold(0.0, f64::max);
    assert!(diff <= 1e-6, "max parameter difference {diff}");
}

#[test]
fn sampler_takes_the_expected_number_of_steps() {
    let spec = sample_basis(4, 2, 1).unwrap();
    let model = AnalyticScore { spec, latent: LatentMixtureSpec::standard_gaussian(2), schedule: schedule() };
    let r = backward_sample(&model, &schedule(), 3, 1, None).unwrap();
    assert_eq!(r.steps_taken, 499);
    let bad = DiffusionSchedule { horizon: 5.0, early_stop: 0.01, step: 0.0077 };
    assert!(backward_sample(&model, &bad, 1, 1, None).is_err());
}

#[test]
fn sampler_recovers_the_subspace_covariance() {
    let s = schedule();
    let spec = sample_basis(8, 2, 2).unwrap();
    let model = AnalyticScore { spec: spec.clone(), latent: LatentMixtureSpec::standard_gaussian(2), schedule: s };
    let r = backward_sample(&model, &s, 2000, 3, Some(&spec.basis)).unwrap();
    let cov = covariance(&r.samples);
    let p = spec.projector();
    let on = p.matmul(&cov).unwrap().matmul(&p).unwrap().sub(&p).unwrap();
    assert!(sym_spectral(&on) <= 0.15, "on-support error {}", sym_spectral(&on));
    let q = DenseMatrix::identity(8).sub(&p).unwrap();
    let orth = sym_spectral(&q.matmul(&cov).unwrap().matmul(&q).unwrap());
    assert!(orth <= 1.5 * std::f64::consts::E * (s.early_stop + s.step), "orthogonal spectral {orth}");
    assert!((r.orth_cov_spectral.unwrap() - orth).abs() <= 1e-6);
}

#[test]
fn coupled_sampler_mean_converges_at_first_order() {
    // fixed Brownian path at the finest step; the terminal mean moves by O(μ)
    let spec = sample_basis(4, 2, 3).unwrap();
    let latent = LatentMixtureSpec {
        components: vec![
            MixtureComponent { weight: 0.6, mean: vec![1.5, 0.5], cov_scale: 0.3 },
            MixtureComponent { weight: 0.4, mean: vec![-1.0, 1.0], cov_scale: 0.3 },
        ],
        lipschitz_hint: None,
    };
    let mean_at = |mu: f64| {
        let s = DiffusionSchedule::new(5.0, 0.04, mu).unwrap();
        let model = AnalyticScore { spec: spec.clone(), latent: latent.clone(), schedule: s };
        let r = backward_sample_coupled(&model, &s, 200, 9, 0.01).unwrap();
        let n = r.samples.len() as f64;
        (0..4).map(|i| r.samples.iter().map(|x| x[i]).sum::<f64>() / n).collect::<Vec<_>>()
    };
    let (m4, m2, m1) = (mean_at(0.04), mean_at(0.02), mean_at(0.01));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let ratio = dist(&m4, &m2) / dist(&m2, &m1);
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn distribution_proxy_calibration() {
    let mut s = rng::stream(10, 0);
    let a: Vec<Vec<f64>> = (0..10_000).map(|_| rng::gaussian_vec(&mut s, 3)).collect();
    let b: Vec<Vec<f64>> = (0..10_000).map(|_| rng::gaussian_vec(&mut s, 3)).collect();
    assert_eq!(dist_proxy(&a, &a, 8, 1).unwrap(), 0.0);
    let same = dist_proxy(&a, &b, 8, 1).unwrap();
    assert!(same <= 0.05, "{same}");
    assert_eq!(same, dist_proxy(&b, &a, 8, 1).unwrap());
    let c: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng::gaussian(&mut s)]).collect();
    let d: Vec<Vec<f64>> = (0..10_000).map(|_| vec![3.0 + rng::gaussian(&mut s)]).collect();
    assert!(dist_proxy(&c, &d, 4, 2).unwrap() >= 0.8);
}

#[test]
fn disjoint_subspaces_have_error_two_d0() {
    let e = DenseMatrix::identity(4);
    let b = DenseMatrix::from_fn(4, 2, |i, j| e.get(i, j));
    let w = DenseMatrix::from_fn(4, 2, |i, j| e.get(i, j + 2));
    assert!((subspace_error(&w, &b).unwrap().value - 4.0).abs() <= 1e-12);
    assert!(subspace_error(&b.scale(2.0), &b).unwrap().non_orthonormal);
}
