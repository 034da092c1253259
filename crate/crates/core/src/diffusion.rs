//! Denoising score-matching training, Euler–Maruyama reverse sampling and the
//! subspace/distribution metrics used to judge both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{dot, DenseMatrix, NormKind};
use crate::network::{DsmSample, ScoreGrad, ScoreNetwork};
use crate::rng;
use crate::score::ScoreModel;
use crate::subspace::{perturb_with, DiffusionSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: DiffusionSchedule,
    #[serde(default)]
    pub use_fast_grad: bool,
    #[serde(default = "default_eps")]
    pub eps_target: f64,
    /// Record a loss-history row every this many steps (and at the last step).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_eps() -> f64 {
    1e-8
}
fn default_log_every() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate = {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.eps_target > 0.0) {
            return Err(Error::Config("eps_target must be positive".into()));
        }
        Ok(())
    }
}

/// `‖W_B W_Bᵀ − BBᵀ‖²_F`, flagged when either input is not column-orthonormal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceError {
    pub value: f64,
    pub non_orthonormal: bool,
}

pub fn subspace_error(w_b: &DenseMatrix, b: &DenseMatrix) -> Result<SubspaceError> {
    if w_b.rows() != b.rows() {
        return Err(dim("subspace_error", format!("{:?} vs {:?}", w_b.shape(), b.shape())));
    }
    let ortho = |m: &DenseMatrix| -> Result<bool> {
        Ok(m.matmul_tn(m)?.sub(&DenseMatrix::identity(m.cols()))?.norm(NormKind::Max) > 1e-8)
    };
    let diff = w_b.matmul_nt(w_b)?.sub(&b.matmul_nt(b)?)?;
    let f = diff.norm(NormKind::Frobenius);
    Ok(SubspaceError { value: f * f, non_orthonormal: ortho(w_b)? || ortho(b)? })
}

/// Mean squared distance between the model score and the kernel target
/// `(β(t)x0 − x_t)/σ(t)`.
pub fn dsm_loss(model: &dyn ScoreModel, batch: &[DsmSample], schedule: &DiffusionSchedule) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        if s.t < schedule.early_stop || s.t > schedule.horizon {
            return Err(Error::OutOfRange(format!(
                "t = {} outside [{}, {}]",
                s.t, schedule.early_stop, schedule.horizon
            )));
        }
        let (beta, sigma) = (DiffusionSchedule::beta(s.t), DiffusionSchedule::sigma(s.t));
        let pred = model.score(&s.xt, s.t)?;
        let r: f64 = pred
            .iter()
            .zip(&s.x0)
            .zip(&s.xt)
            .map(|((p, x0), xt)| {
                let e = p - (beta * x0 - xt) / sigma;
                e * e
            })
            .sum();
        total += r;
    }
    Ok(total / batch.len() as f64)
}

/// Draws a training batch: indices and times uniform, then `x_t` from the kernel.
pub fn draw_batch(
    data: &[Vec<f64>],
    batch_size: usize,
    schedule: &DiffusionSchedule,
    rng: &mut rng::Stream,
) -> Result<Vec<DsmSample>> {
    (0..batch_size)
        .map(|_| {
            let i = rng.random_range(0..data.len());
            let t = rng.random_range(schedule.early_stop..=schedule.horizon);
            let xt = perturb_with(&data[i], t, schedule, rng)?;
            Ok(DsmSample { x0: data[i].clone(), t, xt })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub subspace_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub net: ScoreNetwork,
    pub history: Vec<LossRecord>,
}

/// Performs one gradient step in place; returns the minibatch loss.
pub fn train_step(net: &mut ScoreNetwork, batch: &[DsmSample], config: &TrainConfig) -> Result<f64> {
    let mode = if config.use_fast_grad { ScoreGrad::LowRank(config.eps_target) } else { ScoreGrad::Exact };
    let (loss, grad) = net.loss_and_grad(batch, mode)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    if config.learning_rate > 0.0 {
        net.axpy(-config.learning_rate, &grad)?;
        net.retract_encoder()?;
        for t in net.tensors() {
            if !t.is_finite() {
                return Err(Error::NonFinite("parameters after update".into()));
            }
        }
    }
    Ok(loss)
}

/// Plain minibatch gradient descent on the score-matching loss with a QR
/// retraction of the encoder after each step. Deterministic in `config.seed`.
pub fn train(
    config: &TrainConfig,
    dataset: &[Vec<f64>],
    net: ScoreNetwork,
    reference_basis: Option<&DenseMatrix>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if let Some(x) = dataset.iter().find(|x| x.len() != net.ambient_dim()) {
        return Err(dim("train", format!("sample of length {}, network D = {}", x.len(), net.ambient_dim())));
    }
    let data = &dataset[..config.n_samples.clamp(1, dataset.len())];
    let mut net = net;
    let mut history = Vec::new();
    let mut s = rng::stream(config.seed, 0x7472_6169);
    let every = config.log_every.max(1);
    for step in 0..config.steps {
        let batch = draw_batch(data, config.batch_size, &config.schedule, &mut s)?;
        let loss = train_step(&mut net, &batch, config)?;
        if step % every == 0 || step + 1 == config.steps {
            let se = reference_basis.map(|b| subspace_error(&net.encoder, b)).transpose()?.map(|e| e.value);
            history.push(LossRecord { step, loss, subspace_error: se });
        }
    }
    Ok(TrainReport { net, history })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRunReport {
    pub samples: Vec<Vec<f64>>,
    /// Subspace error of the samples' top principal directions, when a
    /// reference basis is given.
    pub subspace_error: Option<f64>,
    /// Spectral norm of the covariance of `(I − BBᵀ) y`, when a reference
    /// basis is given.
    pub orth_cov_spectral: Option<f64>,
    /// Spectral distance between the on-support covariance and `BBᵀ`.
    pub on_support_cov_error: Option<f64>,
    pub steps_taken: usize,
}

fn step_count(schedule: &DiffusionSchedule, mu: f64) -> Result<usize> {
    let span = schedule.horizon - schedule.early_stop;
    let n = (span / mu).round();
    if (n * mu - span).abs() > 1e-9 {
        return Err(Error::Config(format!("step {mu} does not divide T - T0 = {span}")));
    }
    Ok(n as usize)
}

/// Euler–Maruyama with frozen drift: `y ← y + μ(½y + s(y, T − kμ)) + √μ·z_k`.
fn euler_maruyama(
    score: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    mut y: Vec<f64>,
    steps: usize,
    mut noise: impl FnMut(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let mu = schedule.step;
    for k in 0..steps {
        let t = schedule.horizon - k as f64 * mu;
        let s = score.score(&y, t)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score at t = {t}")));
        }
        let z = noise(k);
        for ((yi, si), zi) in y.iter_mut().zip(&s).zip(&z) {
            *yi += mu * (0.5 * *yi + si) + zi;
        }
    }
    Ok(y)
}

/// `n` independent reverse-SDE chains from `N(0, I)` at `T` down to `T0`.
pub fn backward_sample(
    score: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    n: usize,
    seed: u64,
    reference_basis: Option<&DenseMatrix>,
) -> Result<SampleRunReport> {
    schedule.validate()?;
    let steps = step_count(schedule, schedule.step)?;
    let d = score.dim();
    let sq = schedule.step.sqrt();
    let mut samples = Vec::with_capacity(n);
    for chain in 0..n {
        let mut s = rng::stream(seed, chain as u64);
        let y0 = rng::gaussian_vec(&mut s, d);
        let y = euler_maruyama(score, schedule, y0, steps, |_| {
            rng::gaussian_vec(&mut s, d).into_iter().map(|z| sq * z).collect()
        })?;
        samples.push(y);
    }
    report(samples, steps, reference_basis)
}

/// Chains driven by one Brownian path per chain sampled on a grid of
/// `base_step`; coarser steps sum the fine increments, so runs at different
/// step sizes share their noise.
pub fn backward_sample_coupled(
    score: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    n: usize,
    seed: u64,
    base_step: f64,
) -> Result<SampleRunReport> {
    schedule.validate()?;
    let steps = step_count(schedule, schedule.step)?;
    let fine = step_count(schedule, base_step)?;
    let ratio = (schedule.step / base_step).round() as usize;
    if ratio == 0 || ratio * steps != fine {
        return Err(Error::Config(format!("step {} is not a multiple of {base_step}", schedule.step)));
    }
    let d = score.dim();
    let sq = base_step.sqrt();
    let mut samples = Vec::with_capacity(n);
    for chain in 0..n {
        let mut s = rng::stream(seed, chain as u64);
        let y0 = rng::gaussian_vec(&mut s, d);
        let path: Vec<Vec<f64>> = (0..fine).map(|_| rng::gaussian_vec(&mut s, d)).collect();
        let y = euler_maruyama(score, schedule, y0, steps, |k| {
            let mut inc = vec![0.0; d];
            for z in &path[k * ratio..(k + 1) * ratio] {
                for (a, b) in inc.iter_mut().zip(z) {
                    *a += sq * b;
                }
            }
            inc
        })?;
        samples.push(y);
    }
    report(samples, steps, None)
}

fn covariance(samples: &[Vec<f64>]) -> DenseMatrix {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for x in samples {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut c = DenseMatrix::zeros(d, d);
    for x in samples {
        for i in 0..d {
            let xi = x[i] - mean[i];
            for (j, cij) in c.row_mut(i).iter_mut().enumerate() {
                *cij += xi * (x[j] - mean[j]) / (n - 1.0).max(1.0);
            }
        }
    }
    c
}

pub fn sample_covariance(samples: &[Vec<f64>]) -> Result<DenseMatrix> {
    if samples.is_empty() {
        return Err(Error::Config("no samples".into()));
    }
    Ok(covariance(samples))
}

/// Top `k` eigenvectors of a symmetric positive semidefinite matrix by
/// orthogonal (subspace) iteration.
fn top_eigvecs(c: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let n = c.rows();
    let mut q = DenseMatrix::from_fn(n, k, |i, j| if i == j { 1.0 } else { 0.1 * ((i * 7 + j * 3) % 5) as f64 });
    q = q.orthonormalize_columns()?;
    for _ in 0..2000 {
        let next = c.matmul(&q)?.orthonormalize_columns()?;
        let delta = next.matmul_nt(&next)?.sub(&q.matmul_nt(&q)?)?.norm(NormKind::Max);
        q = next;
        if delta < 1e-13 {
            break;
        }
    }
    Ok(q)
}

fn report(samples: Vec<Vec<f64>>, steps: usize, basis: Option<&DenseMatrix>) -> Result<SampleRunReport> {
    let (mut se, mut orth, mut on) = (None, None, None);
    if let (Some(b), false) = (basis, samples.is_empty()) {
        let p = b.matmul_nt(b)?;
        let c = covariance(&samples);
        let q = DenseMatrix::identity(p.rows()).sub(&p)?;
        orth = Some(q.matmul(&c)?.matmul(&q)?.norm(NormKind::Op2));
        on = Some(p.matmul(&c)?.matmul(&p)?.sub(&p)?.norm(NormKind::Op2));
        let w = top_eigvecs(&c, b.cols())?;
        se = Some(subspace_error(&w, b)?.value);
    }
    Ok(SampleRunReport {
        samples,
        subspace_error: se,
        orth_cov_spectral: orth,
        on_support_cov_error: on,
        steps_taken: steps,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Mean sliced KS statistic over `n_slices` random unit directions. A
/// desk-scale distribution distance, not total variation.
pub fn dist_proxy(a: &[Vec<f64>], b: &[Vec<f64>], n_slices: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("dist_proxy needs nonempty sample sets".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(dim("dist_proxy", "samples differ in dimension"));
    }
    let mut s = rng::stream(seed, 0x736c_6963);
    let mut total = 0.0;
    for _ in 0..n_slices.max(1) {
        let v = rng::unit_vec(&mut s, d);
        let pa: Vec<f64> = a.iter().map(|x| dot(x, &v)).collect();
        let pb: Vec<f64> = b.iter().map(|x| dot(x, &v)).collect();
        total += ks_statistic(&pa, &pb);
    }
    Ok(total / n_slices.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::sample_basis;

    #[test]
    fn subspace_error_cases() {
        let b = sample_basis(6, 2, 1).unwrap().basis;
        assert!(subspace_error(&b, &b).unwrap().value < 1e-24);
        let th: f64 = 0.7;
        let u = DenseMatrix::from_rows(&[vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]]).unwrap();
        assert!(subspace_error(&b.matmul(&u).unwrap(), &b).unwrap().value < 1e-24);
        let e = DenseMatrix::identity(4);
        let b1 = DenseMatrix::from_fn(4, 2, |i, j| e.get(i, j));
        let b2 = DenseMatrix::from_fn(4, 2, |i, j| e.get(i, j + 2));
        assert!((subspace_error(&b2, &b1).unwrap().value - 4.0).abs() < 1e-12);
        assert!(subspace_error(&b2.scale(2.0), &b1).unwrap().non_orthonormal);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&a, &[10.0, 11.0]), 1.0);
        let x = vec![vec![0.1, 0.2], vec![0.5, -1.0]];
        assert_eq!(dist_proxy(&x, &x, 5, 0).unwrap(), 0.0);
    }

    #[test]
    fn step_count_requires_divisibility() {
        let s = DiffusionSchedule::new(1.0, 0.05, 0.03).unwrap();
        assert!(step_count(&s, 0.03).is_err());
        assert_eq!(step_count(&s, 0.05).unwrap(), 19);
    }
}
