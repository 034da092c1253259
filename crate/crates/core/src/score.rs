//! Closed-form scores for Gaussian-mixture latents and the on-support /
//! orthogonal split of the ambient score.

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::dot;
use crate::subspace::{DiffusionSchedule, LatentMixtureSpec, SubspaceSpec};

/// `total = on_support + orthogonal`, with `on_support ∈ span(B)` and
/// `orthogonal ⟂ span(B)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    pub on_support: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub total: Vec<f64>,
}

fn check_time(t: f64, schedule: &DiffusionSchedule) -> Result<()> {
    if !(0.0..=schedule.horizon).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} outside (0, {}]", schedule.horizon)));
    }
    Ok(())
}

/// `∇ log p_t^h(h̄)` where `p_t^h` is the latent mixture pushed through the
/// kernel `N(β·h, σ·I)`: components become `N(β·m_k, (β²·s_k + σ)·I)`.
pub fn latent_score(
    latent: &LatentMixtureSpec,
    h_bar: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    check_time(t, schedule)?;
    let d0 = h_bar.len();
    latent.validate(d0)?;
    let (beta, sigma) = (DiffusionSchedule::beta(t), DiffusionSchedule::sigma(t));

    let mut logw = Vec::with_capacity(latent.components.len());
    let mut grads = Vec::with_capacity(latent.components.len());
    for c in &latent.components {
        let var = beta * beta * c.cov_scale + sigma;
        if !(var > 0.0) {
            return Err(Error::Singular(format!("component variance vanishes at t = {t}")));
        }
        let diff: Vec<f64> = c.mean.iter().zip(h_bar).map(|(&m, &h)| beta * m - h).collect();
        logw.push(c.weight.ln() - 0.5 * d0 as f64 * var.ln() - dot(&diff, &diff) / (2.0 * var));
        grads.push(diff.into_iter().map(|x| x / var).collect::<Vec<_>>());
    }
    // Responsibilities via log-sum-exp.
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; d0];
    for (wk, g) in w.iter().zip(&grads) {
        for (o, &gi) in out.iter_mut().zip(g) {
            *o += wk / z * gi;
        }
    }
    Ok(out)
}

/// `q(h̄, t) = σ(t)·∇log p_t^h(h̄) + h̄`, the latent map an ideal network learns.
pub fn latent_target(
    latent: &LatentMixtureSpec,
    h_bar: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let s = latent_score(latent, h_bar, t, schedule)?;
    let sigma = DiffusionSchedule::sigma(t);
    Ok(s.iter().zip(h_bar).map(|(a, b)| sigma * a + b).collect())
}

/// `∇ log p_t(x̄) = B·∇log p_t^h(Bᵀx̄) − (I − BBᵀ)x̄ / σ(t)`.
pub fn decompose_score(
    spec: &SubspaceSpec,
    latent: &LatentMixtureSpec,
    x_bar: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<ScoreDecomposition> {
    if x_bar.len() != spec.ambient_dim {
        return Err(dim("decompose_score", format!("x has length {}, D = {}", x_bar.len(), spec.ambient_dim)));
    }
    check_time(t, schedule)?;
    let sigma = DiffusionSchedule::sigma(t);
    if !(sigma > 0.0) {
        return Err(Error::Singular("sigma(0) = 0 makes the orthogonal score singular".into()));
    }
    let h_bar = spec.encode(x_bar)?;
    let on_support = spec.embed(&latent_score(latent, &h_bar, t, schedule)?)?;
    let proj = spec.embed(&h_bar)?;
    let orthogonal: Vec<f64> = x_bar.iter().zip(&proj).map(|(x, p)| -(x - p) / sigma).collect();
    let total = on_support.iter().zip(&orthogonal).map(|(a, b)| a + b).collect();
    Ok(ScoreDecomposition { on_support, orthogonal, total })
}

/// Anything that evaluates a score `s(x, t)` on `R^D`.
pub trait ScoreModel {
    fn dim(&self) -> usize;
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// Ground-truth score of the subspace model.
#[derive(Clone, Debug)]
pub struct AnalyticScore {
    pub spec: SubspaceSpec,
    pub latent: LatentMixtureSpec,
    pub schedule: DiffusionSchedule,
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.spec.ambient_dim
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(decompose_score(&self.spec, &self.latent, x, t, &self.schedule)?.total)
    }
}

/// Score from a closure; used for oracle injection in tests and examples.
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> Result<Vec<f64>>> ScoreModel for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (self.f)(x, t)
    }
}
