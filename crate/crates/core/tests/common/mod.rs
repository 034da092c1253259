//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical kernels beyond plain accessors.
#![allow(dead_code)]

use ldit::attention::AttentionInstance;
use ldit::subspace::LatentMixtureSpec;
use ldit::DenseMatrix;

pub fn max_abs(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

/// Textbook attention: for query column j, weights over key columns k are
/// softmax_k(a1[:,j]ᵀ W a2[:,k]); output column j is Σ_k w_k · W_OV a3[:,k].
pub fn naive_attention(a1: &DenseMatrix, a2: &DenseMatrix, a3: &DenseMatrix, w: &DenseMatrix, w_ov: &DenseMatrix) -> DenseMatrix {
    let (d, l) = a1.shape();
    let v = mul(w_ov, a3);
    let mut out = DenseMatrix::zeros(d, l);
    for j in 0..l {
        let mut s = vec![0.0; l];
        for (k, sk) in s.iter_mut().enumerate() {
            for a in 0..d {
                for b in 0..d {
                    *sk += a1.get(a, j) * w.get(a, b) * a2.get(b, k);
                }
            }
        }
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for r in 0..d {
            out.set(r, j, (0..l).map(|k| e[k] / z * v.get(r, k)).sum());
        }
    }
    out
}

/// `½‖attention(W) − Y‖²_F` from the naive oracle.
pub fn naive_loss(inst: &AttentionInstance, w: &DenseMatrix) -> f64 {
    let out = naive_attention(&inst.a1, &inst.a2, &inst.a3, w, &inst.w_ov);
    out.as_slice().iter().zip(inst.y.as_slice()).map(|(o, y)| 0.5 * (o - y) * (o - y)).sum()
}

/// Central finite differences of the naive loss in every entry of `W`.
pub fn fd_gradient(inst: &AttentionInstance, step: f64) -> DenseMatrix {
    let d = inst.w.rows();
    DenseMatrix::from_fn(d, d, |a, b| {
        let mut wp = inst.w.clone();
        let mut wm = inst.w.clone();
        wp.set(a, b, wp.get(a, b) + step);
        wm.set(a, b, wm.get(a, b) - step);
        (naive_loss(inst, &wp) - naive_loss(inst, &wm)) / (2.0 * step)
    })
}

/// Gradient assembled term by term: for each query j0 and key i0, the weight
/// derivative f_{j0,i0}(e_{i0} − f_{j0}) contracted with the residual.
pub fn summed_gradient(inst: &AttentionInstance) -> DenseMatrix {
    let (d, l) = inst.a1.shape();
    let w = &inst.w;
    let v = mul(&inst.w_ov, &inst.a3);
    let out = naive_attention(&inst.a1, &inst.a2, &inst.a3, w, &inst.w_ov);
    let mut g = DenseMatrix::zeros(d, d);
    for j0 in 0..l {
        let mut s = vec![0.0; l];
        for (k, sk) in s.iter_mut().enumerate() {
            for a in 0..d {
                for b in 0..d {
                    *sk += inst.a1.get(a, j0) * w.get(a, b) * inst.a2.get(b, k);
                }
            }
        }
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let f: Vec<f64> = e.iter().map(|x| x / z).collect();
        // residual of column j0 against each value column
        let res: Vec<f64> = (0..d).map(|r| out.get(r, j0) - inst.y.get(r, j0)).collect();
        let proj: Vec<f64> = (0..l).map(|k| (0..d).map(|r| res[r] * v.get(r, k)).sum()).collect();
        let mean_proj: f64 = (0..l).map(|k| f[k] * proj[k]).sum();
        for i0 in 0..l {
            let coeff = f[i0] * (proj[i0] - mean_proj);
            for a in 0..d {
                for b in 0..d {
                    g.set(a, b, g.get(a, b) + coeff * inst.a1.get(a, j0) * inst.a2.get(b, i0));
                }
            }
        }
    }
    g
}

/// Gaussian log density of `N(mean, var·I)` at `x`.
pub fn log_normal(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let n = x.len() as f64;
    let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * n * (2.0 * std::f64::consts::PI * var).ln() - r2 / (2.0 * var)
}

/// Log of the noised ambient density for a one-dimensional latent, by
/// trapezoidal quadrature over h: p_t(x) = ∫ N(x; β·b·h, σI) p_h(h) dh.
pub fn quadrature_log_density(x: &[f64], basis: &[f64], latent: &LatentMixtureSpec, t: f64) -> f64 {
    let beta = (-t / 2.0).exp();
    let sigma = 1.0 - (-t).exp();
    let (lo, hi, n) = (-14.0, 14.0, 40_000usize);
    let dh = (hi - lo) / n as f64;
    let mut logs = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let h = lo + i as f64 * dh;
        let mean: Vec<f64> = basis.iter().map(|b| beta * b * h).collect();
        let prior: f64 = latent
            .components
            .iter()
            .map(|c| c.weight * log_normal(&[h], &c.mean, c.cov_scale).exp())
            .sum();
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        logs.push(log_normal(x, &mean, sigma) + (w * prior * dh).ln());
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of [`quadrature_log_density`].
pub fn quadrature_score(x: &[f64], basis: &[f64], latent: &LatentMixtureSpec, t: f64, step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += step;
            xm[i] -= step;
            (quadrature_log_density(&xp, basis, latent, t) - quadrature_log_density(&xm, basis, latent, t)) / (2.0 * step)
        })
        .collect()
}

/// Spectral norm of a symmetric matrix by power iteration on its square.
pub fn sym_spectral(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lam = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m.get(i, j) * v[j]).sum()).collect();
        let w2: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m.get(i, j) * w[j]).sum()).collect();
        let norm = w2.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lam = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w2.iter().map(|x| x / norm).collect();
    }
    lam.sqrt()
}

/// Plain sample covariance (n − 1 denominator).
pub fn covariance(xs: &[Vec<f64>]) -> DenseMatrix {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    DenseMatrix::from_fn(d, d, |i, j| xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0))
}
