//! Synthetic data on a linear latent subspace and the forward noising kernel.

use std::fs;
use std::path::Path;

use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{DenseMatrix, NormKind};
use crate::rng;

/// Ambient space `R^D` with a `d0`-dimensional orthonormal basis `B`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubspaceSpec {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub basis: DenseMatrix,
    pub seed: u64,
}

impl SubspaceSpec {
    /// Wraps an explicit basis after checking `BᵀB = I`.
    pub fn from_basis(basis: DenseMatrix, seed: u64) -> Result<Self> {
        let (d, d0) = basis.shape();
        if d0 > d {
            return Err(dim("SubspaceSpec", format!("latent dim {d0} exceeds ambient dim {d}")));
        }
        let gram = basis.matmul_tn(&basis)?;
        let dev = gram.sub(&DenseMatrix::identity(d0))?.norm(NormKind::Max);
        if dev > 1e-10 {
            return Err(Error::OutOfRange(format!("basis is not orthonormal (|BᵀB - I| = {dev:e})")));
        }
        Ok(Self { ambient_dim: d, latent_dim: d0, basis, seed })
    }

    /// Orthogonal projector `BBᵀ`.
    pub fn projector(&self) -> DenseMatrix {
        self.basis.matmul_nt(&self.basis).expect("conforming")
    }

    pub fn embed(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.basis.mat_vec(h)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.basis.mat_t_vec(x)
    }
}

/// Isotropic Gaussian component `N(mean, cov_scale·I)`. A zero `cov_scale`
/// is a point mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMixtureSpec {
    pub components: Vec<MixtureComponent>,
    #[serde(default)]
    pub lipschitz_hint: Option<f64>,
}

impl LatentMixtureSpec {
    pub fn standard_gaussian(d0: usize) -> Self {
        Self {
            components: vec![MixtureComponent { weight: 1.0, mean: vec![0.0; d0], cov_scale: 1.0 }],
            lipschitz_hint: Some(1.0),
        }
    }

    /// Equal-weight components at `±m` with shared variance.
    pub fn symmetric_pair(m: &[f64], cov_scale: f64) -> Self {
        let neg: Vec<f64> = m.iter().map(|x| -x).collect();
        Self {
            components: vec![
                MixtureComponent { weight: 0.5, mean: m.to_vec(), cov_scale },
                MixtureComponent { weight: 0.5, mean: neg, cov_scale },
            ],
            lipschitz_hint: None,
        }
    }

    pub fn validate(&self, d0: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("mixture has no components".into()));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d0 {
                return Err(dim(
                    "LatentMixtureSpec",
                    format!("component {k} mean has length {}, expected {d0}", c.mean.len()),
                ));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Config(format!("component {k} weight {} must be positive", c.weight)));
            }
            if !(c.cov_scale >= 0.0) || !c.cov_scale.is_finite() {
                return Err(Error::Config(format!("component {k} cov_scale {} is negative", c.cov_scale)));
            }
            if c.mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("component {k} mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let d0 = self.components[0].mean.len();
        let mut m = vec![0.0; d0];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    pub fn sample(&self, rng: &mut rng::Stream) -> Vec<f64> {
        let k = if self.components.len() == 1 {
            0
        } else {
            let w = WeightedIndex::new(self.components.iter().map(|c| c.weight))
                .expect("weights validated positive");
            w.sample(rng)
        };
        let c = &self.components[k];
        let s = c.cov_scale.sqrt();
        c.mean.iter().map(|&m| m + s * rng::gaussian(rng)).collect()
    }
}

/// `β(t) = e^{-t/2}`, `σ(t) = 1 − e^{-t}` on `[0, T]`, early stop `T0`, step `μ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub horizon: f64,
    pub early_stop: f64,
    pub step: f64,
}

impl DiffusionSchedule {
    pub fn new(horizon: f64, early_stop: f64, step: f64) -> Result<Self> {
        let s = Self { horizon, early_stop, step };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.early_stop > 0.0
            && self.early_stop < self.horizon
            && self.step > 0.0
            && self.step <= self.early_stop
            && self.horizon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "schedule needs 0 < T0 < T and 0 < mu <= T0, got T={}, T0={}, mu={}",
                self.horizon, self.early_stop, self.step
            )))
        }
    }

    pub fn beta(t: f64) -> f64 {
        (-t / 2.0).exp()
    }

    pub fn sigma(t: f64) -> f64 {
        -(-t).exp_m1()
    }

    /// Number of reverse steps from `T` down to `T0`.
    pub fn num_steps(&self) -> usize {
        ((self.horizon - self.early_stop) / self.step).round() as usize
    }
}

/// Random orthonormal basis: Gram–Schmidt on seeded Gaussian columns.
pub fn sample_basis(d: usize, d0: usize, seed: u64) -> Result<SubspaceSpec> {
    if d0 > d {
        return Err(dim("sample_basis", format!("d0 = {d0} exceeds D = {d}")));
    }
    let mut s = rng::stream(seed, 0x6261_7369);
    loop {
        let g = rng::gaussian_matrix(&mut s, d, d0);
        if let Ok(basis) = g.orthonormalize_columns() {
            return SubspaceSpec::from_basis(basis, seed);
        }
    }
}

/// Clean samples `x = B·h` with `h` drawn from the latent mixture.
pub fn sample_dataset(
    spec: &SubspaceSpec,
    latent: &LatentMixtureSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    latent.validate(spec.latent_dim)?;
    let mut s = rng::stream(seed, 0x6461_7461);
    (0..n).map(|_| spec.embed(&latent.sample(&mut s))).collect()
}

/// Draw from `N(β(t)·x0, σ(t)·I)`.
pub fn perturb(x0: &[f64], t: f64, schedule: &DiffusionSchedule, seed: u64) -> Result<Vec<f64>> {
    let mut s = rng::stream(seed, 0x6e6f_6973);
    perturb_with(x0, t, schedule, &mut s)
}

pub fn perturb_with(
    x0: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
    rng: &mut rng::Stream,
) -> Result<Vec<f64>> {
    if !(0.0..=schedule.horizon).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} outside [0, {}]", schedule.horizon)));
    }
    let (b, s) = (DiffusionSchedule::beta(t), DiffusionSchedule::sigma(t).sqrt());
    Ok(x0.iter().map(|&x| b * x + s * rng::gaussian(rng)).collect())
}

#[derive(Serialize)]
struct DatasetSidecar<'a> {
    ambient_dim: usize,
    latent_dim: usize,
    n_samples: usize,
    seed: u64,
    mixture: &'a LatentMixtureSpec,
    basis_file: &'a str,
    data_file: &'a str,
}

/// Writes `<stem>.csv` (samples), `<stem>.json` (sidecar) and `<stem>_basis.csv`.
pub fn export_dataset(
    dir: &Path,
    stem: &str,
    spec: &SubspaceSpec,
    latent: &LatentMixtureSpec,
    samples: &[Vec<f64>],
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let data_file = format!("{stem}.csv");
    let basis_file = format!("{stem}_basis.csv");
    write_samples_csv(&dir.join(&data_file), samples, spec.ambient_dim)?;
    write_matrix_csv(&dir.join(&basis_file), &spec.basis)?;
    let sidecar = DatasetSidecar {
        ambient_dim: spec.ambient_dim,
        latent_dim: spec.latent_dim,
        n_samples: samples.len(),
        seed,
        mixture: latent,
        basis_file: &basis_file,
        data_file: &data_file,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// CSV with header `sample_id,x_0,…,x_{D-1}`.
pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>], d: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, x) in samples.iter().enumerate() {
        if x.len() != d {
            return Err(dim("write_samples_csv", format!("sample {i} has length {}", x.len())));
        }
        let mut rec = vec![i.to_string()];
        rec.extend(x.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Headerless CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::new(10.0, 0.01, 0.01).unwrap()
    }

    #[test]
    fn square_basis_is_orthogonal() {
        let s = sample_basis(5, 5, 3).unwrap();
        let p = s.projector();
        assert!(p.sub(&DenseMatrix::identity(5)).unwrap().norm(NormKind::Max) < 1e-10);
    }

    #[test]
    fn single_column_has_unit_norm() {
        let s = sample_basis(3, 1, 9).unwrap();
        assert!((s.basis.norm(NormKind::Frobenius) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn basis_is_deterministic_in_seed() {
        let a = sample_basis(7, 3, 42).unwrap();
        let b = sample_basis(7, 3, 42).unwrap();
        assert_eq!(a.basis.as_slice(), b.basis.as_slice());
        assert_ne!(a.basis, sample_basis(7, 3, 43).unwrap().basis);
    }

    #[test]
    fn basis_rejects_oversized_latent() {
        assert!(matches!(sample_basis(2, 3, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn point_mass_at_zero_gives_zero_samples() {
        let spec = sample_basis(6, 2, 1).unwrap();
        let latent = LatentMixtureSpec {
            components: vec![MixtureComponent { weight: 1.0, mean: vec![0.0; 2], cov_scale: 0.0 }],
            lipschitz_hint: None,
        };
        for x in sample_dataset(&spec, &latent, 20, 5).unwrap() {
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_mean_is_rejected() {
        let spec = sample_basis(6, 2, 1).unwrap();
        let latent = LatentMixtureSpec::standard_gaussian(3);
        assert!(sample_dataset(&spec, &latent, 1, 0).is_err());
    }

    #[test]
    fn perturb_at_zero_is_identity() {
        let x0 = vec![1.5, -2.0, 0.25];
        assert_eq!(perturb(&x0, 0.0, &schedule(), 11).unwrap(), x0);
    }

    #[test]
    fn perturb_rejects_out_of_range_time() {
        assert!(perturb(&[0.0], 10.5, &schedule(), 0).is_err());
        assert!(perturb(&[0.0], -0.1, &schedule(), 0).is_err());
    }

    #[test]
    fn beta_at_ln4_is_half() {
        assert!((DiffusionSchedule::beta(4f64.ln()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(DiffusionSchedule::new(5.0, 0.0, 0.01).is_err());
        assert!(DiffusionSchedule::new(5.0, 0.01, 0.02).is_err());
        assert_eq!(DiffusionSchedule::new(5.0, 0.01, 0.01).unwrap().num_steps(), 499);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = sample_basis(4, 2, 0).unwrap();
        let latent = LatentMixtureSpec::standard_gaussian(2);
        let xs = sample_dataset(&spec, &latent, 5, 0).unwrap();
        export_dataset(dir.path(), "data", &spec, &latent, &xs, 0).unwrap();
        let back = read_samples_csv(&dir.path().join("data.csv")).unwrap();
        assert_eq!(back, xs);
        let header = fs::read_to_string(dir.path().join("data.csv")).unwrap();
        assert!(header.starts_with("sample_id,x_0,x_1,x_2,x_3\n"));
    }
}
