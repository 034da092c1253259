//! Command-line front end: JSON run configurations, dispatch, and artifacts.
//!
//! Every command writes its outputs plus `manifest.json` (command, resolved
//! configuration, seed, library version) into `--out`. Feeding the manifest's
//! `config` back through `--config` reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{self, PhaseConfig, ScalingConfig};
use crate::diffusion::{self, TrainConfig};
use crate::error::Error;
use crate::linalg::DenseMatrix;
use crate::network::{NetConfig, ScoreNetwork};
use crate::score::{AnalyticScore, ScoreModel};
use crate::subspace::{self, DiffusionSchedule, LatentMixtureSpec, SubspaceSpec};
use crate::ua::{self, UaConfig};

#[derive(Debug, Parser)]
#[command(name = "ldit", version, about = "Latent diffusion transformer laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration; each command has a built-in default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Sample a dataset on a random linear subspace.
    DataGen,
    /// Train the transformer score network by denoising score matching.
    Train,
    /// Run the reverse SDE from an analytic score or a checkpoint.
    Sample,
    /// Time exact against low-rank attention across sequence lengths.
    BenchAttn,
    /// Required Taylor degree and rank along Γ = c·sqrt(ln L).
    PhaseSweep,
    /// Build and check the universal-approximation pipeline on a grid.
    UaVerify,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> RunError {
    RunError::Invalid(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub n_samples: usize,
    /// Defaults to the standard Gaussian.
    #[serde(default)]
    pub latent: Option<LatentMixtureSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self { ambient_dim: 8, latent_dim: 2, n_samples: 100, latent: None, seed: 0 }
    }
}

impl DataGenConfig {
    fn latent(&self) -> LatentMixtureSpec {
        self.latent.clone().unwrap_or_else(|| LatentMixtureSpec::standard_gaussian(self.latent_dim))
    }

    fn validate(&self) -> Result<(), RunError> {
        if self.latent_dim == 0 || self.latent_dim > self.ambient_dim || self.n_samples == 0 {
            return Err(invalid("need 1 <= latent_dim <= ambient_dim and n_samples >= 1"));
        }
        self.latent().validate(self.latent_dim).map_err(invalid)
    }

    fn generate(&self) -> crate::Result<(SubspaceSpec, Vec<Vec<f64>>)> {
        let spec = subspace::sample_basis(self.ambient_dim, self.latent_dim, self.seed)?;
        let data = subspace::sample_dataset(&spec, &self.latent(), self.n_samples, self.seed)?;
        Ok((spec, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: DataGenConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            data: DataGenConfig { ambient_dim: 16, latent_dim: 4, n_samples: 512, latent: None, seed: 0 },
            net: NetConfig {
                ambient_dim: 16,
                image_side: 2,
                patch_side: 2,
                blocks: 1,
                heads: 1,
                head_dim: None,
                hidden: None,
                pos_enc_scale: 0.1,
                train_pos_enc: false,
                init_scale: 0.1,
            },
            train: TrainConfig {
                n_samples: 512,
                batch_size: 32,
                steps: 200,
                learning_rate: 1e-3,
                seed: 0,
                schedule: DiffusionSchedule { horizon: 5.0, early_stop: 0.01, step: 0.01 },
                use_fast_grad: false,
                eps_target: 1e-8,
                log_every: 10,
            },
        }
    }
}

/// What drives the reverse SDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSource {
    /// Closed-form score of a seeded subspace model.
    Analytic {
        ambient_dim: usize,
        latent_dim: usize,
        #[serde(default)]
        latent: Option<LatentMixtureSpec>,
    },
    /// A trained network; `basis` is an optional headerless CSV of `B`.
    Checkpoint {
        path: PathBuf,
        #[serde(default)]
        basis: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRunConfig {
    pub source: ScoreSource,
    pub schedule: DiffusionSchedule,
    pub n_chains: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SampleRunConfig {
    fn default() -> Self {
        Self {
            source: ScoreSource::Analytic { ambient_dim: 8, latent_dim: 2, latent: None },
            schedule: DiffusionSchedule { horizon: 5.0, early_stop: 0.01, step: 0.01 },
            n_chains: 500,
            seed: 0,
        }
    }
}

fn default_scaling() -> ScalingConfig {
    ScalingConfig::new(vec![512, 1024, 2048, 4096, 8192], 0.03, 1e-3)
}

fn default_phase() -> PhaseConfig {
    PhaseConfig { seq_len: 4096, token_dim: None, c_list: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0], eps_target: 1e-3 }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: Command,
    version: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    outputs: &'a [String],
}

/// Outcome of a successful run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
    pub message: String,
}

fn load<T: DeserializeOwned>(path: Option<&Path>, default: impl FnOnce() -> T) -> Result<T, RunError> {
    match path {
        None => Ok(default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_manifest<T: Serialize>(cli: &Cli, config: &T, seed: Option<u64>, outputs: &mut Vec<String>) -> crate::Result<()> {
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command: cli.command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: serde_json::to_value(config)?,
        outputs,
    };
    write_json(&cli.out.join("manifest.json"), &manifest)
}

/// Parse, validate, dispatch, and write artifacts.
pub fn run(cli: &Cli) -> Result<RunSummary, RunError> {
    let cfg_path = cli.config.as_deref();
    let mut outputs = Vec::new();
    let message = match cli.command {
        Command::DataGen => {
            let mut c: DataGenConfig = load(cfg_path, DataGenConfig::default)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c.validate()?;
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            let (spec, data) = c.generate()?;
            subspace::export_dataset(&cli.out, "dataset", &spec, &c.latent(), &data, c.seed)?;
            outputs.extend(["dataset.csv", "dataset.json", "dataset_basis.csv"].map(String::from));
            write_manifest(cli, &c, Some(c.seed), &mut outputs)?;
            format!("wrote {} samples in R^{}", data.len(), c.ambient_dim)
        }
        Command::Train => {
            let mut c: TrainRunConfig = load(cfg_path, TrainRunConfig::default)?;
            if let Some(s) = cli.seed {
                c.data.seed = s;
                c.train.seed = s;
            }
            c.data.validate()?;
            c.train.validate().map_err(invalid)?;
            if c.net.ambient_dim != c.data.ambient_dim || c.net.image_side * c.net.image_side != c.data.latent_dim {
                return Err(invalid("net needs ambient_dim == data.ambient_dim and image_side² == data.latent_dim"));
            }
            let net = ScoreNetwork::init(&c.net, c.train.seed).map_err(invalid)?;
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            let (spec, data) = c.data.generate()?;
            let report = diffusion::train(&c.train, &data, net, Some(&spec.basis))?;
            write_loss_csv(&cli.out.join("loss.csv"), &report.history)?;
            report.net.save(&cli.out.join("checkpoint.json"))?;
            subspace::write_matrix_csv(&cli.out.join("basis.csv"), &spec.basis)?;
            let final_err = diffusion::subspace_error(&report.net.encoder, &spec.basis)?;
            write_json(&cli.out.join("summary.json"), &final_err)?;
            outputs.extend(["loss.csv", "checkpoint.json", "basis.csv", "summary.json"].map(String::from));
            write_manifest(cli, &c, Some(c.train.seed), &mut outputs)?;
            format!("{} steps, final subspace error {:.4e}", c.train.steps, final_err.value)
        }
        Command::Sample => {
            let mut c: SampleRunConfig = load(cfg_path, SampleRunConfig::default)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c.schedule.validate().map_err(invalid)?;
            if c.n_chains == 0 {
                return Err(invalid("n_chains must be positive"));
            }
            let (model, basis): (Box<dyn ScoreModel>, Option<DenseMatrix>) = match &c.source {
                ScoreSource::Analytic { ambient_dim, latent_dim, latent } => {
                    let gen = DataGenConfig {
                        ambient_dim: *ambient_dim,
                        latent_dim: *latent_dim,
                        n_samples: 1,
                        latent: latent.clone(),
                        seed: c.seed,
                    };
                    gen.validate()?;
                    let spec = subspace::sample_basis(*ambient_dim, *latent_dim, c.seed)?;
                    let basis = spec.basis.clone();
                    let score = AnalyticScore { spec, latent: gen.latent(), schedule: c.schedule };
                    (Box::new(score), Some(basis))
                }
                ScoreSource::Checkpoint { path, basis } => {
                    let net = ScoreNetwork::load(path).map_err(invalid)?;
                    let basis = match basis {
                        Some(p) => Some(read_matrix_csv(p).map_err(invalid)?),
                        None => None,
                    };
                    (Box::new(ScoreWithSchedule { net, schedule: c.schedule }), basis)
                }
            };
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            let report = diffusion::backward_sample(model.as_ref(), &c.schedule, c.n_chains, c.seed, basis.as_ref())
                .map_err(|e| match e {
                    Error::Config(m) => invalid(m),
                    other => RunError::Runtime(other),
                })?;
            subspace::write_samples_csv(&cli.out.join("samples.csv"), &report.samples, model.dim())?;
            let summary = serde_json::json!({
                "steps_taken": report.steps_taken,
                "subspace_error": report.subspace_error,
                "orth_cov_spectral": report.orth_cov_spectral,
                "on_support_cov_error": report.on_support_cov_error,
            });
            write_json(&cli.out.join("summary.json"), &summary)?;
            outputs.extend(["samples.csv", "summary.json"].map(String::from));
            write_manifest(cli, &c, Some(c.seed), &mut outputs)?;
            format!("{} chains, {} steps", c.n_chains, report.steps_taken)
        }
        Command::BenchAttn => {
            let mut c: ScalingConfig = load(cfg_path, default_scaling)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c.validate().map_err(invalid)?;
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            let report = bench::bench_scaling(&c)?;
            bench::write_scaling_csv(&cli.out.join("bench_scaling.csv"), &report)?;
            outputs.push("bench_scaling.csv".into());
            write_manifest(cli, &c, Some(c.seed), &mut outputs)?;
            format!("exact slope {:.3}, fast slope {:.3}", report.exact_slope, report.fast_slope)
        }
        Command::PhaseSweep => {
            let c: PhaseConfig = load(cfg_path, default_phase)?;
            c.validate().map_err(invalid)?;
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            let rows = bench::phase_sweep(&c)?;
            bench::write_phase_csv(&cli.out.join("phase_sweep.csv"), &rows)?;
            outputs.push("phase_sweep.csv".into());
            write_manifest(cli, &c, None, &mut outputs)?;
            format!("{} of {} points feasible", rows.iter().filter(|r| r.feasible).count(), rows.len())
        }
        Command::UaVerify => {
            let mut c: UaConfig = load(cfg_path, || UaConfig::new(1, 2, 0.5))?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            let grid = ua::GridSpec::new(c.token_dim, c.seq_len, c.delta).map_err(invalid)?;
            ua::build_context_mapper(&grid).map_err(invalid)?;
            if c.lambdas.iter().any(|l| !(*l > 0.0)) || !(c.eps > 0.0) {
                return Err(invalid("lambdas and eps must be positive"));
            }
            fs::create_dir_all(&cli.out).map_err(Error::from)?;
            let report = ua::verify(&c)?;
            write_json(&cli.out.join("ua_report.json"), &report)?;
            outputs.push("ua_report.json".into());
            write_manifest(cli, &c, Some(c.seed), &mut outputs)?;
            format!(
                "cited window holds: {}, certified window holds: {}, memorizer exact: {}",
                report.cited.all_hold(),
                report.certified.all_hold(),
                report.memorizer.exact
            )
        }
    };
    Ok(RunSummary { out_dir: cli.out.clone(), outputs, message })
}

/// A network paired with the schedule its scores are evaluated under.
struct ScoreWithSchedule {
    net: ScoreNetwork,
    schedule: DiffusionSchedule,
}

impl ScoreModel for ScoreWithSchedule {
    fn dim(&self) -> usize {
        self.net.ambient_dim()
    }

    fn score(&self, x: &[f64], t: f64) -> crate::Result<Vec<f64>> {
        crate::network::score_forward(&self.net, x, t, &self.schedule)
    }
}

/// Header `step,loss,subspace_error`; the last column is empty without a reference.
pub fn write_loss_csv(path: &Path, history: &[diffusion::LossRecord]) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(subspace::csv_err)?;
    w.write_record(["step", "loss", "subspace_error"]).map_err(subspace::csv_err)?;
    for r in history {
        let se = r.subspace_error.map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([r.step.to_string(), format!("{:e}", r.loss), se]).map_err(subspace::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Headerless numeric CSV as a matrix.
pub fn read_matrix_csv(path: &Path) -> crate::Result<DenseMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(subspace::csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(subspace::csv_err)?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))))
            .collect::<crate::Result<Vec<_>>>()?;
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}
