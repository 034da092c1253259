//! Timing harness for exact vs low-rank attention and the rank/degree sweep
//! across the norm bound.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_exact, inference_fast, rank_for_accuracy, AttentionInstance};
use crate::error::{Error, Result};
use crate::linalg::max_abs_diff;
use crate::subspace::csv_err;

/// `d = ceil(log2 L)`.
pub fn dim_rule(seq_len: usize) -> usize {
    (seq_len.max(2) as f64).log2().ceil() as usize
}

/// `Γ = c·sqrt(ln L)`.
pub fn gamma_rule(c: f64, seq_len: usize) -> f64 {
    c * (seq_len as f64).ln().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    /// Ascending powers of two.
    pub seq_lens: Vec<usize>,
    /// `c` in `Γ = c·sqrt(ln L)`.
    pub gamma_c: f64,
    pub eps_target: f64,
    #[serde(default)]
    pub seed: u64,
    /// Wall-clock budget per measured point.
    #[serde(default = "default_min_ms")]
    pub min_time_ms: u64,
    /// Timed batches per point at least.
    #[serde(default = "default_min_trials")]
    pub min_trials: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
}

fn default_min_ms() -> u64 {
    50
}
fn default_min_trials() -> usize {
    3
}
fn default_warmup() -> usize {
    1
}

impl ScalingConfig {
    pub fn new(seq_lens: Vec<usize>, gamma_c: f64, eps_target: f64) -> Self {
        Self {
            seq_lens,
            gamma_c,
            eps_target,
            seed: 0,
            min_time_ms: default_min_ms(),
            min_trials: default_min_trials(),
            warmup: default_warmup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_lens.is_empty() {
            return Err(Error::Config("seq_lens is empty".into()));
        }
        if self.seq_lens.iter().any(|l| !l.is_power_of_two() || *l < 2) {
            return Err(Error::Config("every L must be a power of two >= 2".into()));
        }
        if self.seq_lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("seq_lens must be strictly ascending".into()));
        }
        if !(self.gamma_c >= 0.0) || !(self.eps_target > 0.0) {
            return Err(Error::Config("gamma_c must be >= 0 and eps_target > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub seq_len: usize,
    pub d: usize,
    pub gamma: f64,
    pub degree: usize,
    pub rank: usize,
    pub exact_ns_median: f64,
    pub fast_ns_median: f64,
    pub max_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub exact_slope: f64,
    pub fast_slope: f64,
}

/// Median nanoseconds per call. Calls are batched until one batch spans at
/// least a millisecond, so short kernels still see ≥ 100 timer ticks.
pub fn time_median<T>(mut op: impl FnMut() -> T, min_time: Duration, min_trials: usize, warmup: usize) -> f64 {
    for _ in 0..warmup {
        std::hint::black_box(op());
    }
    let mut batch = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..batch {
            std::hint::black_box(op());
        }
        if t.elapsed() >= Duration::from_millis(1) || batch >= 1 << 20 {
            break;
        }
        batch *= 2;
    }
    let mut per_call = Vec::new();
    let start = Instant::now();
    while per_call.len() < min_trials.max(1) || start.elapsed() < min_time {
        let t = Instant::now();
        for _ in 0..batch {
            std::hint::black_box(op());
        }
        per_call.push(t.elapsed().as_nanos() as f64 / batch as f64);
    }
    median(&mut per_call)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Times exact and fast attention on seeded bounded instances. Correctness is
/// checked outside the timed regions.
pub fn bench_scaling(config: &ScalingConfig) -> Result<ScalingReport> {
    config.validate()?;
    let min_time = Duration::from_millis(config.min_time_ms);
    let mut rows = Vec::with_capacity(config.seq_lens.len());
    for (i, &l) in config.seq_lens.iter().enumerate() {
        let d = dim_rule(l);
        let gamma = gamma_rule(config.gamma_c, l);
        let inst = AttentionInstance::random_bounded(d, l, gamma, config.seed.wrapping_add(i as u64))?;
        let exact = attention_exact(&inst)?;
        let fast = inference_fast(&inst, config.eps_target)?;
        let max_err = max_abs_diff(&exact, &fast.value);
        let exact_ns = time_median(|| attention_exact(&inst), min_time, config.min_trials, config.warmup);
        let fast_ns = time_median(|| inference_fast(&inst, config.eps_target), min_time, config.min_trials, config.warmup);
        rows.push(ScalingRow {
            seq_len: l,
            d,
            gamma,
            degree: fast.degree,
            rank: fast.rank,
            exact_ns_median: exact_ns,
            fast_ns_median: fast_ns,
            max_err,
        });
    }
    let top = &rows[rows.len() / 2..];
    let (exact_slope, fast_slope) = if top.len() >= 2 {
        let ls: Vec<f64> = top.iter().map(|r| r.seq_len as f64).collect();
        let e: Vec<f64> = top.iter().map(|r| r.exact_ns_median).collect();
        let f: Vec<f64> = top.iter().map(|r| r.fast_ns_median).collect();
        (loglog_slope(&ls, &e), loglog_slope(&ls, &f))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ScalingReport { rows, exact_slope, fast_slope })
}

/// Header `L,d,exact_ns_median,fast_ns_median,max_err`, then two `#` comment
/// lines with the fitted slopes.
pub fn write_scaling_csv(path: &Path, report: &ScalingReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["L", "d", "exact_ns_median", "fast_ns_median", "max_err"]).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.seq_len.to_string(),
            r.d.to_string(),
            format!("{:.1}", r.exact_ns_median),
            format!("{:.1}", r.fast_ns_median),
            format!("{:e}", r.max_err),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    drop(w);
    let mut text = std::fs::read_to_string(path)?;
    text.push_str(&format!("# exact_slope,{:.4}\n# fast_slope,{:.4}\n", report.exact_slope, report.fast_slope));
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub seq_len: usize,
    /// Defaults to `ceil(log2 L)`.
    #[serde(default)]
    pub token_dim: Option<usize>,
    pub c_list: Vec<f64>,
    pub eps_target: f64,
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if self.c_list.iter().any(|c| !(*c >= 0.0)) || !(self.eps_target > 0.0) {
            return Err(Error::Config("c values must be >= 0 and eps_target > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub c: f64,
    pub gamma: f64,
    pub degree_g: usize,
    pub rank_k1: u128,
    pub feasible: bool,
}

/// Degree and rank required by [`rank_for_accuracy`] along `Γ = c·sqrt(ln L)`.
pub fn phase_sweep(config: &PhaseConfig) -> Result<Vec<PhaseRow>> {
    config.validate()?;
    let d = config.token_dim.unwrap_or_else(|| dim_rule(config.seq_len));
    config
        .c_list
        .iter()
        .map(|&c| {
            let gamma = gamma_rule(c, config.seq_len);
            let plan = rank_for_accuracy(gamma, d, config.eps_target)?;
            Ok(PhaseRow { c, gamma, degree_g: plan.degree, rank_k1: plan.rank, feasible: plan.feasible(config.seq_len) })
        })
        .collect()
}

/// Header `c,gamma,degree_g,rank_k1,feasible`.
pub fn write_phase_csv(path: &Path, rows: &[PhaseRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["c", "gamma", "degree_g", "rank_k1", "feasible"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.c.to_string(),
            format!("{:e}", r.gamma),
            r.degree_g.to_string(),
            r.rank_k1.to_string(),
            r.feasible.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
