//! Constructive universal approximation on a finite token grid.
//!
//! The pipeline is quantizer → positional encoding → selective-shift hardmax
//! attention (contextual mapping) → memorizer. Every modified layer uses a
//! piecewise-linear activation or a hardmax; [`soften`] replaces them with
//! ReLU expansions and temperature-λ softmax, and the deviation is bounded by
//! propagating an error radius along the exact trajectory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, DenseMatrix};
use crate::rng;

/// Largest on-grid point count checked exhaustively.
pub const EXHAUSTIVE_CAP: u128 = 4096;
/// Magnitudes below this keep dyadic grid arithmetic exact.
const EXACT_LIMIT: f64 = 4_503_599_627_370_496.0;
const EPS: f64 = f64::EPSILON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub token_dim: usize,
    pub seq_len: usize,
    pub delta: f64,
    pub j_const: f64,
    pub u: Vec<f64>,
    /// Largest contextual-output magnitude, filled in by enumeration.
    pub m: Option<f64>,
}

impl GridSpec {
    pub fn new(token_dim: usize, seq_len: usize, delta: f64) -> Result<Self> {
        if token_dim == 0 || seq_len == 0 {
            return Err(Error::Config("token_dim and seq_len must be positive".into()));
        }
        let k = -delta.log2();
        if !(delta > 0.0 && delta < 1.0) || k.fract() != 0.0 || 2f64.powi(-(k as i32)) != delta {
            return Err(Error::Config(format!("delta = {delta} is not 2^-k with k >= 1")));
        }
        let u = (0..token_dim).map(|i| delta.powi(-(i as i32))).collect();
        let j_const = seq_len as f64 + 3.0 * seq_len as f64 * delta.powi(-((token_dim * seq_len) as i32));
        Ok(Self { token_dim, seq_len, delta, j_const, u, m: None })
    }

    pub fn levels(&self) -> usize {
        (1.0 / self.delta).round() as usize
    }

    pub fn on_grid_count(&self) -> u128 {
        (self.levels() as u128).saturating_pow((self.token_dim * self.seq_len) as u32)
    }

    pub fn extended_count(&self) -> u128 {
        (self.levels() as u128 + 1).saturating_pow((self.token_dim * self.seq_len) as u32)
    }

    pub fn exhaustive(&self) -> bool {
        self.on_grid_count() <= EXHAUSTIVE_CAP
    }

    pub fn u_l1(&self) -> f64 {
        self.u.iter().map(|x| x.abs()).sum()
    }

    /// `uᵀX` for every column.
    pub fn project(&self, x: &DenseMatrix) -> Vec<f64> {
        (0..x.cols()).map(|c| project_col(&self.u, x, c)).collect()
    }

    /// `t_l = Lδ^{-2(L+1)d}(δ^{-d} − 1)` and `t_r = L²δ^{-2(L+1)d-1} + Lδ^{-(L+1)d}`.
    pub fn cited_bounds(&self) -> (f64, f64) {
        let (l, d) = (self.seq_len as i32, self.token_dim as i32);
        let lf = l as f64;
        let dl = self.delta;
        let t_l = lf * dl.powi(-2 * (l + 1) * d) * (dl.powi(-d) - 1.0);
        let t_r = lf * lf * dl.powi(-2 * (l + 1) * d - 1) + lf * dl.powi(-(l + 1) * d);
        (t_l, t_r)
    }

    /// `Lδ^{-2Ld}(δ^{-d} − 1)`: the smallest on-grid contextual value the
    /// shift sweep can produce, which sits below the cited `t_l`.
    pub fn certified_lower(&self) -> f64 {
        let (l, d) = (self.seq_len as i32, self.token_dim as i32);
        l as f64 * self.delta.powi(-2 * l * d) * (self.delta.powi(-d) - 1.0)
    }

    /// `E` with every row equal to `(0, 1, …, L−1)`.
    pub fn positional_encoding(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.token_dim, self.seq_len, |_, c| c as f64)
    }

    /// Reference quantizer: `δ·floor(x/δ)` on `[0,1)`, `−J` elsewhere.
    pub fn quantize_entry(&self, x: f64) -> f64 {
        if (0.0..1.0).contains(&x) {
            self.delta * (x / self.delta).floor()
        } else {
            -self.j_const
        }
    }

    fn point_from_index(&self, mut idx: u128, base: usize) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(self.token_dim, self.seq_len);
        for c in 0..self.seq_len {
            for r in 0..self.token_dim {
                let digit = (idx % base as u128) as usize;
                idx /= base as u128;
                let v = if digit == self.levels() { -self.j_const } else { digit as f64 * self.delta };
                g.set(r, c, v);
            }
        }
        g
    }

    /// All of `G_δ` in a fixed order (column-major digits).
    pub fn on_grid_points(&self) -> impl Iterator<Item = DenseMatrix> + '_ {
        (0..self.on_grid_count()).map(move |i| self.point_from_index(i, self.levels()))
    }

    /// `G_δ⁺ ∖ G_δ`: grid points with at least one `−J` entry.
    pub fn off_grid_points(&self) -> impl Iterator<Item = DenseMatrix> + '_ {
        (0..self.extended_count())
            .map(move |i| self.point_from_index(i, self.levels() + 1))
            .filter(move |g| g.as_slice().iter().any(|&v| v < 0.0))
    }

    fn random_point(&self, rng: &mut rng::Stream, off_grid: bool) -> DenseMatrix {
        let n = self.levels();
        let mut g = DenseMatrix::from_fn(self.token_dim, self.seq_len, |_, _| {
            let k = rng.random_range(0..n + usize::from(off_grid));
            if k == n { -self.j_const } else { k as f64 * self.delta }
        });
        if off_grid && g.as_slice().iter().all(|&v| v >= 0.0) {
            let (r, c) = (rng.random_range(0..self.token_dim), rng.random_range(0..self.seq_len));
            g.set(r, c, -self.j_const);
        }
        g
    }
}

fn project_col(u: &[f64], x: &DenseMatrix, c: usize) -> f64 {
    u.iter().enumerate().map(|(i, ui)| ui * x.get(i, c)).sum()
}

/// A breakpoint of a piecewise-linear activation. With `right_closed` the
/// breakpoint itself belongs to the piece on its right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub at: f64,
    pub right_closed: bool,
}

/// `a_p·x + b_p` on piece `p`; pieces are separated by `knots`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub knots: Vec<Knot>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
}

impl PiecewiseLinear {
    fn piece(&self, x: f64) -> usize {
        self.knots.iter().filter(|k| x > k.at || (k.right_closed && x == k.at)).count()
    }

    fn on_piece(&self, p: usize, x: f64) -> f64 {
        self.slopes[p] * x + self.intercepts[p]
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.on_piece(self.piece(x), x)
    }

    /// Continuous ε-approximation written as `αx + β + Σ w·ReLU(x − κ)`: each
    /// jump is replaced by a linear ramp of width ε on the open side of the
    /// knot, which costs two ReLUs per knot.
    pub fn relu_form(&self, eps: f64) -> Result<ReluExpansion> {
        let mut terms = Vec::with_capacity(2 * self.knots.len());
        let mut last_slope = self.slopes[0];
        let mut last_end = f64::NEG_INFINITY;
        for (k, knot) in self.knots.iter().enumerate() {
            let (a, b) = if knot.right_closed { (knot.at - eps, knot.at) } else { (knot.at, knot.at + eps) };
            if a < last_end {
                return Err(Error::OutOfRange(format!("eps = {eps} makes neighbouring ramps overlap")));
            }
            let ramp = (self.on_piece(k + 1, b) - self.on_piece(k, a)) / eps;
            terms.push((ramp - last_slope, a));
            terms.push((self.slopes[k + 1] - ramp, b));
            last_slope = self.slopes[k + 1];
            last_end = b;
        }
        terms.retain(|(w, _)| *w != 0.0);
        Ok(ReluExpansion { slope: self.slopes[0], intercept: self.intercepts[0], terms })
    }

    pub fn zeta1(j_const: f64) -> Self {
        Self {
            knots: vec![Knot { at: 0.0, right_closed: true }, Knot { at: 1.0, right_closed: true }],
            slopes: vec![-1.0, 0.0, -1.0],
            intercepts: vec![-j_const, 0.0, -j_const],
        }
    }

    pub fn zeta2(delta: f64) -> Self {
        Self {
            knots: vec![Knot { at: 0.0, right_closed: true }, Knot { at: delta, right_closed: true }],
            slopes: vec![0.0, -1.0, 0.0],
            intercepts: vec![0.0; 3],
        }
    }

    /// Indicator of the complement of `[lower, upper]`.
    pub fn zeta3(lower: f64, upper: f64) -> Self {
        Self {
            knots: vec![Knot { at: lower, right_closed: true }, Knot { at: upper, right_closed: false }],
            slopes: vec![0.0; 3],
            intercepts: vec![1.0, 0.0, 1.0],
        }
    }

    pub fn zeta4() -> Self {
        Self { knots: vec![Knot { at: 0.0, right_closed: true }], slopes: vec![-1.0, 0.0], intercepts: vec![0.0; 2] }
    }

    /// Indicator of `[−w, w)`.
    pub fn zeta5(half_width: f64) -> Self {
        Self {
            knots: vec![Knot { at: -half_width, right_closed: true }, Knot { at: half_width, right_closed: true }],
            slopes: vec![0.0; 3],
            intercepts: vec![0.0, 1.0, 0.0],
        }
    }
}

/// `slope·x + intercept + Σ weight·ReLU(x − shift)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluExpansion {
    pub slope: f64,
    pub intercept: f64,
    pub terms: Vec<(f64, f64)>,
}

impl ReluExpansion {
    pub fn eval(&self, x: f64) -> f64 {
        self.terms.iter().fold(self.slope * x + self.intercept, |acc, &(w, k)| acc + w * (x - k).max(0.0))
    }

    /// Largest slope magnitude on `[lo, hi]`.
    pub fn lipschitz_on(&self, lo: f64, hi: f64) -> f64 {
        let mut slope = self.slope;
        let mut best = if self.terms.first().map_or(true, |t| lo < t.1) { slope.abs() } else { 0.0 };
        for (i, &(w, k)) in self.terms.iter().enumerate() {
            slope += w;
            let next = self.terms.get(i + 1).map_or(f64::INFINITY, |t| t.1);
            if hi >= k && lo < next {
                best = best.max(slope.abs());
            }
        }
        best
    }

    /// Floating-point error bound of [`eval`](Self::eval) at `x`.
    pub fn rounding(&self, x: f64) -> f64 {
        let mass = self.terms.iter().fold((self.slope * x).abs() + self.intercept.abs(), |acc, &(w, k)| {
            acc + w.abs() * (x.abs() + k.abs())
        });
        (self.terms.len() as f64 + 3.0) * EPS * mass
    }
}

/// One modified transformer layer, a pure map `R^{d×L} → R^{d×L}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModifiedLayer {
    /// `X + e_i ζ₁(e_iᵀX)`.
    FfZeta1 { row: usize, j_const: f64 },
    /// `X + e_i ζ₂(e_iᵀX − offset)`.
    FfZeta2 { row: usize, offset: f64, delta: f64 },
    /// `X + scale·e_1 (ξ(X; b_low) − ξ(X; b_high))`.
    ShiftAttn { b_low: f64, b_high: f64, scale: f64 },
    /// `X + scale·e_1 ξ(X; 0)`.
    GlobalShiftAttn { scale: f64 },
    /// Column `c` shifted by `−shift` when `uᵀX_c ∉ [lower, upper]`.
    FfZeta3 { lower: f64, upper: f64, shift: f64 },
    /// `X + e_i ζ₄(e_iᵀX)`: negative entries clamp to zero.
    FfZeta4 { row: usize },
    /// Column `c` gains `column_delta` when `uᵀX_c − center ∈ [−w, w)`.
    FfZeta5 { center: f64, half_width: f64, column_delta: Vec<f64> },
}

enum Readout {
    Row(usize),
    Project,
}

enum Writeback<'a> {
    Row(usize),
    Uniform(f64),
    Vector(&'a [f64]),
}

impl Writeback<'_> {
    fn coef(&self, r: usize) -> f64 {
        match *self {
            Writeback::Row(i) => f64::from(u8::from(i == r)),
            Writeback::Uniform(s) => s,
            Writeback::Vector(v) => v[r],
        }
    }
}

struct FfParts<'a> {
    read: Readout,
    offset: f64,
    write: Writeback<'a>,
    act: PiecewiseLinear,
}

impl ModifiedLayer {
    pub fn is_attention(&self) -> bool {
        matches!(self, Self::ShiftAttn { .. } | Self::GlobalShiftAttn { .. })
    }

    /// The activation for feed-forward kinds.
    pub fn activation(&self) -> Option<PiecewiseLinear> {
        self.ff_parts().map(|p| p.act)
    }

    fn ff_parts(&self) -> Option<FfParts<'_>> {
        Some(match self {
            Self::FfZeta1 { row, j_const } => FfParts {
                read: Readout::Row(*row),
                offset: 0.0,
                write: Writeback::Row(*row),
                act: PiecewiseLinear::zeta1(*j_const),
            },
            Self::FfZeta2 { row, offset, delta } => FfParts {
                read: Readout::Row(*row),
                offset: *offset,
                write: Writeback::Row(*row),
                act: PiecewiseLinear::zeta2(*delta),
            },
            Self::FfZeta3 { lower, upper, shift } => FfParts {
                read: Readout::Project,
                offset: 0.0,
                write: Writeback::Uniform(-shift),
                act: PiecewiseLinear::zeta3(*lower, *upper),
            },
            Self::FfZeta4 { row } => FfParts {
                read: Readout::Row(*row),
                offset: 0.0,
                write: Writeback::Row(*row),
                act: PiecewiseLinear::zeta4(),
            },
            Self::FfZeta5 { center, half_width, column_delta } => FfParts {
                read: Readout::Project,
                offset: *center,
                write: Writeback::Vector(column_delta),
                act: PiecewiseLinear::zeta5(*half_width),
            },
            _ => return None,
        })
    }

    /// `(bias, sign)` per hardmax head and the output scale.
    fn attn_parts(&self) -> Option<(Vec<(f64, f64)>, f64)> {
        match *self {
            Self::ShiftAttn { b_low, b_high, scale } => Some((vec![(b_low, 1.0), (b_high, -1.0)], scale)),
            Self::GlobalShiftAttn { scale } => Some((vec![(0.0, 1.0)], scale)),
            _ => None,
        }
    }

    pub fn apply(&self, x: &DenseMatrix, u: &[f64]) -> DenseMatrix {
        match self.ff_parts() {
            Some(p) => apply_ff(&p, x, u, |z| p.act.eval(z)),
            None => {
                let (heads, scale) = self.attn_parts().expect("attention layer");
                apply_attn(&heads, scale, x, u, |v, j, b| xi_hard(v, j, b).1)
            }
        }
    }
}

fn readout(read: &Readout, x: &DenseMatrix, u: &[f64], c: usize) -> f64 {
    match *read {
        Readout::Row(i) => x.get(i, c),
        Readout::Project => project_col(u, x, c),
    }
}

fn apply_ff(p: &FfParts<'_>, x: &DenseMatrix, u: &[f64], act: impl Fn(f64) -> f64) -> DenseMatrix {
    let mut out = x.clone();
    for c in 0..x.cols() {
        let a = act(readout(&p.read, x, u, c) - p.offset);
        if a == 0.0 {
            continue;
        }
        for r in 0..x.rows() {
            let coef = p.write.coef(r);
            if coef != 0.0 {
                out.set(r, c, x.get(r, c) + coef * a);
            }
        }
    }
    out
}

fn apply_attn(
    heads: &[(f64, f64)],
    scale: f64,
    x: &DenseMatrix,
    u: &[f64],
    xi: impl Fn(&[f64], usize, f64) -> f64,
) -> DenseMatrix {
    let v: Vec<f64> = (0..x.cols()).map(|c| project_col(u, x, c)).collect();
    let mut out = x.clone();
    for j in 0..x.cols() {
        let shift: f64 = heads.iter().map(|&(b, sign)| sign * xi(&v, j, b)).sum();
        out.set(0, j, x.get(0, j) + scale * shift);
    }
    out
}

/// Hardmax column `j` of `ξ(X; b)`: the value `v_k` maximizing `v_k(v_j − b)`,
/// ties broken to the lowest index.
fn xi_hard(v: &[f64], j: usize, b: f64) -> (usize, f64) {
    let w = v[j] - b;
    let mut best = 0;
    for k in 1..v.len() {
        if v[k] * w > v[best] * w {
            best = k;
        }
    }
    (best, v[best])
}

fn xi_soft(v: &[f64], j: usize, b: f64, lambda: f64) -> f64 {
    let w = v[j] - b;
    let top = v.iter().map(|vk| lambda * vk * w).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &vk in v {
        let p = (lambda * vk * w - top).exp();
        num += p * vk;
        den += p;
    }
    num / den
}

pub fn apply_stack(stack: &[ModifiedLayer], x: &DenseMatrix, u: &[f64]) -> DenseMatrix {
    stack.iter().fold(x.clone(), |acc, layer| layer.apply(&acc, u))
}

/// `d` ζ₁ layers then `d/δ` ζ₂ layers.
pub fn build_quantizer(grid: &GridSpec) -> Vec<ModifiedLayer> {
    let mut stack: Vec<ModifiedLayer> =
        (0..grid.token_dim).map(|row| ModifiedLayer::FfZeta1 { row, j_const: grid.j_const }).collect();
    for row in 0..grid.token_dim {
        for k in 0..grid.levels() {
            stack.push(ModifiedLayer::FfZeta2 { row, offset: k as f64 * grid.delta, delta: grid.delta });
        }
    }
    stack
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextMapper {
    pub pos_enc: DenseMatrix,
    pub layers: Vec<ModifiedLayer>,
    pub t_l: f64,
    pub t_r: f64,
    pub t_l_certified: f64,
}

impl ContextMapper {
    /// `f_{T,c2}(G)`: positional encoding then the shift layers.
    pub fn apply(&self, g: &DenseMatrix, u: &[f64]) -> Result<DenseMatrix> {
        let x = g.add(&self.pos_enc)?;
        Ok(apply_stack(&self.layers, &x, u))
    }
}

/// Selective-shift sweep over every column's ID range, then the global shift.
pub fn build_context_mapper(grid: &GridSpec) -> Result<ContextMapper> {
    if grid.seq_len < 2 || grid.levels() < 2 {
        return Err(Error::Config("the contextual mapping needs L >= 2 and 1/delta >= 2".into()));
    }
    let (d, l, delta) = (grid.token_dim as i32, grid.seq_len, grid.delta);
    let per_col = delta.powi(-d);
    let mut layers = Vec::with_capacity(l * per_col as usize + 1);
    for j in 0..l {
        // First ID of column j once the ramp encoding j is folded in.
        let start = j as f64 * (delta - delta.powi(-d + 1)) / (delta - 1.0);
        for k in 0..per_col as usize {
            let g = start + k as f64 * delta;
            layers.push(ModifiedLayer::ShiftAttn { b_low: g - delta / 2.0, b_high: g + delta / 2.0, scale: per_col });
        }
    }
    layers.push(ModifiedLayer::GlobalShiftAttn { scale: l as f64 * delta.powi(-(l as i32 + 1) * d - 1) });
    let (t_l, t_r) = grid.cited_bounds();
    Ok(ContextMapper { pos_enc: grid.positional_encoding(), layers, t_l, t_r, t_l_certified: grid.certified_lower() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub input: DenseMatrix,
    pub on_grid: bool,
    pub output: DenseMatrix,
    /// `q_c(G) = uᵀ f_{T,c2}(G)`.
    pub q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextTable {
    pub entries: Vec<ContextEntry>,
    /// Every point of `G_δ⁺` is present.
    pub complete: bool,
    pub m: f64,
}

impl ContextTable {
    pub fn on_grid(&self) -> impl Iterator<Item = &ContextEntry> {
        self.entries.iter().filter(|e| e.on_grid)
    }

    pub fn off_grid(&self) -> impl Iterator<Item = &ContextEntry> {
        self.entries.iter().filter(|e| !e.on_grid)
    }

    /// Lemma properties against the window `[lo, hi]`.
    pub fn check(&self, lo: f64, hi: f64) -> LemmaChecks {
        let within_distinct = self.on_grid().all(|e| {
            let mut q = e.q.clone();
            q.sort_by(f64::total_cmp);
            q.windows(2).all(|w| w[0] != w[1])
        });
        let mut all: Vec<f64> = self.on_grid().flat_map(|e| e.q.iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        let min_separation = all.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        LemmaChecks {
            lower: lo,
            upper: hi,
            within_distinct,
            across_distinct: min_separation > 0.0,
            on_grid_inside: self.on_grid().all(|e| e.q.iter().all(|&q| (lo..=hi).contains(&q))),
            off_grid_outside: self.off_grid().all(|e| e.q.iter().all(|&q| !(lo..=hi).contains(&q))),
            min_separation,
        }
    }

    pub fn on_grid_range(&self) -> (f64, f64) {
        self.on_grid()
            .flat_map(|e| e.q.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q), b.max(q)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaChecks {
    pub lower: f64,
    pub upper: f64,
    /// Entries of each `q_c(G)` are distinct.
    pub within_distinct: bool,
    /// Entries are distinct across different on-grid `G`.
    pub across_distinct: bool,
    /// On-grid values lie in `[lower, upper]`.
    pub on_grid_inside: bool,
    /// Every off-grid value lies outside `[lower, upper]`.
    pub off_grid_outside: bool,
    pub min_separation: f64,
}

impl LemmaChecks {
    pub fn all_hold(&self) -> bool {
        self.within_distinct && self.across_distinct && self.on_grid_inside && self.off_grid_outside
    }
}

/// Contextual outputs over `G_δ⁺`; exhaustive below [`EXHAUSTIVE_CAP`],
/// otherwise `samples` random on- and off-grid points each.
pub fn enumerate_context(grid: &mut GridSpec, mapper: &ContextMapper, samples: usize, seed: u64) -> Result<ContextTable> {
    let complete = grid.exhaustive();
    let inputs: Vec<(DenseMatrix, bool)> = if complete {
        grid.on_grid_points().map(|g| (g, true)).chain(grid.off_grid_points().map(|g| (g, false))).collect()
    } else {
        let mut rng = rng::stream(seed, 0x0a);
        (0..2 * samples).map(|i| (grid.random_point(&mut rng, i % 2 == 1), i % 2 == 0)).collect()
    };
    let mut entries = Vec::with_capacity(inputs.len());
    let mut m: f64 = 0.0;
    for (input, on_grid) in inputs {
        let output = mapper.apply(&input, &grid.u)?;
        m = output.as_slice().iter().fold(m, |a, x| a.max(x.abs()));
        let q = grid.project(&output);
        entries.push(ContextEntry { input, on_grid, output, q });
    }
    if !(m < EXACT_LIMIT) {
        return Err(Error::Construction(format!("contextual outputs reach {m:e}; grid arithmetic is no longer exact")));
    }
    grid.m = Some(m);
    Ok(ContextTable { entries, complete, m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memorizer {
    pub layers: Vec<ModifiedLayer>,
    pub window: (f64, f64),
    pub shift: f64,
}

/// ζ₃ with shift `M+1`, `d` ζ₄ clamps, one ζ₅ per on-grid contextual value.
/// `targets[i]` is `A_G` for the `i`-th on-grid entry of `table`.
pub fn build_memorizer(grid: &GridSpec, mapper: &ContextMapper, table: &ContextTable, targets: &[DenseMatrix]) -> Result<Memorizer> {
    let on: Vec<&ContextEntry> = table.on_grid().collect();
    if on.len() != targets.len() {
        return Err(Error::Construction(format!("{} targets for {} on-grid points", targets.len(), on.len())));
    }
    let half = grid.delta / 2.0;
    let mut values: Vec<f64> = on.iter().flat_map(|e| e.q.iter().copied()).collect();
    values.sort_by(f64::total_cmp);
    if let Some(w) = values.windows(2).find(|w| w[1] - w[0] <= half) {
        return Err(Error::Construction(format!("contextual values {} and {} are not separated by more than delta/2", w[0], w[1])));
    }
    let window = (mapper.t_l_certified, mapper.t_r);
    let checks = table.check(window.0, window.1);
    if !(checks.on_grid_inside && checks.off_grid_outside) {
        return Err(Error::Construction(format!("window [{}, {}] does not separate on- from off-grid values", window.0, window.1)));
    }
    if window.0 <= half {
        return Err(Error::Construction("window lower end must exceed delta/2".into()));
    }
    for a in targets {
        if a.shape() != (grid.token_dim, grid.seq_len) || !a.is_finite() {
            return Err(Error::Construction("target has the wrong shape or non-finite entries".into()));
        }
        for z in grid.project(a) {
            // A rewritten column must not be picked up by a later ζ₅.
            let i = values.partition_point(|&v| v < z - half);
            if values.get(i).is_some_and(|&v| z - v < half && z - v >= -half) {
                return Err(Error::Construction(format!("target column with uᵀa = {z} collides with a contextual value")));
            }
        }
    }
    let shift = table.m + 1.0;
    let mut layers = vec![ModifiedLayer::FfZeta3 { lower: window.0, upper: window.1, shift }];
    layers.extend((0..grid.token_dim).map(|row| ModifiedLayer::FfZeta4 { row }));
    for (entry, a) in on.iter().zip(targets) {
        for (j, &q) in entry.q.iter().enumerate() {
            let column_delta = (0..grid.token_dim).map(|r| a.get(r, j) - entry.output.get(r, j)).collect();
            layers.push(ModifiedLayer::FfZeta5 { center: q, half_width: half, column_delta });
        }
    }
    Ok(Memorizer { layers, window, shift })
}

/// The three stages assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UaPipeline {
    pub grid: GridSpec,
    pub quantizer: Vec<ModifiedLayer>,
    pub context: ContextMapper,
    pub memorizer: Memorizer,
}

impl UaPipeline {
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let q = apply_stack(&self.quantizer, x, &self.grid.u);
        let c = self.context.apply(&q, &self.grid.u)?;
        Ok(apply_stack(&self.memorizer.layers, &c, &self.grid.u))
    }

    pub fn layer_count(&self) -> usize {
        self.quantizer.len() + self.context.layers.len() + self.memorizer.layers.len()
    }

    pub fn soften(&self, lambda: f64, eps: f64) -> Result<SoftPipeline> {
        Ok(SoftPipeline {
            quantizer: soften(&self.quantizer, lambda, eps)?,
            context: soften(&self.context.layers, lambda, eps)?,
            memorizer: soften(&self.memorizer.layers, lambda, eps)?,
            lambda,
            eps,
        })
    }

    /// `‖f_T − f‖_{L²([0,1)^{d×L})}` for the piecewise-constant target taking
    /// `targets[i]` on the cube of the `i`-th on-grid point, by midpoint
    /// Riemann summation with `sub^{dL}` points per cube.
    pub fn l2_error(
        &self,
        targets: &[DenseMatrix],
        sub: usize,
        eval: impl Fn(&DenseMatrix) -> Result<DenseMatrix>,
    ) -> Result<f64> {
        let n = self.grid.token_dim * self.grid.seq_len;
        let per_cube = (sub as u128).saturating_pow(n as u32);
        if sub == 0 || per_cube * self.grid.on_grid_count() > 1 << 22 {
            return Err(Error::Config("Riemann grid too large".into()));
        }
        let weight = self.grid.delta.powi(n as i32) / per_cube as f64;
        let mut acc = 0.0;
        for (g, a) in self.grid.on_grid_points().zip(targets) {
            for idx in 0..per_cube {
                let mut x = g.clone();
                let mut rem = idx;
                for v in x.as_mut_slice() {
                    let m = (rem % sub as u128) as f64;
                    rem /= sub as u128;
                    *v += self.grid.delta * (m + 0.5) / sub as f64;
                }
                let out = eval(&x)?;
                let diff = out.sub(a)?;
                acc += diff.as_slice().iter().map(|v| v * v).sum::<f64>() * weight;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Assemble quantizer, contextual mapper and memorizer for the given targets.
pub fn build_pipeline(grid: GridSpec, table: &ContextTable, mapper: ContextMapper, targets: &[DenseMatrix]) -> Result<UaPipeline> {
    let memorizer = build_memorizer(&grid, &mapper, table, targets)?;
    Ok(UaPipeline { quantizer: build_quantizer(&grid), context: mapper, memorizer, grid })
}

/// A standard layer: ReLU-expanded activation or temperature-λ softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLayer {
    pub base: ModifiedLayer,
    pub relu: Option<ReluExpansion>,
    pub lambda: f64,
}

impl SoftLayer {
    pub fn apply(&self, x: &DenseMatrix, u: &[f64]) -> DenseMatrix {
        match (self.base.ff_parts(), &self.relu) {
            (Some(p), Some(r)) => apply_ff(&p, x, u, |z| r.eval(z)),
            _ => {
                let (heads, scale) = self.base.attn_parts().expect("attention layer");
                apply_attn(&heads, scale, x, u, |v, j, b| xi_soft(v, j, b, self.lambda))
            }
        }
    }

    /// Bound on `‖soft(X̃) − modified(X)‖_max` given `‖X̃ − X‖_max ≤ err`.
    /// An unperturbed input is evaluated directly, so rounding only enters
    /// once the trajectories have separated.
    pub fn propagate(&self, x: &DenseMatrix, err: f64, u: &[f64]) -> f64 {
        if err == 0.0 {
            return max_abs_diff(&self.apply(x, u), &self.base.apply(x, u));
        }
        let u_l1: f64 = u.iter().map(|v| v.abs()).sum();
        let xmax = x.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let proj_err = u_l1 * err + (u.len() as f64 + 1.0) * EPS * u_l1 * (xmax + err);
        let mut worst = err;
        if let (Some(p), Some(relu)) = (self.base.ff_parts(), &self.relu) {
            for c in 0..x.cols() {
                let raw = readout(&p.read, x, u, c);
                let z = raw - p.offset;
                let ez = match p.read {
                    Readout::Row(_) => err,
                    Readout::Project => proj_err,
                } + EPS * (raw.abs() + p.offset.abs() + err);
                let exact = p.act.eval(z);
                let act_err = (relu.eval(z) - exact).abs()
                    + relu.lipschitz_on(z - ez, z + ez) * ez
                    + 2.0 * relu.rounding(z.abs() + ez);
                for r in 0..x.rows() {
                    let coef = p.write.coef(r);
                    let out = x.get(r, c) + coef * exact;
                    let e = err + coef.abs() * act_err + 2.0 * EPS * (out.abs() + coef.abs() * (exact.abs() + act_err) + err);
                    worst = worst.max(e);
                }
            }
            return worst;
        }
        let (heads, scale) = self.base.attn_parts().expect("attention layer");
        let v: Vec<f64> = (0..x.cols()).map(|c| project_col(u, x, c)).collect();
        let vmax = v.iter().fold(0.0f64, |a, b| a.max(b.abs())) + proj_err;
        for j in 0..v.len() {
            let mut shift_err = 0.0;
            for &(b, _) in &heads {
                let w = v[j] - b;
                let (star, vs) = xi_hard(&v, j, b);
                let ds = |k: usize| {
                    v[k].abs() * proj_err + w.abs() * proj_err + proj_err * proj_err + 4.0 * EPS * (v[k] * w).abs()
                };
                let mut tail = 0.0;
                let mut spread: f64 = 0.0;
                for k in (0..v.len()).filter(|&k| k != star) {
                    let gap = (v[star] * w - v[k] * w) - ds(star) - ds(k);
                    let p = if gap > 0.0 { (-self.lambda * gap).exp() } else { 1.0 };
                    tail += p * ((v[k] - vs).abs() + 2.0 * proj_err);
                    spread = spread.max((v[k] - vs).abs());
                }
                let rnd = 4.0 * v.len() as f64 * EPS * vmax;
                shift_err += proj_err + tail.min(spread + proj_err) + rnd;
            }
            let out = x.get(0, j).abs() + scale * vmax * heads.len() as f64;
            worst = worst.max(err + scale * shift_err + 3.0 * EPS * out);
        }
        worst
    }
}

/// Replace every activation by its ε ReLU expansion and every hardmax by
/// softmax at temperature `lambda`.
pub fn soften(stack: &[ModifiedLayer], lambda: f64, eps: f64) -> Result<Vec<SoftLayer>> {
    if !(lambda > 0.0) || !(eps > 0.0) {
        return Err(Error::OutOfRange(format!("soften needs lambda > 0 and eps > 0, got {lambda}, {eps}")));
    }
    stack
        .iter()
        .map(|layer| {
            let relu = layer.activation().map(|a| a.relu_form(eps)).transpose()?;
            Ok(SoftLayer { base: layer.clone(), relu, lambda })
        })
        .collect()
}

pub fn apply_soft_stack(stack: &[SoftLayer], x: &DenseMatrix, u: &[f64]) -> DenseMatrix {
    stack.iter().fold(x.clone(), |acc, layer| layer.apply(&acc, u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPipeline {
    pub quantizer: Vec<SoftLayer>,
    pub context: Vec<SoftLayer>,
    pub memorizer: Vec<SoftLayer>,
    pub lambda: f64,
    pub eps: f64,
}

impl SoftPipeline {
    pub fn forward(&self, x: &DenseMatrix, pos_enc: &DenseMatrix, u: &[f64]) -> Result<DenseMatrix> {
        let q = apply_soft_stack(&self.quantizer, x, u);
        let c = apply_soft_stack(&self.context, &q.add(pos_enc)?, u);
        Ok(apply_soft_stack(&self.memorizer, &c, u))
    }

    pub fn relu_count(&self) -> usize {
        self.quantizer.iter().chain(&self.context).chain(&self.memorizer).filter_map(|l| l.relu.as_ref()).map(|r| r.terms.len()).sum()
    }

    /// Actual deviation from the modified pipeline at `x` and the bound
    /// obtained by propagating the error radius layer by layer.
    pub fn deviation(&self, pipeline: &UaPipeline, x: &DenseMatrix) -> Result<(f64, f64)> {
        let u = &pipeline.grid.u;
        let soft = self.forward(x, &pipeline.context.pos_enc, u)?;
        let exact = pipeline.forward(x)?;
        let mut cur = x.clone();
        let mut err = 0.0;
        for (soft_layer, layer) in self.quantizer.iter().zip(&pipeline.quantizer) {
            err = soft_layer.propagate(&cur, err, u);
            cur = layer.apply(&cur, u);
        }
        cur = cur.add(&pipeline.context.pos_enc)?;
        let xmax = cur.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        err += EPS * (xmax + err);
        let rest = self.context.iter().zip(&pipeline.context.layers).chain(self.memorizer.iter().zip(&pipeline.memorizer.layers));
        for (soft_layer, layer) in rest {
            err = soft_layer.propagate(&cur, err, u);
            cur = layer.apply(&cur, u);
        }
        Ok((max_abs_diff(&soft, &exact), err))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftReport {
    pub lambda: f64,
    pub eps: f64,
    pub relu_count: usize,
    pub on_grid_deviation: f64,
    pub off_grid_deviation: f64,
    pub max_deviation: f64,
    pub bound: f64,
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerCheck {
    pub layer_count: usize,
    pub samples: usize,
    pub mismatches: usize,
    pub idempotent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizerCheck {
    pub layer_count: usize,
    pub on_grid_max_deviation: f64,
    pub off_grid_max_abs: f64,
    pub exact: bool,
    pub identity_exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Record {
    pub lambda: f64,
    pub eps: f64,
    pub l2_error: f64,
}

/// Parameters of a verification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UaConfig {
    pub token_dim: usize,
    pub seq_len: usize,
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_soft_eps")]
    pub eps: f64,
    #[serde(default = "default_quantizer_samples")]
    pub quantizer_samples: usize,
    /// Midpoints per cube axis in the L² Riemann sum.
    #[serde(default = "default_l2_sub")]
    pub l2_subdivisions: usize,
}

fn default_lambdas() -> Vec<f64> {
    vec![10.0, 100.0, 1000.0]
}
fn default_soft_eps() -> f64 {
    1e-3
}
fn default_quantizer_samples() -> usize {
    1000
}
fn default_l2_sub() -> usize {
    2
}

impl UaConfig {
    pub fn new(token_dim: usize, seq_len: usize, delta: f64) -> Self {
        Self {
            token_dim,
            seq_len,
            delta,
            seed: 0,
            lambdas: default_lambdas(),
            eps: default_soft_eps(),
            quantizer_samples: default_quantizer_samples(),
            l2_subdivisions: default_l2_sub(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UaReport {
    pub grid: GridSpec,
    pub t_l: f64,
    pub t_r: f64,
    pub t_l_certified: f64,
    pub exhaustive: bool,
    pub on_grid_points: usize,
    pub off_grid_points: usize,
    pub on_grid_range: (f64, f64),
    /// Properties against the cited `[t_l, t_r]`.
    pub cited: LemmaChecks,
    /// Properties against `[t_l_certified, t_r]`, the window the memorizer uses.
    pub certified: LemmaChecks,
    pub quantizer: QuantizerCheck,
    pub context_layer_count: usize,
    pub memorizer: MemorizerCheck,
    pub soften: Vec<SoftReport>,
    pub soften_monotone: bool,
    pub modified_l2: f64,
    pub soft_l2: Vec<L2Record>,
    pub warnings: Vec<String>,
}

/// Seeded targets on the dyadic lattice `2^-16·Z ∩ [0,1)`, so the memorizer's
/// column rewrites stay exact.
pub fn random_targets(grid: &GridSpec, count: usize, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = rng::stream(seed, 0x7a);
    (0..count)
        .map(|_| DenseMatrix::from_fn(grid.token_dim, grid.seq_len, |_, _| rng.random_range(0..1u32 << 16) as f64 / 65536.0))
        .collect()
}

fn check_quantizer(grid: &GridSpec, stack: &[ModifiedLayer], samples: usize, seed: u64) -> QuantizerCheck {
    let mut rng = rng::stream(seed, 0x9b);
    let (mut mismatches, mut idempotent) = (0, true);
    for _ in 0..samples {
        let x = DenseMatrix::from_fn(grid.token_dim, grid.seq_len, |_, _| rng.random_range(-0.5..1.5));
        let once = apply_stack(stack, &x, &grid.u);
        if x.as_slice().iter().zip(once.as_slice()).any(|(&a, &b)| grid.quantize_entry(a) != b) {
            mismatches += 1;
        }
        let inside = x.map(|v| v.rem_euclid(1.0));
        let q = apply_stack(stack, &inside, &grid.u);
        idempotent &= apply_stack(stack, &q, &grid.u) == q;
    }
    QuantizerCheck { layer_count: stack.len(), samples, mismatches, idempotent }
}

/// Build the full pipeline for `config` and check it end to end.
pub fn verify(config: &UaConfig) -> Result<UaReport> {
    let mut grid = GridSpec::new(config.token_dim, config.seq_len, config.delta)?;
    let mut warnings = Vec::new();
    let mapper = build_context_mapper(&grid)?;
    let table = enumerate_context(&mut grid, &mapper, EXHAUSTIVE_CAP as usize, config.seed)?;
    if !table.complete {
        warnings.push(format!(
            "{} on-grid points exceed the exhaustive cap; properties checked on {} sampled points",
            grid.on_grid_count(),
            table.entries.len()
        ));
    }
    let cited = table.check(mapper.t_l, mapper.t_r);
    let certified = table.check(mapper.t_l_certified, mapper.t_r);
    let quantizer = check_quantizer(&grid, &build_quantizer(&grid), config.quantizer_samples, config.seed);

    let n_on = table.on_grid().count();
    let targets = random_targets(&grid, n_on, config.seed);
    let on_inputs: Vec<DenseMatrix> = table.on_grid().map(|e| e.input.clone()).collect();
    let identity = build_pipeline(grid.clone(), &table, mapper.clone(), &on_inputs)?;
    let identity_exact = on_inputs.iter().all(|g| identity.forward(g).is_ok_and(|o| &o == g));
    let pipeline = build_pipeline(grid.clone(), &table, mapper, &targets)?;

    let mut on_dev: f64 = 0.0;
    for (g, a) in on_inputs.iter().zip(&targets) {
        on_dev = on_dev.max(max_abs_diff(&pipeline.forward(g)?, a));
    }
    let mut off_abs: f64 = 0.0;
    for e in table.off_grid() {
        off_abs = pipeline.forward(&e.input)?.as_slice().iter().fold(off_abs, |m, v| m.max(v.abs()));
    }
    let memorizer = MemorizerCheck {
        layer_count: pipeline.memorizer.layers.len(),
        on_grid_max_deviation: on_dev,
        off_grid_max_abs: off_abs,
        exact: on_dev == 0.0 && off_abs == 0.0,
        identity_exact,
    };

    let mut soften_reports = Vec::with_capacity(config.lambdas.len());
    for &lambda in &config.lambdas {
        let soft = pipeline.soften(lambda, config.eps)?;
        let (mut on, mut off, mut bound) = (0.0f64, 0.0f64, 0.0f64);
        for e in &table.entries {
            let (dev, b) = soft.deviation(&pipeline, &e.input)?;
            if e.on_grid {
                on = on.max(dev);
            } else {
                off = off.max(dev);
            }
            bound = bound.max(b);
        }
        let max_deviation = on.max(off);
        soften_reports.push(SoftReport {
            lambda,
            eps: config.eps,
            relu_count: soft.relu_count(),
            on_grid_deviation: on,
            off_grid_deviation: off,
            max_deviation,
            bound,
            within_bound: max_deviation <= bound,
        });
    }
    let soften_monotone = soften_reports.windows(2).all(|w| w[1].max_deviation < w[0].max_deviation);

    let (modified_l2, soft_l2) = if table.complete {
        let modified = pipeline.l2_error(&targets, 1, |x| pipeline.forward(x))?;
        let mut soft_l2 = Vec::new();
        for &lambda in &config.lambdas {
            // The ramp width shrinks with the temperature so both limits are taken together.
            let eps = config.eps.min(1.0 / lambda);
            let soft = pipeline.soften(lambda, eps)?;
            let l2 = pipeline.l2_error(&targets, config.l2_subdivisions, |x| {
                soft.forward(x, &pipeline.context.pos_enc, &grid.u)
            })?;
            soft_l2.push(L2Record { lambda, eps, l2_error: l2 });
        }
        (modified, soft_l2)
    } else {
        warnings.push("L2 errors skipped for a sampled grid".into());
        (f64::NAN, Vec::new())
    };

    Ok(UaReport {
        t_l: pipeline.context.t_l,
        t_r: pipeline.context.t_r,
        t_l_certified: pipeline.context.t_l_certified,
        exhaustive: table.complete,
        on_grid_points: n_on,
        off_grid_points: table.off_grid().count(),
        on_grid_range: table.on_grid_range(),
        cited,
        certified,
        quantizer,
        context_layer_count: pipeline.context.layers.len(),
        memorizer,
        soften: soften_reports,
        soften_monotone,
        modified_l2,
        soft_l2,
        warnings,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GridSpec {
        GridSpec::new(1, 2, 0.5).unwrap()
    }

    #[test]
    fn grid_constants() {
        let g = small();
        assert_eq!(g.u, vec![1.0]);
        assert_eq!(g.j_const, 26.0);
        assert_eq!(g.cited_bounds(), (128.0, 528.0));
        assert!(GridSpec::new(1, 2, 0.3).is_err());
        assert_eq!(GridSpec::new(3, 2, 0.25).unwrap().u, vec![1.0, 4.0, 16.0]);
    }

    #[test]
    fn quantizer_examples() {
        let g = small();
        let q = build_quantizer(&g);
        assert_eq!(q.len(), 3);
        let x = DenseMatrix::from_rows(&[vec![0.3, 1.5]]).unwrap();
        let out = apply_stack(&q, &x, &g.u);
        assert_eq!(out.as_slice(), &[0.0, -26.0]);
        let z = DenseMatrix::zeros(1, 2);
        assert_eq!(apply_stack(&q, &z, &g.u), z);
    }

    #[test]
    fn relu_form_matches_pieces_away_from_ramps() {
        let acts = [
            PiecewiseLinear::zeta1(26.0),
            PiecewiseLinear::zeta2(0.5),
            PiecewiseLinear::zeta3(3.0, 7.0),
            PiecewiseLinear::zeta4(),
            PiecewiseLinear::zeta5(0.25),
        ];
        for act in acts {
            let relu = act.relu_form(1e-3).unwrap();
            assert!(relu.terms.len() <= 4);
            for i in -400..=400 {
                let x = i as f64 * 0.0234375;
                let near = act.knots.iter().any(|k| (x - k.at).abs() <= 1e-3);
                if !near {
                    assert!((relu.eval(x) - act.eval(x)).abs() < 1e-9, "{act:?} at {x}");
                }
            }
        }
    }

    #[test]
    fn continuous_activation_is_exact_for_any_eps() {
        let act = PiecewiseLinear::zeta4();
        for eps in [1e-6, 0.1, 3.0] {
            let relu = act.relu_form(eps).unwrap();
            for x in [-2.0, -eps / 2.0, 0.0, 0.7] {
                assert_eq!(relu.eval(x), act.eval(x));
            }
        }
    }

    #[test]
    fn overlapping_ramps_rejected() {
        assert!(PiecewiseLinear::zeta2(0.5).relu_form(0.75).is_err());
    }

    #[test]
    fn hardmax_ties_go_to_lowest_index() {
        assert_eq!(xi_hard(&[2.0, 2.0, 1.0], 0, 0.0), (0, 2.0));
        assert_eq!(xi_hard(&[1.0, 3.0, 2.0], 0, 5.0), (0, 1.0));
    }

    #[test]
    fn context_values_on_smallest_grid() {
        let mut g = small();
        let mapper = build_context_mapper(&g).unwrap();
        assert_eq!(mapper.layers.len(), 5);
        let table = enumerate_context(&mut g, &mapper, 0, 0).unwrap();
        let on: Vec<Vec<f64>> = table.on_grid().map(|e| e.q.clone()).collect();
        assert_eq!(on, vec![vec![98.0, 99.0], vec![82.5, 82.0], vec![147.0, 148.5], vec![114.5, 115.5]]);
        assert_eq!(table.off_grid().count(), 5);
    }

    #[test]
    fn mapper_rejects_short_sequences() {
        assert!(build_context_mapper(&GridSpec::new(1, 1, 0.5).unwrap()).is_err());
    }
}
