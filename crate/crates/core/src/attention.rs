//! Single-layer softmax attention: exact inference and loss gradient, and
//! low-rank approximations of both built from Taylor feature maps.
//!
//! Convention: `f = rowsoftmax(A1ᵀ W A2)` (L×L), output `W_OV · A3 · fᵀ` (d×L),
//! loss `½‖W_OV A3 fᵀ − Y‖²_F`.

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{dot, row_kron, DenseMatrix, LowRankFactors, NormKind};
use crate::rng;

/// Largest exp argument accepted before reporting overflow.
pub const EXP_LIMIT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    SelfAttention,
    Cross,
}

/// Factor pair with `W = W_Kᵀ W_Q`, so that `A1ᵀ W A2 = (W_K A1)ᵀ (W_Q A2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KqSplit {
    pub w_k: DenseMatrix,
    pub w_q: DenseMatrix,
}

#[derive(Clone, Debug)]
pub struct AttentionInstance {
    pub a1: DenseMatrix,
    pub a2: DenseMatrix,
    pub a3: DenseMatrix,
    pub w: DenseMatrix,
    pub w_ov: DenseMatrix,
    pub y: DenseMatrix,
    pub mode: AttentionMode,
    pub split: Option<KqSplit>,
}

impl AttentionInstance {
    pub fn cross(
        a1: DenseMatrix,
        a2: DenseMatrix,
        a3: DenseMatrix,
        w: DenseMatrix,
        w_ov: DenseMatrix,
        y: DenseMatrix,
    ) -> Result<Self> {
        let inst = Self { a1, a2, a3, w, w_ov, y, mode: AttentionMode::Cross, split: None };
        inst.validate()?;
        Ok(inst)
    }

    /// Self-attention: key and query inputs are the same matrix.
    pub fn self_attention(
        x: DenseMatrix,
        a3: DenseMatrix,
        w: DenseMatrix,
        w_ov: DenseMatrix,
        y: DenseMatrix,
    ) -> Result<Self> {
        let inst = Self {
            a2: x.clone(),
            a1: x,
            a3,
            w,
            w_ov,
            y,
            mode: AttentionMode::SelfAttention,
            split: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Replaces `W` by `W_Kᵀ W_Q` and remembers the split for factorization.
    pub fn with_split(mut self, w_k: DenseMatrix, w_q: DenseMatrix) -> Result<Self> {
        if w_k.shape() != w_q.shape() || w_k.cols() != self.d() {
            return Err(dim("with_split", format!("W_K {:?}, W_Q {:?}", w_k.shape(), w_q.shape())));
        }
        self.w = w_k.matmul_tn(&w_q)?;
        self.split = Some(KqSplit { w_k, w_q });
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.a1.rows()
    }

    pub fn seq_len(&self) -> usize {
        self.a1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, l) = self.a1.shape();
        for (name, m) in [("A2", &self.a2), ("A3", &self.a3), ("Y", &self.y)] {
            if m.shape() != (d, l) {
                return Err(dim("AttentionInstance", format!("{name} is {:?}, expected {d}x{l}", m.shape())));
            }
        }
        for (name, m) in [("W", &self.w), ("W_OV", &self.w_ov)] {
            if m.shape() != (d, d) {
                return Err(dim("AttentionInstance", format!("{name} is {:?}, expected {d}x{d}", m.shape())));
            }
        }
        if self.mode == AttentionMode::SelfAttention && self.a1 != self.a2 {
            return Err(Error::Config("self-attention requires A1 == A2".into()));
        }
        Ok(())
    }

    /// Row factors `(Qt, Kt)` with `Qt·Ktᵀ = A1ᵀ W A2`.
    pub fn feature_pair(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        match &self.split {
            Some(s) => Ok((s.w_k.matmul(&self.a1)?.transpose(), s.w_q.matmul(&self.a2)?.transpose())),
            None => Ok((self.a1.matmul_tn(&self.w)?, self.a2.transpose())),
        }
    }

    /// `h = A3ᵀ W_OVᵀ` (L×d); row k is the value vector of token k.
    pub fn values(&self) -> Result<DenseMatrix> {
        self.a3.matmul_tn(&self.w_ov.transpose())
    }

    /// Seeded instance with `‖W_K A1‖_max = ‖W_Q A2‖_max = ‖W_OV A3‖_max = γ`.
    pub fn random_bounded(d: usize, l: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut s = rng::stream(seed, 0x6174_746e);
        let a1 = rng::gaussian_matrix(&mut s, d, l);
        let a2 = rng::gaussian_matrix(&mut s, d, l);
        let a3 = rng::gaussian_matrix(&mut s, d, l);
        let rescale = |w: DenseMatrix, a: &DenseMatrix| -> Result<DenseMatrix> {
            let m = w.matmul(a)?.norm(NormKind::Max);
            Ok(if m > 0.0 { w.scale(gamma / m) } else { w })
        };
        let w_k = rescale(rng::gaussian_matrix(&mut s, d, d), &a1)?;
        let w_q = rescale(rng::gaussian_matrix(&mut s, d, d), &a2)?;
        let w_ov = rescale(rng::gaussian_matrix(&mut s, d, d), &a3)?;
        let y = rng::gaussian_matrix(&mut s, d, l).scale(gamma);
        Self::cross(a1, a2, a3, DenseMatrix::zeros(d, d), w_ov, y)?.with_split(w_k, w_q)
    }
}

fn overflow_check(max_arg: f64) -> Result<()> {
    if max_arg > EXP_LIMIT {
        Err(Error::Overflow { bound: max_arg })
    } else {
        Ok(())
    }
}

/// Softmax of one row of scores, in place. Returns the largest raw score.
fn softmax_in_place(row: &mut [f64]) -> f64 {
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - top).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
    top
}

/// Exact `f = D⁻¹ exp(A1ᵀ W A2)`, materialized (L×L).
pub fn softmax_matrix(inst: &AttentionInstance) -> Result<DenseMatrix> {
    let (qt, kt) = inst.feature_pair()?;
    let mut f = qt.matmul_nt(&kt)?;
    for j in 0..f.rows() {
        overflow_check(softmax_in_place(f.row_mut(j)))?;
    }
    Ok(f)
}

/// `W_OV · A3 · fᵀ`. Quadratic time, computed one query row at a time so only
/// O(L) scratch is live.
pub fn attention_exact(inst: &AttentionInstance) -> Result<DenseMatrix> {
    inst.validate()?;
    let (qt, kt) = inst.feature_pair()?;
    let h = inst.values()?;
    exact_rows(&qt, &kt, &h)
}

/// Streaming exact attention from factors; returns `(f·h)ᵀ` as d×L.
pub(crate) fn exact_rows(qt: &DenseMatrix, kt: &DenseMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    let l = qt.rows();
    let dv = h.cols();
    let mut out = DenseMatrix::zeros(dv, l);
    let mut row = vec![0.0; kt.rows()];
    let mut acc = vec![0.0; dv];
    for j in 0..l {
        let q = qt.row(j);
        for (k, r) in row.iter_mut().enumerate() {
            *r = dot(q, kt.row(k));
        }
        overflow_check(softmax_in_place(&mut row))?;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &fk) in row.iter().enumerate() {
            for (a, &hv) in acc.iter_mut().zip(h.row(k)) {
                *a += fk * hv;
            }
        }
        for (a, &v) in acc.iter().enumerate() {
            out.set(a, j, v);
        }
    }
    Ok(out)
}

/// The loss `½‖W_OV A3 fᵀ − Y‖²_F`.
pub fn loss0(inst: &AttentionInstance) -> Result<f64> {
    let out = attention_exact(inst)?;
    let r = out.sub(&inst.y)?;
    Ok(0.5 * dot(r.as_slice(), r.as_slice()))
}

/// Intermediate matrices of the exact gradient.
#[derive(Clone, Debug)]
pub struct GradientWorkspace {
    pub f: DenseMatrix,
    pub h: DenseMatrix,
    pub c: DenseMatrix,
    pub q: DenseMatrix,
    pub p1: DenseMatrix,
    pub p2: DenseMatrix,
    pub p: DenseMatrix,
    pub r: Vec<f64>,
}

impl GradientWorkspace {
    pub fn build(inst: &AttentionInstance) -> Result<Self> {
        inst.validate()?;
        let f = softmax_matrix(inst)?;
        let h = inst.values()?;
        let c = f.matmul(&h)?.sub(&inst.y.transpose())?;
        Self::from_upstream(f, h, c)
    }

    /// Workspace for an arbitrary upstream gradient `c = (∂ℒ/∂out)ᵀ`.
    pub fn from_upstream(f: DenseMatrix, h: DenseMatrix, c: DenseMatrix) -> Result<Self> {
        let q = c.matmul_nt(&h)?;
        let p1 = f.hadamard(&q)?;
        let r: Vec<f64> = (0..f.rows()).map(|j| dot(f.row(j), q.row(j))).collect();
        let p2 = f.scale_rows(&r)?;
        let p = p1.sub(&p2)?;
        Ok(Self { f, h, c, q, p1, p2, p, r })
    }
}

/// `∂ℒ/∂W = A1 · p · A2ᵀ` (d×d).
pub fn grad_exact(inst: &AttentionInstance) -> Result<DenseMatrix> {
    let ws = GradientWorkspace::build(inst)?;
    inst.a1.matmul(&ws.p)?.matmul_nt(&inst.a2)
}

// ---------------------------------------------------------------------------
// Taylor feature maps

/// Monomials of degree ≤ g in d variables, weighted so that
/// `φ(q)·φ(k) = Σ_{n≤g} ⟨q,k⟩ⁿ / n!`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub d: usize,
    pub degree: usize,
    // (parent index, variable, 1/sqrt(multiplicity)); entry 0 is the constant.
    terms: Vec<(usize, usize, f64)>,
}

impl FeatureMap {
    pub fn new(d: usize, degree: usize) -> Self {
        let mut terms = vec![(0, 0, 1.0)];
        // last variable and its multiplicity for each monomial
        let mut last: Vec<(usize, usize)> = vec![(0, 0)];
        let mut level = 0..1;
        for n in 1..=degree {
            let start = terms.len();
            for parent in level.clone() {
                let (lv, lc) = last[parent];
                let from = if n == 1 { 0 } else { lv };
                for v in from..d {
                    let mult = if n > 1 && v == lv { lc + 1 } else { 1 };
                    terms.push((parent, v, 1.0 / (mult as f64).sqrt()));
                    last.push((v, mult));
                }
            }
            level = start..terms.len();
        }
        Self { d, degree, terms }
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (i, &(p, v, w)) in self.terms.iter().enumerate().skip(1) {
            out[i] = out[p] * x[v] * w;
        }
    }

    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let k = self.rank();
        let mut out = DenseMatrix::zeros(x.rows(), k);
        for i in 0..x.rows() {
            self.apply_row(x.row(i), out.row_mut(i));
        }
        out
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// `e^{B̄}·B̄^{g+1}/(g+1)!`, the relative error of the degree-g Taylor
/// polynomial of `exp` on `[−B̄, B̄]`.
pub fn tail_bound(bbar: f64, g: usize) -> f64 {
    if bbar <= 0.0 {
        return 0.0;
    }
    (bbar + (g + 1) as f64 * bbar.ln() - ln_factorial(g + 1)).exp()
}

/// Smallest g with `tail_bound(bbar, g) ≤ rho`.
pub fn degree_for(bbar: f64, rho: f64) -> usize {
    let mut g = 0;
    let mut lnfact = 0.0; // ln((g+1)!)
    if bbar <= 0.0 {
        return 0;
    }
    let (lb, lr) = (bbar.ln(), rho.ln());
    loop {
        lnfact += ((g + 1) as f64).ln();
        if bbar + (g + 1) as f64 * lb - lnfact <= lr {
            return g;
        }
        g += 1;
    }
}

/// `C(d+g, g)`, saturating.
pub fn binomial_rank(d: usize, g: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=g as u128 {
        match c.checked_mul(d as u128 + i) {
            Some(v) => c = v / i,
            None => return u128::MAX,
        }
    }
    c
}

/// Degree and rank needed by the polynomial method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub degree: usize,
    pub rank: u128,
    pub bbar: f64,
    pub tail: f64,
}

impl RankPlan {
    /// The factorization only pays off while `k1 ≤ L²`.
    pub fn is_profitable(&self, seq_len: usize) -> bool {
        self.rank <= (seq_len as u128) * (seq_len as u128)
    }

    pub fn feasible(&self, seq_len: usize) -> bool {
        self.rank <= seq_len as u128
    }
}

/// `B̄ = d·Γ²`, g minimal with the tail bound at most `eps/4`, `k1 = C(d+g, g)`.
pub fn rank_for_accuracy(gamma_bound: f64, d: usize, eps_target: f64) -> Result<RankPlan> {
    if !(eps_target > 0.0) {
        return Err(Error::OutOfRange(format!("eps_target = {eps_target} must be positive")));
    }
    if !(gamma_bound >= 0.0) {
        return Err(Error::OutOfRange(format!("gamma_bound = {gamma_bound} must be nonnegative")));
    }
    let bbar = d as f64 * gamma_bound * gamma_bound;
    let degree = degree_for(bbar, eps_target / 4.0);
    Ok(RankPlan { degree, rank: binomial_rank(d, degree), bbar, tail: tail_bound(bbar, degree) })
}

// ---------------------------------------------------------------------------
// Instrumentation

/// Per-call counters: floating-point operations and the high-water mark of
/// live floats in the buffers the fast paths allocate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meter {
    pub flops: u64,
    pub live_floats: usize,
    pub peak_floats: usize,
}

impl Meter {
    fn flop(&mut self, n: usize) {
        self.flops += n as u64;
    }

    fn alloc(&mut self, n: usize) {
        self.live_floats += n;
        self.peak_floats = self.peak_floats.max(self.live_floats);
    }

    fn free(&mut self, n: usize) {
        self.live_floats -= n;
    }
}

/// Result of a fast path: value plus the degree/rank used, the certified error
/// bound on the value, and the instrumentation counters.
#[derive(Clone, Debug)]
pub struct FastResult {
    pub value: DenseMatrix,
    pub degree: usize,
    pub rank: usize,
    pub err_bound: f64,
    pub meter: Meter,
}

// ---------------------------------------------------------------------------
// Low-rank softmax

/// Largest rank·rows product the fast paths will allocate.
const MAX_FACTOR_FLOATS: usize = 1 << 29;
const DEGREE_RETRIES: usize = 4;

/// Low-rank factors of the softmax plus bookkeeping.
struct SoftmaxFactors {
    lr: LowRankFactors,
    degree: usize,
}

fn row_norm_max(x: &DenseMatrix) -> f64 {
    (0..x.rows()).map(|i| dot(x.row(i), x.row(i)).sqrt()).fold(0.0, f64::max)
}

/// Picks the certified score bound B̄ and the key matrix to expand. Three
/// certified bounds on `|⟨q_j, k_k⟩|` are compared: `d·Γ²`, Cauchy–Schwarz on
/// the raw rows, and Cauchy–Schwarz after centering the keys (a per-row
/// constant shift of the scores, which cancels in the normalization).
fn choose_bound(qt: &DenseMatrix, kt: &DenseMatrix, gamma: f64) -> (f64, Option<DenseMatrix>) {
    let d = qt.cols() as f64;
    let qn = row_norm_max(qt);
    let plain = (d * gamma * gamma).min(qn * row_norm_max(kt));
    let l = kt.rows().max(1) as f64;
    let mut mean = vec![0.0; kt.cols()];
    for k in 0..kt.rows() {
        for (m, &v) in mean.iter_mut().zip(kt.row(k)) {
            *m += v / l;
        }
    }
    let mut centered = kt.clone();
    for k in 0..kt.rows() {
        for (v, &m) in centered.row_mut(k).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cb = qn * row_norm_max(&centered);
    if cb < plain {
        (cb, Some(centered))
    } else {
        (plain, None)
    }
}

fn softmax_factors(
    qt: &DenseMatrix,
    kt: &DenseMatrix,
    rho: f64,
    gamma: f64,
    meter: &mut Meter,
) -> Result<SoftmaxFactors> {
    if qt.cols() != kt.cols() {
        return Err(dim("exp_lowrank", format!("Qt has {} columns, Kt has {}", qt.cols(), kt.cols())));
    }
    let slack = 1.0 + 1e-12;
    if qt.norm(NormKind::Max) > gamma * slack || kt.norm(NormKind::Max) > gamma * slack {
        return Err(Error::OutOfRange(format!(
            "factor entries exceed gamma_bound {gamma}: |Qt|max = {}, |Kt|max = {}",
            qt.norm(NormKind::Max),
            kt.norm(NormKind::Max)
        )));
    }
    let (bbar, centered) = choose_bound(qt, kt, gamma);
    overflow_check(bbar)?;
    let keys = centered.as_ref().unwrap_or(kt);
    let d = qt.cols();
    let l = qt.rows().max(kt.rows());
    let g0 = degree_for(bbar, rho);
    for degree in g0..=g0 + DEGREE_RETRIES {
        let rank = binomial_rank(d, degree);
        if rank.saturating_mul(2 * l as u128) > MAX_FACTOR_FLOATS as u128 {
            return Err(Error::Construction(format!(
                "rank C({d}+{degree}, {degree}) = {rank} is too large for L = {l}"
            )));
        }
        let fm = FeatureMap::new(d, degree);
        let k1 = fm.rank();
        let phi_q = fm.apply(qt);
        meter.alloc(phi_q.rows() * k1);
        let v1 = fm.apply(keys);
        meter.alloc(v1.rows() * k1);
        meter.flop((qt.rows() + keys.rows()) * k1 * 2);
        // D̃ = Φ(Qt) · (V1ᵀ 1)
        let mut colsum = vec![0.0; k1];
        for k in 0..v1.rows() {
            for (s, &v) in colsum.iter_mut().zip(v1.row(k)) {
                *s += v;
            }
        }
        meter.flop(v1.rows() * k1);
        let dt: Vec<f64> = (0..phi_q.rows()).map(|j| dot(phi_q.row(j), &colsum)).collect();
        meter.flop(phi_q.rows() * k1 * 2);
        if let Some((row, &sum)) = dt.iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
            meter.free((phi_q.rows() + v1.rows()) * k1);
            if degree == g0 + DEGREE_RETRIES {
                return Err(Error::Degenerate { degree, row, sum });
            }
            continue;
        }
        let inv: Vec<f64> = dt.iter().map(|s| 1.0 / s).collect();
        let u1 = phi_q.scale_rows(&inv)?;
        meter.flop(phi_q.rows() * k1);
        let r = tail_bound(bbar, degree);
        let kappa = if r < 1.0 { 2.0 * r / (1.0 - r) } else { f64::INFINITY };
        let lr = LowRankFactors::new(u1, v1, kappa.min(1.0))?;
        return Ok(SoftmaxFactors { lr, degree });
    }
    unreachable!("retry loop returns on its last iteration")
}

/// Factors `U1 V1ᵀ ≈ f = rowsoftmax(Qt Ktᵀ)` with `‖U1V1ᵀ − f‖_max ≤ eps_target`.
pub fn exp_lowrank(
    qt: &DenseMatrix,
    kt: &DenseMatrix,
    eps_target: f64,
    gamma_bound: f64,
) -> Result<LowRankFactors> {
    if !(eps_target > 0.0) {
        return Err(Error::OutOfRange(format!("eps_target = {eps_target} must be positive")));
    }
    let mut meter = Meter::default();
    Ok(softmax_factors(qt, kt, eps_target / 4.0, gamma_bound, &mut meter)?.lr)
}

fn instance_gamma(qt: &DenseMatrix, kt: &DenseMatrix) -> f64 {
    qt.norm(NormKind::Max).max(kt.norm(NormKind::Max))
}

/// `W_OV A3 f̃ᵀ` from low-rank factors, evaluated right to left; no L×L buffer.
pub fn inference_fast(inst: &AttentionInstance, eps_target: f64) -> Result<FastResult> {
    inst.validate()?;
    if !(eps_target > 0.0) {
        return Err(Error::OutOfRange(format!("eps_target = {eps_target} must be positive")));
    }
    let mut meter = Meter::default();
    let (qt, kt) = inst.feature_pair()?;
    let h = inst.values()?;
    let (l, d) = (h.rows(), h.cols());
    meter.alloc(2 * qt.rows() * qt.cols() + l * d);
    // |out − out̃| ≤ ‖f − f̃‖_max-weighted row sums · ‖h‖_max ≤ κ·‖h‖_max
    let hmax = h.norm(NormKind::Max);
    let eps_f = if hmax > 0.0 { eps_target / hmax } else { eps_target };
    let sf = softmax_factors(&qt, &kt, eps_f / 4.0, instance_gamma(&qt, &kt), &mut meter)?;
    let k1 = sf.lr.rank;
    // out = (U1 (V1ᵀ h))ᵀ
    let m = sf.lr.v.matmul_tn(&h)?;
    meter.alloc(k1 * d);
    meter.flop(2 * l * k1 * d);
    let fh = sf.lr.u.matmul(&m)?;
    meter.alloc(l * d);
    meter.flop(2 * l * k1 * d);
    let value = fh.transpose().ensure_finite("inference_fast")?;
    Ok(FastResult {
        value,
        degree: sf.degree,
        rank: k1,
        err_bound: sf.lr.err_bound * hmax,
        meter,
    })
}

/// Inputs of the low-rank gradient `A1 (p̃1 − p̃2) A2ᵀ`.
pub struct LowRankGradInput<'a> {
    pub qt: &'a DenseMatrix,
    pub kt: &'a DenseMatrix,
    pub a1: &'a DenseMatrix,
    pub a2: &'a DenseMatrix,
    /// Value rows `h` (L×d).
    pub h: &'a DenseMatrix,
    pub upstream: Upstream<'a>,
}

/// Where the residual `c` comes from.
pub enum Upstream<'a> {
    /// `c = f h − Yᵀ`, recomputed from the approximate `f̃`.
    Target(&'a DenseMatrix),
    /// `c` supplied exactly by the caller (backpropagation through a network).
    Exact(&'a DenseMatrix),
}

/// Propagates a softmax relative error κ to a max-norm bound on the gradient.
fn grad_error(kappa: f64, hmax: f64, cmax: f64, d: usize, exact_c: bool, scale: f64) -> f64 {
    let d = d as f64;
    let qmax = d * cmax * hmax;
    let rmax = qmax;
    let dq = if exact_c { 0.0 } else { d * kappa * hmax * hmax };
    let tau = kappa * (qmax + dq) + dq;
    let pi = kappa * (qmax + rmax + dq + tau) + dq + tau;
    pi * scale
}

/// Low-rank gradient with a certified max-norm error of at most `eps_target`.
pub fn grad_lowrank(input: &LowRankGradInput<'_>, eps_target: f64) -> Result<FastResult> {
    if !(eps_target > 0.0) {
        return Err(Error::OutOfRange(format!("eps_target = {eps_target} must be positive")));
    }
    let LowRankGradInput { qt, kt, a1, a2, h, .. } = *input;
    let (l, dv) = h.shape();
    let (da, la) = a1.shape();
    if la != l || a2.cols() != l || qt.rows() != l || kt.rows() != l {
        return Err(dim("grad_lowrank", format!("sequence lengths disagree (L = {l})")));
    }
    let mut meter = Meter::default();
    meter.alloc(2 * qt.rows() * qt.cols() + 2 * l * dv);

    let hmax = h.norm(NormKind::Max);
    let (cmax, exact_c) = match input.upstream {
        Upstream::Target(y) => (hmax + y.norm(NormKind::Max), false),
        Upstream::Exact(c) => (c.norm(NormKind::Max), true),
    };
    let a1_rows = (0..da).map(|a| a1.row(a).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let scale = a1_rows * a2.norm(NormKind::Max);
    // Largest κ whose propagated bound stays within eps_target.
    let mut kappa = eps_target;
    let first = grad_error(1.0, hmax, cmax, dv, exact_c, scale);
    if first > 0.0 {
        kappa = (eps_target / first).min(1.0);
        while grad_error(kappa, hmax, cmax, dv, exact_c, scale) > eps_target {
            kappa *= 0.5;
        }
    }
    let rho = kappa / (2.0 + kappa);
    let sf = softmax_factors(qt, kt, rho, instance_gamma(qt, kt), &mut meter)?;
    let (u1, v1) = (&sf.lr.u, &sf.lr.v);
    let k1 = sf.lr.rank;

    // U1 (V1ᵀ h) = f̃ h
    let m = v1.matmul_tn(h)?;
    meter.alloc(k1 * dv);
    meter.flop(2 * l * k1 * dv);
    let fh = u1.matmul(&m)?;
    meter.alloc(l * dv);
    meter.flop(2 * l * k1 * dv);
    let c = match input.upstream {
        Upstream::Target(y) => fh.sub(&y.transpose())?,
        Upstream::Exact(c) => {
            if c.shape() != (l, dv) {
                return Err(dim("grad_lowrank", format!("upstream is {:?}, expected {l}x{dv}", c.shape())));
            }
            c.clone()
        }
    };
    meter.alloc(l * dv);

    // p̃1 = (U1V1ᵀ) ⊙ (c hᵀ) = row_kron(U1, c) · row_kron(V1, h)ᵀ, streamed one
    // column of c (and h) at a time.
    let mut g = DenseMatrix::zeros(da, a2.rows());
    for i in 0..dv {
        let ci = DenseMatrix::column(&c.col(i));
        let hi = DenseMatrix::column(&h.col(i));
        let u3 = row_kron(u1, &ci)?;
        let v3 = row_kron(v1, &hi)?;
        meter.alloc(2 * l * k1);
        meter.flop(2 * l * k1);
        let left = a1.matmul(&u3)?;
        let right = a2.matmul(&v3)?;
        meter.alloc((da + a2.rows()) * k1);
        meter.flop(2 * (da + a2.rows()) * l * k1);
        g.axpy(1.0, &left.matmul_nt(&right)?)?;
        meter.flop(2 * da * a2.rows() * k1);
        meter.free(2 * l * k1 + (da + a2.rows()) * k1);
    }

    // p̃2 = diag(r̃) U1 V1ᵀ with r̃_j = U1[j]·(V1ᵀh)·c[j]ᵀ = ⟨(f̃h)_j, c_j⟩.
    let r: Vec<f64> = (0..l).map(|j| dot(fh.row(j), c.row(j))).collect();
    meter.flop(2 * l * dv);
    let u4 = u1.scale_rows(&r)?;
    meter.alloc(l * k1);
    meter.flop(l * k1);
    let left = a1.matmul(&u4)?;
    let right = a2.matmul(v1)?;
    meter.alloc((da + a2.rows()) * k1);
    meter.flop(2 * (da + a2.rows()) * l * k1);
    g.axpy(-1.0, &left.matmul_nt(&right)?)?;
    meter.flop(2 * da * a2.rows() * k1);

    let err_bound = grad_error(kappa, hmax, cmax, dv, exact_c, scale);
    Ok(FastResult {
        value: g.ensure_finite("grad_fast")?,
        degree: sf.degree,
        rank: k1,
        err_bound,
        meter,
    })
}

/// Low-rank approximation of [`grad_exact`] with certified error ≤ `eps_target`.
pub fn grad_fast(inst: &AttentionInstance, eps_target: f64) -> Result<FastResult> {
    inst.validate()?;
    let (qt, kt) = inst.feature_pair()?;
    let h = inst.values()?;
    grad_lowrank(
        &LowRankGradInput {
            qt: &qt,
            kt: &kt,
            a1: &inst.a1,
            a2: &inst.a2,
            h: &h,
            upstream: Upstream::Target(&inst.y),
        },
        eps_target,
    )
}
