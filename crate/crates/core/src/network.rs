//! The DiT score network: patch reshaping, softmax transformer blocks with
//! time modulation, the orthonormal encoder, manual backpropagation and the
//! parameter-norm report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{grad_lowrank, LowRankGradInput, Upstream};
use crate::error::{dim, Error, Result};
use crate::linalg::{dot, DenseMatrix, NormKind};
use crate::rng;
use crate::score::ScoreModel;
use crate::subspace::DiffusionSchedule;

/// `i×i` image view of a latent vector cut into `p×p` patches:
/// `d = p²`, `L = (i/p)²`, `d0 = d·L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ReshapeRaw")]
pub struct ReshapeSpec {
    pub image_side: usize,
    pub patch_side: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    pub latent_dim: usize,
}

#[derive(Deserialize)]
struct ReshapeRaw {
    image_side: usize,
    patch_side: usize,
}

impl TryFrom<ReshapeRaw> for ReshapeSpec {
    type Error = Error;
    fn try_from(r: ReshapeRaw) -> Result<Self> {
        ReshapeSpec::new(r.image_side, r.patch_side)
    }
}

impl ReshapeSpec {
    pub fn new(image_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side < 2 || image_side == 0 || image_side % patch_side != 0 {
            return Err(Error::Config(format!(
                "patch side {patch_side} must be >= 2 and divide image side {image_side}"
            )));
        }
        let n = image_side / patch_side;
        Ok(Self {
            image_side,
            patch_side,
            token_dim: patch_side * patch_side,
            seq_len: n * n,
            latent_dim: image_side * image_side,
        })
    }

    /// Token matrix (d×L): column k is patch k (patches scanned row-major),
    /// flattened row-major.
    pub fn reshape(&self, x: &[f64]) -> Result<DenseMatrix> {
        if x.len() != self.latent_dim {
            return Err(dim("reshape", format!("vector of {} for d0 = {}", x.len(), self.latent_dim)));
        }
        let mut out = DenseMatrix::zeros(self.token_dim, self.seq_len);
        self.for_each_index(|pixel, row, col| out.set(row, col, x[pixel]));
        Ok(out)
    }

    pub fn unreshape(&self, tokens: &DenseMatrix) -> Result<Vec<f64>> {
        if tokens.shape() != (self.token_dim, self.seq_len) {
            return Err(dim(
                "unreshape",
                format!("{:?}, expected {}x{}", tokens.shape(), self.token_dim, self.seq_len),
            ));
        }
        let mut x = vec![0.0; self.latent_dim];
        self.for_each_index(|pixel, row, col| x[pixel] = tokens.get(row, col));
        Ok(x)
    }

    fn for_each_index(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (i, p) = (self.image_side, self.patch_side);
        let n = i / p;
        for pr in 0..n {
            for pc in 0..n {
                let col = pr * n + pc;
                for a in 0..p {
                    for b in 0..p {
                        f((pr * p + a) * i + pc * p + b, a * p + b, col);
                    }
                }
            }
        }
    }
}

/// Time features `(t, e^{-t})`.
pub fn time_features(t: f64) -> [f64; 2] {
    [t, (-t).exp()]
}

/// One attention head: `W_K, W_Q, W_V ∈ R^{m×d}`, `W_O ∈ R^{d×m}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w_k: DenseMatrix,
    pub w_q: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
}

impl Head {
    /// `W_OV = W_O W_V`.
    pub fn w_ov(&self) -> DenseMatrix {
        self.w_o.matmul(&self.w_v).expect("validated shapes")
    }

    /// `W_KQ = W_Kᵀ W_Q`.
    pub fn w_kq(&self) -> DenseMatrix {
        self.w_k.matmul_tn(&self.w_q).expect("validated shapes")
    }
}

/// Multi-head softmax attention followed by a ReLU feed-forward layer, both
/// with skip connections, applied to `(1 + s(t)) ⊙ X + b(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub heads: Vec<Head>,
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    /// `s(t) = time_scale · φ(t)` (d×2).
    pub time_scale: DenseMatrix,
    /// `b(t) = time_shift · φ(t)` (d×2).
    pub time_shift: DenseMatrix,
}

impl TransformerBlock {
    pub fn zeros(d: usize, heads: usize, m: usize, hidden: usize) -> Self {
        let head = Head {
            w_k: DenseMatrix::zeros(m, d),
            w_q: DenseMatrix::zeros(m, d),
            w_v: DenseMatrix::zeros(m, d),
            w_o: DenseMatrix::zeros(d, m),
        };
        Self {
            heads: vec![head; heads],
            w1: DenseMatrix::zeros(hidden, d),
            b1: DenseMatrix::zeros(hidden, 1),
            w2: DenseMatrix::zeros(d, hidden),
            b2: DenseMatrix::zeros(d, 1),
            time_scale: DenseMatrix::zeros(d, 2),
            time_shift: DenseMatrix::zeros(d, 2),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.token_dim();
        let l = self.w1.rows();
        let shape_ok = self.w1.cols() == d
            && self.b1.shape() == (l, 1)
            && self.w2.shape() == (d, l)
            && self.b2.shape() == (d, 1)
            && self.time_scale.shape() == (d, 2)
            && self.time_shift.shape() == (d, 2)
            && self.heads.iter().all(|h| {
                let m = h.w_k.rows();
                h.w_k.shape() == (m, d)
                    && h.w_q.shape() == (m, d)
                    && h.w_v.shape() == (m, d)
                    && h.w_o.shape() == (d, m)
            });
        if !shape_ok {
            return Err(dim("TransformerBlock", "weight shapes do not conform"));
        }
        if self.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("TransformerBlock weights".into()));
        }
        Ok(())
    }

    /// Weights in a fixed order: heads, feed-forward, time modulation.
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut v = Vec::new();
        for h in &self.heads {
            v.extend([&h.w_k, &h.w_q, &h.w_v, &h.w_o]);
        }
        v.extend([&self.w1, &self.b1, &self.w2, &self.b2, &self.time_scale, &self.time_shift]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut v = Vec::new();
        for h in &mut self.heads {
            v.extend([&mut h.w_k, &mut h.w_q, &mut h.w_v, &mut h.w_o]);
        }
        v.extend([
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.time_scale,
            &mut self.time_shift,
        ]);
        v
    }
}

struct HeadCache {
    kp: DenseMatrix,
    qp: DenseMatrix,
    v: DenseMatrix,
    /// Column-softmax weights, `P[k, j]` = weight of token k for output j.
    p: DenseMatrix,
}

struct BlockCache {
    x: DenseMatrix,
    xm: DenseMatrix,
    modulation: Vec<f64>,
    heads: Vec<HeadCache>,
    a: DenseMatrix,
    z: DenseMatrix,
    hid: DenseMatrix,
}

/// Softmax over each column (the key axis).
fn column_softmax(s: &DenseMatrix) -> Result<DenseMatrix> {
    let mut t = s.transpose();
    for j in 0..t.rows() {
        let row = t.row_mut(j);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top > crate::attention::EXP_LIMIT {
            return Err(Error::Overflow { bound: top });
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(t.transpose())
}

fn add_col_broadcast(x: &mut DenseMatrix, b: &DenseMatrix) {
    for i in 0..x.rows() {
        let bi = b.get(i, 0);
        x.row_mut(i).iter_mut().for_each(|v| *v += bi);
    }
}

fn block_forward_cached(x: &DenseMatrix, block: &TransformerBlock, phi: [f64; 2]) -> Result<BlockCache> {
    let d = block.token_dim();
    if x.rows() != d {
        return Err(dim("block_forward", format!("input has {} rows, block expects {d}", x.rows())));
    }
    let s = block.time_scale.mat_vec(&phi)?;
    let b = block.time_shift.mat_vec(&phi)?;
    let modulation: Vec<f64> = s.iter().map(|v| 1.0 + v).collect();
    let mut xm = x.scale_rows(&modulation)?;
    add_col_broadcast(&mut xm, &DenseMatrix::column(&b));

    let mut a = xm.clone();
    let mut heads = Vec::with_capacity(block.heads.len());
    for h in &block.heads {
        let kp = h.w_k.matmul(&xm)?;
        let qp = h.w_q.matmul(&xm)?;
        let v = h.w_v.matmul(&xm)?;
        let p = column_softmax(&kp.matmul_tn(&qp)?)?;
        a.axpy(1.0, &h.w_o.matmul(&v.matmul(&p)?)?)?;
        heads.push(HeadCache { kp, qp, v, p });
    }
    let mut z = block.w1.matmul(&a)?;
    add_col_broadcast(&mut z, &block.b1);
    let hid = z.map(|v| v.max(0.0));
    Ok(BlockCache { x: x.clone(), xm, modulation, heads, a, z, hid })
}

fn block_output(cache: &BlockCache, block: &TransformerBlock) -> Result<DenseMatrix> {
    let mut out = cache.a.add(&block.w2.matmul(&cache.hid)?)?;
    add_col_broadcast(&mut out, &block.b2);
    Ok(out)
}

/// One transformer block applied to tokens `X` (d×L).
pub fn block_forward(x: &DenseMatrix, block: &TransformerBlock, time_features: [f64; 2]) -> Result<DenseMatrix> {
    let cache = block_forward_cached(x, block, time_features)?;
    block_output(&cache, block)?.ensure_finite("block_forward")
}

/// How attention-score weight gradients are computed during backprop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreGrad {
    Exact,
    /// Low-rank route with the given certified max-norm tolerance.
    LowRank(f64),
}

/// Backpropagates `d_out` through one block, accumulating parameter gradients
/// into `grad` and returning the gradient with respect to the block input.
fn block_backward(
    cache: &BlockCache,
    block: &TransformerBlock,
    phi: [f64; 2],
    d_out: &DenseMatrix,
    grad: &mut TransformerBlock,
    mode: ScoreGrad,
) -> Result<DenseMatrix> {
    // Feed-forward with skip.
    grad.w2.axpy(1.0, &d_out.matmul_nt(&cache.hid)?)?;
    grad.b2.axpy(1.0, &DenseMatrix::column(&d_out.row_sums()))?;
    let dh = block.w2.matmul_tn(d_out)?;
    let mut dz = dh;
    for (g, &z) in dz.as_mut_slice().iter_mut().zip(cache.z.as_slice()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    grad.w1.axpy(1.0, &dz.matmul_nt(&cache.a)?)?;
    grad.b1.axpy(1.0, &DenseMatrix::column(&dz.row_sums()))?;
    let mut da = d_out.clone();
    da.axpy(1.0, &block.w1.matmul_tn(&dz)?)?;

    // Attention with skip.
    let xm = &cache.xm;
    let mut dxm = da.clone();
    for ((h, hc), hg) in block.heads.iter().zip(&cache.heads).zip(grad.heads.iter_mut()) {
        let vp = hc.v.matmul(&hc.p)?;
        hg.w_o.axpy(1.0, &da.matmul_nt(&vp)?)?;
        let dvp = h.w_o.matmul_tn(&da)?;
        let dv = dvp.matmul_nt(&hc.p)?;
        let dp = hc.v.matmul_tn(&dvp)?;
        // Column softmax backward: dS_kj = P_kj (dP_kj − Σ_k' P_k'j dP_k'j).
        let (l, _) = hc.p.shape();
        let mut ds = DenseMatrix::zeros(l, l);
        for j in 0..l {
            let mut acc = 0.0;
            for k in 0..l {
                acc += hc.p.get(k, j) * dp.get(k, j);
            }
            for k in 0..l {
                ds.set(k, j, hc.p.get(k, j) * (dp.get(k, j) - acc));
            }
        }
        let dkp = hc.qp.matmul_nt(&ds)?;
        let dqp = hc.kp.matmul(&ds)?;
        hg.w_v.axpy(1.0, &dv.matmul_nt(xm)?)?;
        match mode {
            ScoreGrad::Exact => {
                hg.w_k.axpy(1.0, &dkp.matmul_nt(xm)?)?;
                hg.w_q.axpy(1.0, &dqp.matmul_nt(xm)?)?;
            }
            ScoreGrad::LowRank(eps) => {
                // Row-softmax form: f = Pᵀ = rowsoftmax(Qt Ktᵀ) with Qt = (W_Q Xm)ᵀ,
                // Kt = (W_K Xm)ᵀ, values h = Xmᵀ W_OVᵀ and residual c = dAᵀ.
                let qt = hc.qp.transpose();
                let kt = hc.kp.transpose();
                let vals = xm.matmul_tn(&h.w_ov().transpose())?;
                let c = da.transpose();
                let g = grad_lowrank(
                    &LowRankGradInput { qt: &qt, kt: &kt, a1: xm, a2: xm, h: &vals, upstream: Upstream::Exact(&c) },
                    eps,
                )?
                .value;
                hg.w_k.axpy(1.0, &h.w_q.matmul(&g)?)?;
                hg.w_q.axpy(1.0, &h.w_k.matmul_nt(&g)?)?;
            }
        }
        dxm.axpy(1.0, &h.w_v.matmul_tn(&dv)?)?;
        dxm.axpy(1.0, &h.w_k.matmul_tn(&dkp)?)?;
        dxm.axpy(1.0, &h.w_q.matmul_tn(&dqp)?)?;
    }

    // Time modulation: Xm = diag(1 + s) X + b 1ᵀ.
    let ds_vec: Vec<f64> = (0..xm.rows()).map(|i| dot(dxm.row(i), cache.x.row(i))).collect();
    let db_vec = dxm.row_sums();
    for i in 0..xm.rows() {
        for (k, &f) in phi.iter().enumerate() {
            grad.time_scale[(i, k)] += ds_vec[i] * f;
            grad.time_shift[(i, k)] += db_vec[i] * f;
        }
    }
    dxm.scale_rows(&cache.modulation)
}

/// Architecture and initialization settings of a [`ScoreNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub ambient_dim: usize,
    pub image_side: usize,
    pub patch_side: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub head_dim: Option<usize>,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_pos_scale")]
    pub pos_enc_scale: f64,
    #[serde(default)]
    pub train_pos_enc: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn one() -> usize {
    1
}
fn default_pos_scale() -> f64 {
    0.1
}
fn default_init_scale() -> f64 {
    0.1
}

/// `s_W(x̄, t) = (W_B · R⁻¹(f_T(R(W_Bᵀ x̄) + E)) − x̄) / σ(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetwork {
    pub encoder: DenseMatrix,
    pub reshape: ReshapeSpec,
    pub pos_enc: DenseMatrix,
    pub blocks: Vec<TransformerBlock>,
    #[serde(default)]
    pub train_pos_enc: bool,
}

/// Positional encoding whose every row is `scale·(0, 1, …, L−1)`.
pub fn ramp_positional_encoding(d: usize, l: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(d, l, |_, k| scale * k as f64)
}

impl ScoreNetwork {
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let reshape = ReshapeSpec::new(cfg.image_side, cfg.patch_side)?;
        if reshape.latent_dim > cfg.ambient_dim {
            return Err(Error::Config(format!(
                "latent dim {} exceeds ambient dim {}",
                reshape.latent_dim, cfg.ambient_dim
            )));
        }
        let d = reshape.token_dim;
        let m = cfg.head_dim.unwrap_or(d);
        let hidden = cfg.hidden.unwrap_or(2 * d);
        let mut s = rng::stream(seed, 0x6e65_7477);
        let encoder = rng::gaussian_matrix(&mut s, cfg.ambient_dim, reshape.latent_dim).orthonormalize_columns()?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut b = TransformerBlock::zeros(d, cfg.heads, m, hidden);
            for h in &mut b.heads {
                h.w_k = rng::gaussian_matrix(&mut s, m, d).scale(cfg.init_scale);
                h.w_q = rng::gaussian_matrix(&mut s, m, d).scale(cfg.init_scale);
                h.w_v = rng::gaussian_matrix(&mut s, m, d).scale(cfg.init_scale);
                h.w_o = rng::gaussian_matrix(&mut s, d, m).scale(cfg.init_scale);
            }
            b.w1 = rng::gaussian_matrix(&mut s, hidden, d).scale(cfg.init_scale);
            b.w2 = rng::gaussian_matrix(&mut s, d, hidden).scale(cfg.init_scale);
            blocks.push(b);
        }
        let net = Self {
            encoder,
            reshape,
            pos_enc: ramp_positional_encoding(d, reshape.seq_len, cfg.pos_enc_scale),
            blocks,
            train_pos_enc: cfg.train_pos_enc,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn ambient_dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reshape;
        if self.encoder.cols() != r.latent_dim {
            return Err(dim("ScoreNetwork", format!("encoder has {} columns, d0 = {}", self.encoder.cols(), r.latent_dim)));
        }
        if self.pos_enc.shape() != (r.token_dim, r.seq_len) {
            return Err(dim("ScoreNetwork", format!("positional encoding is {:?}", self.pos_enc.shape())));
        }
        for b in &self.blocks {
            b.validate()?;
            if b.token_dim() != r.token_dim {
                return Err(dim("ScoreNetwork", "block token dim differs from reshape"));
            }
        }
        if !self.encoder.is_finite() || !self.pos_enc.is_finite() {
            return Err(Error::NonFinite("ScoreNetwork encoder".into()));
        }
        let dev = self
            .encoder
            .matmul_tn(&self.encoder)?
            .sub(&DenseMatrix::identity(r.latent_dim))?
            .norm(NormKind::Max);
        if dev > 1e-8 {
            return Err(Error::OutOfRange(format!("encoder columns are not orthonormal (|W_BᵀW_B − I| = {dev:e})")));
        }
        Ok(())
    }

    /// Transformer stack `f_T` on tokens.
    pub fn transformer(&self, x: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
        let phi = time_features(t);
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = block_forward(&cur, b, phi)?;
        }
        Ok(cur)
    }

    /// Latent map `f(h, t) = R⁻¹(f_T(R(h) + E))`.
    pub fn latent_map(&self, h: &[f64], t: f64) -> Result<Vec<f64>> {
        let x0 = self.reshape.reshape(h)?.add(&self.pos_enc)?;
        self.reshape.unreshape(&self.transformer(&x0, t)?)
    }

    /// Mean over the batch of `‖s_W(x_t, t) − (β x0 − x_t)/σ‖²` and its
    /// gradient with respect to every trainable tensor.
    pub fn loss_and_grad(&self, batch: &[DsmSample], mode: ScoreGrad) -> Result<(f64, ScoreNetwork)> {
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let nb = batch.len().max(1) as f64;
        for smp in batch {
            let (t, x0, xt) = (smp.t, &smp.x0, &smp.xt);
            let (beta, sigma) = (DiffusionSchedule::beta(t), DiffusionSchedule::sigma(t));
            let phi = time_features(t);
            let h = self.encoder.mat_t_vec(xt)?;
            let mut cur = self.reshape.reshape(&h)?.add(&self.pos_enc)?;
            let mut caches = Vec::with_capacity(self.blocks.len());
            for b in &self.blocks {
                let c = block_forward_cached(&cur, b, phi)?;
                cur = block_output(&c, b)?;
                caches.push(c);
            }
            let u = self.reshape.unreshape(&cur)?;
            let wu = self.encoder.mat_vec(&u)?;
            // residual e = s − target = (W_B u − β x0)/σ
            let e: Vec<f64> = wu.iter().zip(x0).map(|(a, b)| (a - beta * b) / sigma).collect();
            let l = dot(&e, &e);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss at t = {t}")));
            }
            total += l / nb;
            let ds: Vec<f64> = e.iter().map(|v| 2.0 * v / (nb * sigma)).collect();
            // s = W_B u / σ + const
            add_outer(&mut grad.encoder, &ds, &u);
            let du = self.encoder.mat_t_vec(&ds)?;
            let mut dcur = self.reshape.reshape(&du)?;
            for ((b, c), gb) in self.blocks.iter().zip(&caches).zip(grad.blocks.iter_mut()).rev() {
                dcur = block_backward(c, b, phi, &dcur, gb, mode)?;
            }
            if self.train_pos_enc {
                grad.pos_enc.axpy(1.0, &dcur)?;
            }
            let dh = self.reshape.unreshape(&dcur)?;
            add_outer(&mut grad.encoder, xt, &dh);
        }
        Ok((total, grad))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        z.encoder = DenseMatrix::zeros(self.encoder.rows(), self.encoder.cols());
        z.pos_enc = DenseMatrix::zeros(self.pos_enc.rows(), self.pos_enc.cols());
        z
    }

    /// Trainable tensors in a fixed order (encoder, positional encoding when
    /// trainable, then block weights).
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut v = vec![&self.encoder];
        if self.train_pos_enc {
            v.push(&self.pos_enc);
        }
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut v = vec![&mut self.encoder];
        if self.train_pos_enc {
            v.push(&mut self.pos_enc);
        }
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v
    }

    /// `self += s·other`, tensor by tensor.
    pub fn axpy(&mut self, s: f64, other: &ScoreNetwork) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    /// Restores orthonormal encoder columns (QR retraction).
    pub fn retract_encoder(&mut self) -> Result<()> {
        self.encoder = self.encoder.orthonormalize_columns()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let net: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        net.validate()?;
        Ok(net)
    }
}

fn add_outer(m: &mut DenseMatrix, a: &[f64], b: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        for (v, &bj) in m.row_mut(i).iter_mut().zip(b) {
            *v += ai * bj;
        }
    }
}

/// One denoising-score-matching example `(x0, t, x_t)`.
#[derive(Clone, Debug)]
pub struct DsmSample {
    pub x0: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
}

/// Generic score head `(W_B f(W_Bᵀx, t) − x)/σ(t)` with a pluggable latent map.
pub fn score_from_latent_map(
    encoder: &DenseMatrix,
    x_bar: &[f64],
    t: f64,
    f: impl FnOnce(&[f64], f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::OutOfRange(format!("t = {t} must be positive")));
    }
    let sigma = DiffusionSchedule::sigma(t);
    let h = encoder.mat_t_vec(x_bar)?;
    let out = encoder.mat_vec(&f(&h, t)?)?;
    Ok(out.iter().zip(x_bar).map(|(o, x)| (o - x) / sigma).collect())
}

/// `s_W(x̄, t)` for `t ∈ (0, T]`.
pub fn score_forward(net: &ScoreNetwork, x_bar: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if t > schedule.horizon {
        return Err(Error::OutOfRange(format!("t = {t} exceeds horizon {}", schedule.horizon)));
    }
    if x_bar.len() != net.ambient_dim() {
        return Err(dim("score_forward", format!("x has length {}, D = {}", x_bar.len(), net.ambient_dim())));
    }
    score_from_latent_map(&net.encoder, x_bar, t, |h, t| net.latent_map(h, t))
}

impl ScoreModel for ScoreNetwork {
    fn dim(&self) -> usize {
        self.ambient_dim()
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        score_from_latent_map(&self.encoder, x, t, |h, t| self.latent_map(h, t))
    }
}

/// Exact parameter norms of one block (maximized over heads).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub c_ov_2inf: f64,
    pub c_ov: f64,
    pub c_kq_2inf: f64,
    pub c_kq: f64,
    pub c_f_2inf: f64,
    pub c_f: f64,
    pub c_e: f64,
}

/// Exact per-block norms plus sampled (labelled) estimates of the output bound
/// and Lipschitz constant of `f_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBudget {
    pub blocks: Vec<BlockNorms>,
    pub c_t_est: f64,
    pub l_t_est: f64,
    pub estimate_samples: usize,
}

pub const BUDGET_SAMPLES: usize = 1024;
const BUDGET_RADIUS: f64 = 10.0;

pub fn block_norms(block: &TransformerBlock, pos_enc: &DenseMatrix) -> BlockNorms {
    let mut n = BlockNorms { c_e: pos_enc.transpose().norm(NormKind::TwoInf), ..Default::default() };
    for h in &block.heads {
        let ovt = h.w_ov().transpose();
        let kq = h.w_kq();
        n.c_ov_2inf = n.c_ov_2inf.max(ovt.norm(NormKind::TwoInf));
        n.c_ov = n.c_ov.max(ovt.norm(NormKind::Op2));
        n.c_kq_2inf = n.c_kq_2inf.max(kq.norm(NormKind::TwoInf));
        n.c_kq = n.c_kq.max(kq.norm(NormKind::Op2));
    }
    for w in [&block.w1, &block.w2] {
        n.c_f_2inf = n.c_f_2inf.max(w.norm(NormKind::TwoInf));
        n.c_f = n.c_f.max(w.norm(NormKind::Op2));
    }
    n
}

/// Exact norms, and estimates of `sup ‖f_T(X)‖` and its Lipschitz constant over
/// 1024 seeded inputs uniform in the ball `‖X‖_F ≤ 10` with `t` uniform on (0, 1].
pub fn norm_budget(net: &ScoreNetwork) -> Result<NormBudget> {
    let blocks = net.blocks.iter().map(|b| block_norms(b, &net.pos_enc)).collect();
    let (d, l) = (net.reshape.token_dim, net.reshape.seq_len);
    let n = d * l;
    let mut s = rng::stream(0x6275_6467, 0);
    let (mut c_t, mut l_t) = (0.0f64, 0.0f64);
    let delta = 1e-5;
    for _ in 0..BUDGET_SAMPLES {
        let dir = rng::unit_vec(&mut s, n);
        let u: f64 = rand::Rng::random(&mut s);
        let r = BUDGET_RADIUS * u.powf(1.0 / n as f64);
        let t = 1.0 - rand::Rng::random::<f64>(&mut s);
        let x = DenseMatrix::new(d, l, dir.iter().map(|v| v * r).collect())?;
        let fx = net.transformer(&x, t)?;
        c_t = c_t.max(fx.norm(NormKind::Frobenius));
        let v = DenseMatrix::new(d, l, rng::unit_vec(&mut s, n))?;
        let mut xp = x.clone();
        xp.axpy(delta, &v)?;
        let diff = net.transformer(&xp, t)?.sub(&fx)?;
        l_t = l_t.max(diff.norm(NormKind::Frobenius) / delta);
    }
    Ok(NormBudget { blocks, c_t_est: c_t, l_t_est: l_t, estimate_samples: BUDGET_SAMPLES })
}
