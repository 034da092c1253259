//! Dense row-major matrices, vectorization, Kronecker products and norms.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

/// Row-major real matrix. Entries are finite whenever a constructor accepted them.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// Matrix norms used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Largest absolute entry.
    Max,
    Frobenius,
    /// Largest column 2-norm.
    TwoInf,
    /// Largest singular value.
    Op2,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim(
                "DenseMatrix::new",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim("DenseMatrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Column vector (n×1).
    pub fn column(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn diag(v: &[f64]) -> Self {
        let mut m = Self::zeros(v.len(), v.len());
        for (i, &x) in v.iter().enumerate() {
            m.data[i * v.len() + i] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for (i, &x) in v.iter().enumerate() {
            self.set(i, j, x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Checks the finiteness invariant after arithmetic that may overflow.
    pub fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn transpose(&self) -> Self {
        // tiled so both sides stay in cache for wide matrices
        const TILE: usize = 32;
        let (r, c) = (self.rows, self.cols);
        let mut t = Self::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    let src = &self.data[i * c..(i + 1) * c];
                    for (j, &v) in (j0..).zip(&src[j0..(j0 + TILE).min(c)]) {
                        t.data[j * r + i] = v;
                    }
                }
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, p, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for k in 0..p {
                let a = self.data[i * p + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(dim(
                "matmul_nt",
                format!("{}x{} times ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(dim(
                "matmul_tn",
                format!("({}x{})ᵀ times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(dim("mat_vec", format!("{} columns, vector of {}", self.cols, v.len())));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn mat_t_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(dim("mat_t_vec", format!("{} rows, vector of {}", self.rows, v.len())));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(dim(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim("axpy", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Rows scaled by `s[i]`, i.e. `diag(s) · self`.
    pub fn scale_rows(&self, s: &[f64]) -> Result<Self> {
        if s.len() != self.rows {
            return Err(dim("scale_rows", format!("{} rows, {} scales", self.rows, s.len())));
        }
        let mut out = self.clone();
        for (i, &si) in s.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= si);
        }
        Ok(out)
    }

    /// Columns scaled by `s[j]`, i.e. `self · diag(s)`.
    pub fn scale_cols(&self, s: &[f64]) -> Result<Self> {
        if s.len() != self.cols {
            return Err(dim("scale_cols", format!("{} cols, {} scales", self.cols, s.len())));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (x, &sj) in out.row_mut(i).iter_mut().zip(s) {
                *x *= sj;
            }
        }
        Ok(out)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn vectorize(&self) -> Vec<f64> {
        vectorize(self)
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        norm(self, kind)
    }

    /// Gram–Schmidt (two passes) on the columns. Fails if the columns are
    /// numerically dependent.
    pub fn orthonormalize_columns(&self) -> Result<Self> {
        let (n, k) = self.shape();
        if k > n {
            return Err(dim("orthonormalize_columns", format!("{k} columns in dimension {n}")));
        }
        let mut cols: Vec<Vec<f64>> = (0..k).map(|j| self.col(j)).collect();
        for j in 0..k {
            let scale = dot(&cols[j], &cols[j]).sqrt();
            for _ in 0..2 {
                for i in 0..j {
                    let (head, tail) = cols.split_at_mut(j);
                    let r = dot(&head[i], &tail[0]);
                    for (x, &y) in tail[0].iter_mut().zip(&head[i]) {
                        *x -= r * y;
                    }
                }
            }
            let nrm = dot(&cols[j], &cols[j]).sqrt();
            if !(nrm > 1e-12 * scale.max(1e-300)) || nrm == 0.0 {
                return Err(Error::Singular(format!("column {j} is linearly dependent")));
            }
            cols[j].iter_mut().for_each(|x| *x /= nrm);
        }
        let mut out = Self::zeros(n, k);
        for (j, c) in cols.iter().enumerate() {
            out.set_col(j, c);
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-by-row flattening: entry (i, j) lands at index `i·cols + j`.
pub fn vectorize(x: &DenseMatrix) -> Vec<f64> {
    x.data.clone()
}

/// Inverse of [`vectorize`].
pub fn matrixize(v: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.len() != rows * cols {
        return Err(dim("matrixize", format!("length {} for {rows}x{cols}", v.len())));
    }
    DenseMatrix::new(rows, cols, v.to_vec())
}

/// Kronecker product.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DenseMatrix::zeros(ra * rb, ca * cb);
    let oc = ca * cb;
    for ia in 0..ra {
        for ja in 0..ca {
            let s = a.get(ia, ja);
            for ib in 0..rb {
                let dst = (ia * rb + ib) * oc + ja * cb;
                for (o, &x) in out.data[dst..dst + cb].iter_mut().zip(b.row(ib)) {
                    *o = s * x;
                }
            }
        }
    }
    out
}

/// Row-wise (face-splitting) Kronecker product: row ℓ of the result is
/// `kron(a[ℓ,:], b[ℓ,:])`, so `row_kron(U1,U2)·row_kron(V1,V2)ᵀ = (U1V1ᵀ) ⊙ (U2V2ᵀ)`.
pub fn row_kron(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(dim("row_kron", format!("{} rows vs {} rows", a.rows, b.rows)));
    }
    let (k1, k2) = (a.cols, b.cols);
    let mut out = DenseMatrix::zeros(a.rows, k1 * k2);
    for l in 0..a.rows {
        let orow = out.row_mut(l);
        for (i, &x) in a.row(l).iter().enumerate() {
            for (o, &y) in orow[i * k2..(i + 1) * k2].iter_mut().zip(b.row(l)) {
                *o = x * y;
            }
        }
    }
    Ok(out)
}

pub fn norm(x: &DenseMatrix, kind: NormKind) -> f64 {
    match kind {
        NormKind::Max => x.data.iter().fold(0.0, |m, v| m.max(v.abs())),
        NormKind::Frobenius => x.data.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormKind::TwoInf => {
            let mut sq = vec![0.0; x.cols];
            for i in 0..x.rows {
                for (s, v) in sq.iter_mut().zip(x.row(i)) {
                    *s += v * v;
                }
            }
            sq.into_iter().fold(0.0, f64::max).sqrt()
        }
        NormKind::Op2 => spectral_norm(x),
    }
}

/// Power iteration on `xᵀx`, stopped when successive estimates agree to 1e-10 relative.
fn spectral_norm(x: &DenseMatrix) -> f64 {
    let n = x.cols;
    if n == 0 || x.rows == 0 || x.data.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    // Deterministic start vector with no special alignment.
    let mut v: Vec<f64> = (0..n).map(|j| 1.0 + 0.37 * ((j as f64 + 1.0) * 1.618).sin()).collect();
    let mut prev = 0.0;
    for _ in 0..100_000 {
        let nv = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|a| *a /= nv);
        let xv = x.mat_vec(&v).expect("shape checked");
        let sigma = dot(&xv, &xv).sqrt();
        if sigma == 0.0 {
            return 0.0;
        }
        if (sigma - prev).abs() <= 1e-10 * sigma {
            return sigma;
        }
        prev = sigma;
        v = x.mat_t_vec(&xv).expect("shape checked");
    }
    prev
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data.iter().zip(&b.data).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Pair `(U, V)` standing for `UVᵀ`, with a certified max-norm error bound.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub rank: usize,
    pub err_bound: f64,
}

impl LowRankFactors {
    pub fn new(u: DenseMatrix, v: DenseMatrix, err_bound: f64) -> Result<Self> {
        if u.cols != v.cols {
            return Err(dim("LowRankFactors::new", format!("ranks {} and {}", u.cols, v.cols)));
        }
        if !(err_bound >= 0.0) {
            return Err(Error::OutOfRange(format!("error bound {err_bound}")));
        }
        let rank = u.cols;
        Ok(Self { u, v, rank, err_bound })
    }

    /// Materializes `UVᵀ`. Intended for verification at small sizes.
    pub fn product(&self) -> DenseMatrix {
        self.u.matmul_nt(&self.v).expect("ranks agree by construction")
    }
}
