//! Dense complex/real linear algebra sized for this problem.
//!
//! State dimensions here are 3 and 9 and design matrices are a few thousand
//! rows by 9 or 81 columns, so the classic dense algorithms are the right
//! tool: cyclic Jacobi for Hermitian eigensystems (absolute accuracy on tiny
//! matrices, trivially verified) and Householder QR with column pivoting for
//! least squares (rank-revealing, no normal-equations squaring of the
//! condition number). Everything is f64 and deterministic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use crate::{Error, Result};

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, Complex64::new(1.0, 0.0));
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ComplexMatrix { rows, cols, data }
    }

    /// Builds from a row-major slice; `data.len()` must equal `rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn trace(&self) -> Complex64 {
        debug_assert!(self.is_square());
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn scale(&self, c: Complex64) -> Self {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid("matrix addition shape mismatch"));
        }
        Ok(ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matrix product shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + aik * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    /// (A + A^dagger) / 2.
    pub fn hermitized(&self) -> Self {
        debug_assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i).conj())
        })
    }

    /// Largest |A_ij - conj(A_ji)| over all entries; 0 for exactly Hermitian.
    pub fn hermiticity_error(&self) -> f64 {
        debug_assert!(self.is_square());
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn frobenius_distance(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.frobenius_norm())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Dense row-major real matrix; the least-squares design lives here.
#[derive(Clone, Debug)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(RealMatrix {
            rows: nrows,
            cols: ncols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// A * v.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid("apply: length mismatch"));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// A^T * v.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::invalid("apply_transpose: length mismatch"));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let r = self.row(i);
            for j in 0..self.cols {
                out[j] += r[j] * v[i];
            }
        }
        Ok(out)
    }
}

/// Eigen-decomposition of a Hermitian matrix: `values` ascending,
/// eigenvector k in column k of `vectors`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

/// Cyclic complex Jacobi. Each (p, q) sweep step factors out the phase of
/// H_pq and applies the real rotation that annihilates it; off-diagonal mass
/// falls quadratically per sweep. Errors if the input is not Hermitian to
/// 1e-12 (absolute, entries here are O(1)) or if 100 sweeps do not converge.
pub fn hermitian_eig(h: &ComplexMatrix) -> Result<EigenDecomposition> {
    if !h.is_square() {
        return Err(Error::invalid("hermitian_eig: matrix not square"));
    }
    if !h.is_finite() {
        return Err(Error::invalid("hermitian_eig: non-finite entries"));
    }
    let n = h.rows();
    let herm_tol = 1e-12 * h.frobenius_norm().max(1.0);
    if h.hermiticity_error() > herm_tol {
        return Err(Error::invalid(format!(
            "hermitian_eig: hermiticity error {:.3e} exceeds {herm_tol:.3e}",
            h.hermiticity_error()
        )));
    }

    let mut a = h.hermitized();
    let mut v = ComplexMatrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let stop = (1e-15 * scale).powi(2);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a.get(p, q).norm_sqr())
            .sum();
        if off <= stop {
            let mut pairs: Vec<(f64, usize)> =
                (0..n).map(|i| (a.get(i, i).re, i)).collect();
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
            let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let vectors =
                ComplexMatrix::from_fn(n, n, |i, k| v.get(i, pairs[k].1));
            return Ok(EigenDecomposition { values, vectors });
        }
        for p in 0..n {
            for q in p + 1..n {
                let hpq = a.get(p, q);
                let mag = hpq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                // Phase e^{i phi} of H_pq; diag(1, e^{-i phi}) makes the
                // 2x2 block real with off-diagonal |H_pq|.
                let phase = hpq / mag;
                let app = a.get(p, p).re;
                let aqq = a.get(q, q).re;
                // tan(theta) for the rotation zeroing the real block.
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Column p of the combined transform is (c, -s e^{-i phi}),
                // column q is (s, c e^{-i phi}) in the (p, q) plane.
                let jqp = -s * phase.conj();
                let jqq = c * phase.conj();
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    let new_kp = c * akp + jqp * akq;
                    let new_kq = s * akp + jqq * akq;
                    a.set(k, p, new_kp);
                    a.set(p, k, new_kp.conj());
                    a.set(k, q, new_kq);
                    a.set(q, k, new_kq.conj());
                }
                let shift = t * mag;
                a.set(p, p, Complex64::new(app - shift, 0.0));
                a.set(q, q, Complex64::new(aqq + shift, 0.0));
                a.set(p, q, Complex64::new(0.0, 0.0));
                a.set(q, p, Complex64::new(0.0, 0.0));
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp + jqp * vkq);
                    v.set(k, q, s * vkp + jqq * vkq);
                }
            }
        }
    }
    Err(Error::NoConvergence("Jacobi eigensolver".into()))
}

/// Least-squares solution of min ||A x - y||_2.
#[derive(Clone, Debug)]
pub struct LsqReport {
    pub coefficients: Vec<f64>,
    pub rank: usize,
    /// Ratio of extreme |R_kk| from the pivoted QR; a cheap estimate of the
    /// column-space condition number, not the exact 2-norm kappa.
    pub condition: f64,
}

/// Rank diagnostics of a design matrix.
#[derive(Clone, Debug)]
pub struct RankReport {
    pub rank: usize,
    pub condition: f64,
    /// Unit vector in the (right) null space when rank < cols.
    pub null_vector: Option<Vec<f64>>,
}

struct PivotedQr {
    m: usize,
    n: usize,
    /// Column-major factored storage: R above the diagonal, Householder
    /// vectors below (v normalized so v[k] carries the full reflector).
    cols: Vec<Vec<f64>>,
    betas: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
    condition: f64,
}

const RANK_REL_TOL: f64 = 1e-10;

fn factorize(a: &RealMatrix) -> PivotedQr {
    let m = a.rows();
    let n = a.cols();
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut betas = vec![0.0; n.min(m)];
    let kmax = n.min(m);

    for k in 0..kmax {
        // Pivot: bring the column with the largest remaining norm to k.
        let (piv, _) = (k..n)
            .map(|j| (j, cols[j][k..].iter().map(|v| v * v).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("k < n");
        cols.swap(k, piv);
        perm.swap(k, piv);

        let norm = cols[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Remaining columns are all zero; record a zero pivot.
            betas[k] = 0.0;
            cols[k].push(0.0);
            continue;
        }
        let alpha = if cols[k][k] >= 0.0 { -norm } else { norm };
        let mut vtv = 0.0;
        {
            let ck = &mut cols[k];
            ck[k] -= alpha;
            for i in k..m {
                vtv += ck[i] * ck[i];
            }
        }
        let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
        betas[k] = beta;
        // Apply the reflector to the remaining columns.
        for j in k + 1..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += cols[k][i] * cols[j][i];
            }
            let f = beta * dot;
            for i in k..m {
                cols[j][i] -= f * cols[k][i];
            }
        }
        // Store R_kk in place of v's head once applied; keep both by
        // remembering alpha: R_kk = alpha, v occupies k.. of column k.
        // We stash alpha at the end of the loop by swapping in solve-time
        // bookkeeping instead; simplest is a parallel diag array.
        cols[k].push(alpha); // appended marker slot, length m+1
    }

    let diag: Vec<f64> = (0..kmax).map(|k| cols[k][m]).collect();
    let mut rank = kmax;
    if let Some(&d0) = diag.first() {
        let tol = d0.abs() * RANK_REL_TOL;
        rank = diag.iter().take_while(|d| d.abs() > tol).count();
        if d0 == 0.0 {
            rank = 0;
        }
    }
    let condition = if rank == 0 {
        f64::INFINITY
    } else {
        let mx = diag[..rank].iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let mn = diag[..rank].iter().fold(f64::INFINITY, |a, d| a.min(d.abs()));
        mx / mn
    };

    PivotedQr {
        m,
        n,
        cols,
        betas,
        perm,
        rank,
        condition,
    }
}

impl PivotedQr {
    fn r_entry(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i <= j && j < self.n);
        if i == j {
            self.cols[i][self.m]
        } else {
            self.cols[j][i]
        }
    }

    /// min ||A x - y|| using the leading `take` columns (take <= rank).
    fn solve_rank(&self, y: &[f64], take: usize) -> Vec<f64> {
        let mut qy = y.to_vec();
        for k in 0..self.betas.len() {
            if self.betas[k] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for i in k..self.m {
                dot += self.cols[k][i] * qy[i];
            }
            let f = self.betas[k] * dot;
            for i in k..self.m {
                qy[i] -= f * self.cols[k][i];
            }
        }
        let mut xs = vec![0.0; take];
        for i in (0..take).rev() {
            let mut acc = qy[i];
            for j in i + 1..take {
                acc -= self.r_entry(i, j) * xs[j];
            }
            xs[i] = acc / self.r_entry(i, i);
        }
        let mut x = vec![0.0; self.n];
        for (k, &xk) in xs.iter().enumerate() {
            x[self.perm[k]] = xk;
        }
        x
    }

    fn null_vector(&self) -> Option<Vec<f64>> {
        if self.rank >= self.n {
            return None;
        }
        let r = self.rank;
        // R[0..r, 0..r] w = -R[0..r, r]; null = P (w, 1, 0, ...).
        let mut w = vec![0.0; r];
        for i in (0..r).rev() {
            let mut acc = -self.r_entry(i, r);
            for j in i + 1..r {
                acc -= self.r_entry(i, j) * w[j];
            }
            w[i] = acc / self.r_entry(i, i);
        }
        let mut v = vec![0.0; self.n];
        for (k, &wk) in w.iter().enumerate() {
            v[self.perm[k]] = wk;
        }
        v[self.perm[r]] = 1.0;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        Some(v)
    }
}

/// Solves min ||A x - y||_2 by Householder QR with column pivoting.
/// Errors when A has fewer rows than columns or loses column rank; the
/// returned condition is the pivoted-R diagonal ratio.
pub fn lsq_solve(a: &RealMatrix, y: &[f64]) -> Result<LsqReport> {
    if y.len() != a.rows() {
        return Err(Error::invalid(format!(
            "lsq_solve: {} observations for {} rows",
            y.len(),
            a.rows()
        )));
    }
    if a.rows() < a.cols() {
        return Err(Error::invalid(format!(
            "lsq_solve: underdetermined system ({} rows < {} cols)",
            a.rows(),
            a.cols()
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("lsq_solve: non-finite observations"));
    }
    let qr = factorize(a);
    if qr.rank < qr.n {
        return Err(Error::RankDeficient {
            rank: qr.rank,
            needed: qr.n,
            channels: null_vector_summary(qr.null_vector().as_deref()),
        });
    }
    Ok(LsqReport {
        coefficients: qr.solve_rank(y, qr.n),
        rank: qr.rank,
        condition: qr.condition,
    })
}

/// Rank and conditioning of the columns of `a`, with a null-space direction
/// when the columns are dependent.
pub fn column_rank(a: &RealMatrix) -> RankReport {
    let qr = factorize(a);
    RankReport {
        rank: qr.rank,
        condition: qr.condition,
        null_vector: qr.null_vector(),
    }
}

fn null_vector_summary(v: Option<&[f64]>) -> String {
    match v {
        None => "unknown directions".to_string(),
        Some(v) => {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()));
            let parts: Vec<String> = idx
                .iter()
                .take(3)
                .filter(|&&i| v[i].abs() > 1e-8)
                .map(|&i| format!("col{}({:+.2})", i, v[i]))
                .collect();
            format!("mixture {}", parts.join(" "))
        }
    }
}

/// Kronecker product A (x) B.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    ComplexMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a.get(i / br, j / bc) * b.get(i % br, j % bc)
    })
}

/// Traces out the second factor of a (d*d) x (d*d) matrix on C^d (x) C^d,
/// composite index a*d + b.
pub fn partial_trace_b(c: &ComplexMatrix, d: usize) -> Result<ComplexMatrix> {
    if !c.is_square() || c.rows() != d * d {
        return Err(Error::invalid(format!(
            "partial_trace_b: expected {0}x{0} with d={d}",
            d * d
        )));
    }
    Ok(ComplexMatrix::from_fn(d, d, |i, j| {
        (0..d).map(|b| c.get(i * d + b, j * d + b)).sum()
    }))
}

type NodesWeights = Arc<(Vec<f64>, Vec<f64>)>;

/// Gauss-Legendre nodes and weights on [-1, 1], cached per order.
/// Nodes ascend and are exactly antisymmetric; weights sum to 2.
pub fn gauss_legendre(n: usize) -> NodesWeights {
    assert!(n >= 1);
    static CACHE: OnceLock<Mutex<HashMap<usize, NodesWeights>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().expect("gl cache").get(&n) {
        return hit.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Newton from the Chebyshev-like initial guess; converges in a few
        // iterations for every order used here.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 {
                let (_, d2) = legendre_with_derivative(n, x);
                dp = d2;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // i = 0 is the largest root; mirror onto the ascending layout.
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let out: NodesWeights = Arc::new((nodes, weights));
    cache.lock().expect("gl cache").insert(n, out.clone());
    out
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
