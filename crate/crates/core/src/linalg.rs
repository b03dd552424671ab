//! Dense real matrices and the handful of decompositions the rest of the
//! crate needs: a one-sided Jacobi SVD, a symmetric Jacobi eigensolver,
//! pairwise distances and PCA frames for small point clouds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Off-diagonal threshold for the one-sided Jacobi sweeps, relative to the
/// column norms being rotated.
const JACOBI_TOL: f64 = 1e-12;
/// Sweep cap for the SVD.
pub const SVD_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("data length {len} does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty matrix")]
    Empty,
    #[error("jacobi SVD did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting ragged or non-finite input.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch(format!(
                    "ragged rows: expected {cols} columns, found {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{:?} minus {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Thin singular value decomposition `A = U diag(sigma) Vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// D x r, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub sigma: Vec<f64>,
    /// r x N, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// Reconstruction from the leading `rank` triplets.
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let rank = rank.min(self.sigma.len());
        let (d, n) = (self.u.rows(), self.vt.cols());
        let mut out = Matrix::zeros(d, n);
        for i in 0..d {
            let dst = out.row_mut(i);
            for k in 0..rank {
                let coef = self.u.get(i, k) * self.sigma[k];
                if coef != 0.0 {
                    axpy(coef, self.vt.row(k), dst);
                }
            }
        }
        out
    }
}

/// One-sided (Hestenes) Jacobi SVD on the thin dimension.
///
/// Left singular vectors are sign-normalized so that each column's
/// largest-magnitude entry is positive.
pub fn thin_svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite { row: 0, col: 0 });
    }
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();

    // Column-major working copies: `cols` converges to U*Sigma, `v` to V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NonConvergence {
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut left: Vec<Vec<f64>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            if s > 0.0 {
                cols[j].iter().map(|x| x / s).collect()
            } else {
                vec![0.0; m]
            }
        })
        .collect();
    orthonormalize(&mut left, &sigma);
    let right: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();

    // A = L S R^T (non-transposed) or A^T = L S R^T, so A = R S L^T.
    let (mut u_cols, mut v_cols) = if transposed {
        (right, left)
    } else {
        (left, right)
    };
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut best = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let r = n;
    let d = a.rows();
    let nn = a.cols();
    let u = Matrix::from_fn(d, r, |i, k| u_cols[k][i]);
    let vt = Matrix::from_fn(r, nn, |k, j| v_cols[k][j]);
    Ok(SvdResult { u, sigma, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let xp = &mut head[p];
    let xq = &mut tail[0];
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Modified Gram-Schmidt over columns in order, completing null columns from
/// the standard basis.
fn orthonormalize(cols: &mut [Vec<f64>], sigma: &[f64]) {
    let m = cols.first().map_or(0, Vec::len);
    let smax = sigma.first().copied().unwrap_or(0.0);
    for k in 0..cols.len() {
        let mut candidate = if sigma[k] > smax * f64::EPSILON {
            Some(cols[k].clone())
        } else {
            None
        };
        if let Some(c) = candidate.as_mut() {
            if !project_out(c, &cols[..k]) {
                candidate = None;
            }
        }
        let vec = match candidate {
            Some(c) => c,
            None => {
                let mut found = None;
                for e in 0..m {
                    let mut c = vec![0.0; m];
                    c[e] = 1.0;
                    if project_out(&mut c, &cols[..k]) {
                        found = Some(c);
                        break;
                    }
                }
                found.unwrap_or_else(|| vec![0.0; m])
            }
        };
        cols[k] = vec;
    }
}

/// Removes components along `basis` (twice) and normalizes. Returns false if
/// nothing substantial is left.
fn project_out(c: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let before = dot(c, c).sqrt();
    for _ in 0..2 {
        for b in basis {
            let p = dot(c, b);
            axpy(-p, b, c);
        }
    }
    let after = dot(c, c).sqrt();
    if after <= 1e-8 * before || after == 0.0 {
        return false;
    }
    c.iter_mut().for_each(|x| *x /= after);
    true
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the eigenvectors as matrix
/// columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "symmetric_eigen needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let mut s = a.clone();
    let mut vecs = Matrix::identity(n);
    for _ in 0..SVD_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s.get(i, j).powi(2))
            .sum();
        let scale: f64 = s.data().iter().map(|v| v * v).sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (s.get(q, q) - s.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, q);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(q, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
                for k in 0..n {
                    let vkp = vecs.get(k, p);
                    let vkq = vecs.get(k, q);
                    vecs.set(k, p, c * vkp - sn * vkq);
                    vecs.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.get(j, j).total_cmp(&s.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| s.get(i, i)).collect();
    let sorted = Matrix::from_fn(n, n, |r, c| vecs.get(r, order[c]));
    Ok((values, sorted))
}

/// Squared Euclidean distance matrix between the rows of `points`.
pub fn pairwise_sq_dist(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(points.row(i), points.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Principal frame of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaAxes {
    pub centroid: [f64; 3],
    /// Columns are the principal axes, eigenvalue-descending, det = +1.
    pub rotation: [[f64; 3]; 3],
    /// Population covariance eigenvalues, descending.
    pub eigenvalues: [f64; 3],
    /// Set when every point coincides; rotation is then the identity.
    pub degenerate: bool,
}

impl PcaAxes {
    /// Coordinates of `p` in the principal frame: `R^T (p - c)`.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.centroid[0],
            p[1] - self.centroid[1],
            p[2] - self.centroid[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Inverse of [`to_local`](Self::to_local).
    pub fn to_global(&self, q: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.centroid;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2];
        }
        out
    }

    pub fn axis(&self, k: usize) -> [f64; 3] {
        [self.rotation[0][k], self.rotation[1][k], self.rotation[2][k]]
    }
}

/// Pads a 1-3 column row to a 3D point.
pub fn point3(row: &[f64]) -> [f64; 3] {
    let mut p = [0.0; 3];
    for (dst, v) in p.iter_mut().zip(row) {
        *dst = *v;
    }
    p
}

/// PCA frame of `points` (n x 1..=3).
pub fn pca_axes(points: &Matrix) -> Result<PcaAxes, LinalgError> {
    let n = points.rows();
    if n < 2 {
        return Err(LinalgError::DimensionMismatch(format!(
            "pca_axes needs at least 2 points, got {n}"
        )));
    }
    if points.cols() == 0 || points.cols() > 3 {
        return Err(LinalgError::DimensionMismatch(format!(
            "pca_axes needs 1-3 spatial columns, got {}",
            points.cols()
        )));
    }
    let pts: Vec<[f64; 3]> = (0..n).map(|i| point3(points.row(i))).collect();
    let mut centroid = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let mut cov = Matrix::zeros(3, 3);
    for p in &pts {
        let d = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov.set(a, b, cov.get(a, b) + d[a] * d[b]);
            }
        }
    }
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= n as f64);

    let trace = cov.get(0, 0) + cov.get(1, 1) + cov.get(2, 2);
    if trace <= 0.0 {
        log::warn!("pca_axes: all {n} points coincide, using identity frame");
        return Ok(PcaAxes {
            centroid,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            eigenvalues: [0.0; 3],
            degenerate: true,
        });
    }

    let (values, vecs) = symmetric_eigen(&cov)?;
    let mut rotation = [[0.0; 3]; 3];
    for k in 0..3 {
        let mut axis = [vecs.get(0, k), vecs.get(1, k), vecs.get(2, k)];
        let mut best = 0;
        for i in 1..3 {
            if axis[i].abs() > axis[best].abs() {
                best = i;
            }
        }
        if axis[best] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..3 {
            rotation[i][k] = axis[i];
        }
    }
    if det3(&rotation) < 0.0 {
        for row in rotation.iter_mut() {
            row[2] = -row[2];
        }
    }
    Ok(PcaAxes {
        centroid,
        rotation,
        eigenvalues: [values[0], values[1], values[2]],
        degenerate: false,
    })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
