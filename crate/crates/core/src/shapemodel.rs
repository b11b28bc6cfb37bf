//! PCA shape model over flattened landmark vectors.
//!
//! `X = mean + W·b` and `b = Wᵀ·(X - mean)`, where the columns of `W` are the
//! leading eigenvectors of the sample covariance. The covariance is at most
//! 30×30 here, so it is diagonalised directly with cyclic Jacobi rotations.
//!
//! File format: magic `PINS1\0`, `u32` LE `n_l` and `n_b`, then `f64` LE mean
//! (`3·n_l`), eigenvalues (`n_b`) and eigenvectors (`3·n_l × n_b`, row-major).

use std::fs;
use std::path::Path;

pub const SHAPE_MAGIC: &[u8; 6] = b"PINS1\0";

#[derive(Debug, thiserror::Error)]
pub enum ShapeModelError {
    #[error("need at least 2 training shapes, got {0}")]
    TooFewShapes(usize),
    #[error("shape {index} has length {found}, expected {expected}")]
    Length { index: usize, expected: usize, found: usize },
    #[error("vector length {found} does not match model dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("flattened shapes must have positive length divisible by 3, got {0}")]
    NotLandmarks(usize),
    #[error("variance threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("training shapes have zero total variance")]
    ZeroVariance,
    #[error("non-finite value in training shapes")]
    NonFinite,
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as the columns of a
/// row-major `n×n` matrix, unsorted.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J with J the (p, q) rotation.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Full PCA spectrum of a training set, eigenpairs sorted by decreasing variance.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub mean: Vec<f64>,
    /// Non-negative, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is eigenvector `k`; row-major `dim × dim`.
    pub eigenvectors: Vec<f64>,
    pub dim: usize,
}

impl Spectrum {
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.eigenvectors[i * self.dim + k]).collect()
    }
}

/// Sample covariance (`1/(N-1)`) of flattened shapes and their mean.
pub fn covariance(shapes: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), ShapeModelError> {
    if shapes.len() < 2 {
        return Err(ShapeModelError::TooFewShapes(shapes.len()));
    }
    let dim = shapes[0].len();
    if dim == 0 || dim % 3 != 0 {
        return Err(ShapeModelError::NotLandmarks(dim));
    }
    for (index, s) in shapes.iter().enumerate() {
        if s.len() != dim {
            return Err(ShapeModelError::Length { index, expected: dim, found: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(ShapeModelError::NonFinite);
        }
    }
    let n = shapes.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in shapes {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; dim * dim];
    for s in shapes {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += c[i] * c[j];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n - 1.0);
    Ok((mean, cov))
}

pub fn spectrum(shapes: &[Vec<f64>]) -> Result<Spectrum, ShapeModelError> {
    let (mean, cov) = covariance(shapes)?;
    let dim = mean.len();
    let (values, vectors) = jacobi_eigen(&cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&k| values[k].max(0.0)).collect();
    let mut eigenvectors = vec![0.0; dim * dim];
    for (col, &k) in order.iter().enumerate() {
        // Largest-magnitude component positive; first index wins ties.
        let mut pivot = 0;
        for i in 1..dim {
            if vectors[i * dim + k].abs() > vectors[pivot * dim + k].abs() {
                pivot = i;
            }
        }
        let sign = if vectors[pivot * dim + k] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            eigenvectors[i * dim + col] = sign * vectors[i * dim + k];
        }
    }
    Ok(Spectrum { mean, eigenvalues, eigenvectors, dim })
}

/// Number of leading modes whose cumulative variance fraction reaches `threshold`.
pub fn modes_for_threshold(eigenvalues: &[f64], threshold: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    for (k, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc / total >= threshold {
            return k + 1;
        }
    }
    eigenvalues.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    n_l: usize,
    n_b: usize,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Row-major `3·n_l × n_b`.
    eigenvectors: Vec<f64>,
}

impl ShapeModel {
    /// Fits the model, keeping the fewest modes that explain `variance_threshold`
    /// of the total variance (at least one, fewer than `3·n_l`).
    pub fn fit(shapes: &[Vec<f64>], variance_threshold: f64) -> Result<Self, ShapeModelError> {
        if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
            return Err(ShapeModelError::Threshold(variance_threshold));
        }
        let spec = spectrum(shapes)?;
        let total: f64 = spec.eigenvalues.iter().sum();
        if total <= 0.0 {
            return Err(ShapeModelError::ZeroVariance);
        }
        let dim = spec.dim;
        let n_b = modes_for_threshold(&spec.eigenvalues, variance_threshold).clamp(1, dim - 1);
        Ok(Self::from_spectrum(&spec, n_b))
    }

    /// Truncates a spectrum to its leading `n_b` modes.
    pub fn from_spectrum(spec: &Spectrum, n_b: usize) -> Self {
        let dim = spec.dim;
        assert!(n_b >= 1 && n_b < dim, "n_b must lie in 1..{dim}");
        let mut eigenvectors = vec![0.0; dim * n_b];
        for i in 0..dim {
            eigenvectors[i * n_b..(i + 1) * n_b].copy_from_slice(&spec.eigenvectors[i * dim..i * dim + n_b]);
        }
        Self {
            n_l: dim / 3,
            n_b,
            mean: spec.mean.clone(),
            eigenvalues: spec.eigenvalues[..n_b].to_vec(),
            eigenvectors,
        }
    }

    pub fn n_l(&self) -> usize {
        self.n_l
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn dim(&self) -> usize {
        3 * self.n_l
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `W[i][k]`.
    pub fn w(&self, i: usize, k: usize) -> f64 {
        self.eigenvectors[i * self.n_b + k]
    }

    pub fn eigenvectors(&self) -> &[f64] {
        &self.eigenvectors
    }

    /// `b = Wᵀ (X - mean)`.
    pub fn to_b(&self, x: &[f64]) -> Result<Vec<f64>, ShapeModelError> {
        if x.len() != self.dim() {
            return Err(ShapeModelError::Dimension { expected: self.dim(), found: x.len() });
        }
        let mut b = vec![0.0; self.n_b];
        for i in 0..self.dim() {
            let c = x[i] - self.mean[i];
            for (k, bk) in b.iter_mut().enumerate() {
                *bk += self.w(i, k) * c;
            }
        }
        Ok(b)
    }

    /// `X = mean + W b`.
    pub fn to_x(&self, b: &[f64]) -> Result<Vec<f64>, ShapeModelError> {
        if b.len() != self.n_b {
            return Err(ShapeModelError::Dimension { expected: self.n_b, found: b.len() });
        }
        Ok((0..self.dim())
            .map(|i| self.mean[i] + (0..self.n_b).map(|k| self.w(i, k) * b[k]).sum::<f64>())
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SHAPE_MAGIC);
        out.extend_from_slice(&(self.n_l as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_b as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.eigenvalues).chain(&self.eigenvectors) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ShapeModelError> {
        if bytes.len() < 14 || &bytes[..6] != SHAPE_MAGIC {
            return Err(ShapeModelError::Format("bad magic or version".into()));
        }
        let n_l = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let n_b = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
        if n_l == 0 || n_b == 0 || n_b >= 3 * n_l {
            return Err(ShapeModelError::Format(format!("invalid dims n_l={n_l}, n_b={n_b}")));
        }
        let dim = 3 * n_l;
        let count = dim + n_b + dim * n_b;
        let expected = 14 + 8 * count;
        if bytes.len() != expected {
            return Err(ShapeModelError::Format(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let values: Vec<f64> = bytes[14..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ShapeModelError::Format("non-finite value".into()));
        }
        let eigenvalues = values[dim..dim + n_b].to_vec();
        if eigenvalues.iter().any(|&v| v < 0.0) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(ShapeModelError::Format("eigenvalues must be non-negative and non-increasing".into()));
        }
        Ok(Self {
            n_l,
            n_b,
            mean: values[..dim].to_vec(),
            eigenvalues,
            eigenvectors: values[dim + n_b..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ShapeModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ShapeModelError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ShapeModelError> {
        let bytes =
            fs::read(path).map_err(|source| ShapeModelError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Mean squared reconstruction error summed over shapes, divided by `N - 1`
    /// (comparable to the discarded eigenvalue mass).
    pub fn reconstruction_residual(&self, shapes: &[Vec<f64>]) -> Result<f64, ShapeModelError> {
        let mut total = 0.0;
        for s in shapes {
            let r = self.to_x(&self.to_b(s)?)?;
            total += s.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / (shapes.len() as f64 - 1.0))
    }
}
