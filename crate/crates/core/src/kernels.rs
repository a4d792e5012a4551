//! Gaussian-kernel primitives: Gram matrices, bandwidth heuristics and
//! Nyström feature maps.
//!
//! The kernel is `k(x, y) = exp(-gamma * |x - y|^2)` with `gamma > 0`, so
//! `k(x, x) = 1` and `0 < k(x, y) <= 1`. Observations are stored as matrix
//! rows throughout.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Gaussian kernel with inverse squared length-scale `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub gamma: f64,
    pub input_dim: usize,
}

impl KernelSpec {
    pub fn new(gamma: f64, input_dim: usize) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel gamma must be positive and finite, got {gamma}"
            )));
        }
        if input_dim == 0 {
            return Err(Error::InvalidArgument("kernel input_dim must be positive".into()));
        }
        Ok(Self { gamma, input_dim })
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-self.gamma * sq_dist(x, y)).exp()
    }

    fn check(&self, x: &DMatrix<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "{what} has {} columns, kernel expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Rows of `x` laid out contiguously (row-major copy).
fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// Gram matrix `[k(x_i, x2_j)]`.
pub fn gram(kernel: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    kernel.check(x, "X")?;
    kernel.check(x2, "X2")?;
    let d = kernel.input_dim;
    let a = row_major(x);
    let b = row_major(x2);
    let (n, m) = (x.nrows(), x2.nrows());
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        let yj = &b[j * d..(j + 1) * d];
        let col = out.column_mut(j);
        for (i, v) in col.into_iter().enumerate() {
            *v = kernel.eval(&a[i * d..(i + 1) * d], yj);
        }
    }
    Ok(out)
}

/// Symmetric Gram matrix of `x` with itself.
pub fn gram_sym(kernel: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    kernel.check(x, "X")?;
    let d = kernel.input_dim;
    let a = row_major(x);
    let n = x.nrows();
    let mut out = DMatrix::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = kernel.eval(&a[i * d..(i + 1) * d], &a[j * d..(j + 1) * d]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Squared distances `|x_i - x_j|^2` over pairs `i < j` of the chosen rows.
pub fn pairwise_sq_dists(x: &DMatrix<f64>, subset: Option<&[usize]>) -> Vec<f64> {
    let rows: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..x.nrows()).collect(),
    };
    let d = x.ncols();
    let a = row_major(x);
    let mut out = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for (p, &i) in rows.iter().enumerate() {
        for &j in &rows[p + 1..] {
            out.push(sq_dist(&a[i * d..(i + 1) * d], &a[j * d..(j + 1) * d]));
        }
    }
    out
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition; the
/// median of an even count averages the two middle values).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_pairwise(x: &DMatrix<f64>, subset: Option<&[usize]>) -> Result<Vec<f64>> {
    let mut d = pairwise_sq_dists(x, subset);
    if d.is_empty() {
        return Err(Error::DegenerateData("bandwidth heuristics need at least 2 rows".into()));
    }
    d.sort_by(|a, b| a.total_cmp(b));
    if *d.last().unwrap() <= 0.0 {
        return Err(Error::DegenerateData("all rows are identical".into()));
    }
    Ok(d)
}

/// Median heuristic: `1 / gamma = median{|x_i - x_j|^2 : i < j}` over `subset`
/// (all rows when absent).
pub fn median_bandwidth(x: &DMatrix<f64>, subset: Option<&[usize]>) -> Result<f64> {
    let d = sorted_pairwise(x, subset)?;
    let med = quantile_sorted(&d, 0.5);
    if med <= 0.0 {
        return Err(Error::DegenerateData(
            "median pairwise distance is zero (too many duplicate rows)".into(),
        ));
    }
    Ok(1.0 / med)
}

/// Bandwidths `gamma = 1 / q_p` for each quantile level `p` of the pairwise
/// squared distances. Zero quantiles are skipped.
pub fn quantile_bandwidths(
    x: &DMatrix<f64>,
    subset: Option<&[usize]>,
    levels: &[f64],
) -> Result<Vec<f64>> {
    let d = sorted_pairwise(x, subset)?;
    Ok(levels
        .iter()
        .map(|&p| quantile_sorted(&d, p))
        .filter(|&q| q > 0.0)
        .map(|q| 1.0 / q)
        .collect())
}

/// Evenly spaced subset of at most `cap` row indices out of `n`.
pub fn thin_rows(n: usize, cap: usize) -> Option<Vec<usize>> {
    if n <= cap {
        return None;
    }
    Some((0..cap).map(|i| i * n / cap).collect())
}

fn check_hsic_inputs(x: &DMatrix<f64>, labels: &[f64], weights: &[f64]) -> Result<()> {
    let n = x.nrows();
    if labels.len() != n || weights.len() != n {
        return Err(Error::InvalidArgument(format!(
            "HSIC inputs disagree on length: {n} rows, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(Error::InvalidArgument(format!("label {bad} is not +1 or -1")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("HSIC weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("HSIC weights sum to {total}, expected 1")));
    }
    let pos = labels.iter().filter(|&&l| l > 0.0).count();
    if pos == 0 || pos == n {
        return Err(Error::DegenerateLabels("HSIC needs both label classes".into()));
    }
    Ok(())
}

/// Weighted empirical HSIC `n^-2 tr(K_x H K_y H)` with `H = diag(w) - w w^T`
/// and the class-normalized target kernel.
///
/// Uses `H K_y H = sum_c v_c v_c^T / #c` with `v_c = w * 1_c - W_c w`, so the
/// cost is one pass over the pairs and no `n x n` storage.
pub fn hsic(x: &DMatrix<f64>, labels: &[f64], weights: &[f64], gamma: f64) -> Result<f64> {
    check_hsic_inputs(x, labels, weights)?;
    let kernel = KernelSpec::new(gamma, x.ncols())?;
    let n = x.nrows();
    let d = x.ncols();
    let a = row_major(x);
    let mut total = 0.0;
    for class in [1.0, -1.0] {
        let count = labels.iter().filter(|&&l| l == class).count() as f64;
        let wc: f64 = weights.iter().zip(labels).filter(|(_, &l)| l == class).map(|(w, _)| w).sum();
        let v: Vec<f64> = weights
            .iter()
            .zip(labels)
            .map(|(&w, &l)| if l == class { w } else { 0.0 } - wc * w)
            .collect();
        let mut quad = 0.0;
        for i in 0..n {
            if v[i] == 0.0 {
                continue;
            }
            quad += v[i] * v[i];
            let xi = &a[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in (i + 1)..n {
                acc += v[j] * kernel.eval(xi, &a[j * d..(j + 1) * d]);
            }
            quad += 2.0 * v[i] * acc;
        }
        total += quad / count;
    }
    Ok(total / (n as f64 * n as f64))
}

/// Candidate bandwidth maximizing the weighted HSIC. Ties go to the smaller
/// gamma.
pub fn hsic_bandwidth(
    x: &DMatrix<f64>,
    labels: &[f64],
    weights: &[f64],
    candidates: &[f64],
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty HSIC candidate list".into()));
    }
    check_hsic_inputs(x, labels, weights)?;
    let mut best: Option<(f64, f64)> = None;
    for &g in candidates {
        let h = hsic(x, labels, weights, g)?;
        best = match best {
            None => Some((g, h)),
            Some((bg, bh)) => {
                let tie = (h - bh).abs() <= 1e-12 * h.abs().max(bh.abs());
                if (tie && g < bg) || (!tie && h > bh) {
                    Some((g, h))
                } else {
                    Some((bg, bh))
                }
            }
        };
    }
    Ok(best.unwrap().0)
}

/// Default Nyström rank `2 * ceil(sqrt(n))`, capped at `n`.
pub fn default_landmark_count(n: usize) -> usize {
    (2 * (n as f64).sqrt().ceil() as usize).min(n)
}

/// Nyström feature map `phi(x) = (K_mm)^{+1/2} k(landmarks, x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NystromMap {
    pub landmarks: DMatrix<f64>,
    pub whitening: DMatrix<f64>,
    pub kernel: KernelSpec,
}

impl NystromMap {
    /// Samples `m` landmark rows uniformly without replacement.
    pub fn fit(kernel: &KernelSpec, x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Self> {
        kernel.check(x, "X")?;
        let n = x.nrows();
        if m == 0 || m > n {
            return Err(Error::InvalidArgument(format!(
                "Nyström rank {m} must lie in 1..={n}"
            )));
        }
        let mut idx = if m == n {
            (0..n).collect::<Vec<_>>()
        } else {
            index::sample(&mut rng::stream(seed, 0x4e79), n, m).into_vec()
        };
        idx.sort_unstable();
        Self::from_rows(kernel, x, &idx)
    }

    /// Uses the given rows of `x` as landmarks.
    pub fn from_rows(kernel: &KernelSpec, x: &DMatrix<f64>, rows: &[usize]) -> Result<Self> {
        let landmarks = x.select_rows(rows);
        let kmm = gram_sym(kernel, &landmarks)?;
        let eig = linalg::sym_eigen(&kmm);
        let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
        let tol = linalg::pinv_tolerance(rows.len(), rows.len(), max_ev);
        let inv_sqrt = eig
            .eigenvalues
            .map(|v| if v > tol { 1.0 / v.sqrt() } else { 0.0 });
        let whitening =
            &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        Ok(Self { landmarks, whitening, kernel: *kernel })
    }

    pub fn rank(&self) -> usize {
        self.landmarks.nrows()
    }

    /// Feature matrix, one row `phi(x_i)^T` per input row.
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(gram(&self.kernel, x, &self.landmarks)? * &self.whitening)
    }

    /// Kernel expansion over the landmarks equal to `x -> beta^T phi(x)`.
    pub fn expansion_coefficients(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.whitening * beta
    }
}

/// `f(x) = sum_i coefficients_i * k(centers_i, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelExpansion {
    pub kernel: KernelSpec,
    pub centers: DMatrix<f64>,
    pub coefficients: DVector<f64>,
}

impl KernelExpansion {
    pub fn new(kernel: KernelSpec, centers: DMatrix<f64>, coefficients: DVector<f64>) -> Result<Self> {
        kernel.check(&centers, "centers")?;
        if centers.nrows() != coefficients.len() {
            return Err(Error::InvalidArgument(format!(
                "{} centers but {} coefficients",
                centers.nrows(),
                coefficients.len()
            )));
        }
        Ok(Self { kernel, centers, coefficients })
    }

    /// Evaluations at every row of `x`.
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(gram(&self.kernel, x, &self.centers)? * &self.coefficients)
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Pointwise average of expansions, realised by stacking their centers.
    pub fn average(parts: &[KernelExpansion]) -> Result<KernelExpansion> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero expansions".into()))?;
        if parts.iter().any(|p| p.kernel != first.kernel) {
            return Err(Error::InvalidArgument("averaged expansions must share a kernel".into()));
        }
        let rows: usize = parts.iter().map(|p| p.len()).sum();
        let d = first.kernel.input_dim;
        let mut centers = DMatrix::zeros(rows, d);
        let mut coefficients = DVector::zeros(rows);
        let scale = 1.0 / parts.len() as f64;
        let mut r = 0;
        for p in parts {
            centers.rows_mut(r, p.len()).copy_from(&p.centers);
            coefficients.rows_mut(r, p.len()).copy_from(&(&p.coefficients * scale));
            r += p.len();
        }
        Ok(KernelExpansion { kernel: first.kernel, centers, coefficients })
    }
}
