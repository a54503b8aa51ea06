//! Dense linear-algebra and scalar helpers shared by every stage.
//!
//! Matrices are plain `ndarray::Array2<f64>`. The SVD is a one-sided Jacobi
//! (Hestenes) iteration, which is accurate to working precision for the small
//! representation matrices the selection stage builds (width × n samples).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DmeaError, Result};

pub type Matrix = Array2<f64>;
pub type Rng = ChaCha8Rng;

/// Fixed numeric tolerances used by validation code and the test suites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub orthonormality: f64,
    pub reconstruction: f64,
    pub softmax_sum: f64,
    pub cosine_scale: f64,
    pub fusion: f64,
    pub loss_identity: f64,
    pub gradient_relative: f64,
    pub finite_difference_step: f64,
    pub similarity_bounds: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    orthonormality: 1e-8,
    reconstruction: 1e-6,
    softmax_sum: 1e-9,
    cosine_scale: 1e-9,
    fusion: 1e-6,
    loss_identity: 1e-9,
    gradient_relative: 1e-4,
    finite_difference_step: 1e-4,
    similarity_bounds: 1e-9,
};

/// Thin singular value decomposition `R = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m × r, r = min(m, n)
    pub left_singular_vectors: Matrix,
    /// length r, non-increasing
    pub singular_values: Vec<f64>,
    /// n × r
    pub right_singular_vectors: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.left_singular_vectors.clone();
        for (mut col, s) in scaled.columns_mut().into_iter().zip(&self.singular_values) {
            col *= *s;
        }
        scaled.dot(&self.right_singular_vectors.t())
    }
}

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a base seed and a list of tags
/// (splitmix64 finalizer chained over the tags).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Matrix of i.i.d. normal entries with the given standard deviation.
pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn check_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DmeaError::InvalidInput(format!("{what} has non-finite entries")))
    }
}

pub fn svd(r: ArrayView2<f64>) -> Result<SvdResult> {
    let (m, n) = r.dim();
    if m == 0 || n == 0 {
        return Err(DmeaError::InvalidInput("svd of an empty matrix".into()));
    }
    check_finite(r, "svd input")?;

    // Jacobi works on the columns of a tall matrix; transpose wide inputs.
    let transposed = m < n;
    let tall = if transposed { r.t().to_owned() } else { r.to_owned() };
    let (rows, cols) = tall.dim();

    let mut w: Vec<Vec<f64>> = (0..cols).map(|j| tall.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = column_products(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let negligible = scale * (rows.max(cols) as f64) * f64::EPSILON;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut values = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for &j in &order {
        if norms[j] > negligible && norms[j] > 0.0 {
            left.push(w[j].iter().map(|x| x / norms[j]).collect());
            values.push(norms[j]);
        } else {
            pending.push(left.len());
            left.push(Vec::new());
            values.push(0.0);
        }
        right.push(v[j].clone());
    }
    // Complete the left basis for (numerically) zero singular values.
    for slot in pending {
        left[slot] = orthogonal_complement_vector(&left, rows);
    }

    for k in 0..cols {
        let (idx, _) = left[k]
            .iter()
            .enumerate()
            .fold((0, 0.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        if left[k][idx] < 0.0 {
            left[k].iter_mut().for_each(|x| *x = -*x);
            right[k].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = columns_to_matrix(&left, rows);
    let vm = columns_to_matrix(&right, cols);
    let result = if transposed {
        // Aᵀ = U Σ Vᵀ  ⇒  A = V Σ Uᵀ; re-apply the sign rule to the new left side.
        let mut out = SvdResult {
            left_singular_vectors: vm,
            singular_values: values,
            right_singular_vectors: u,
        };
        fix_left_signs(&mut out);
        out
    } else {
        SvdResult {
            left_singular_vectors: u,
            singular_values: values,
            right_singular_vectors: vm,
        }
    };
    Ok(result)
}

fn fix_left_signs(svd: &mut SvdResult) {
    let r = svd.singular_values.len();
    for k in 0..r {
        let col = svd.left_singular_vectors.column(k);
        let (idx, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        if col[idx] < 0.0 {
            svd.left_singular_vectors.column_mut(k).mapv_inplace(|x| -x);
            svd.right_singular_vectors.column_mut(k).mapv_inplace(|x| -x);
        }
    }
}

fn column_products(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (x, y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn orthogonal_complement_vector(existing: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for axis in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[axis] = 1.0;
        // Two Gram-Schmidt passes for stability.
        for _ in 0..2 {
            for e in existing.iter().filter(|e| !e.is_empty()) {
                let d: f64 = e.iter().zip(&cand).map(|(a, b)| a * b).sum();
                cand.iter_mut().zip(e).for_each(|(c, x)| *c -= d * x);
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = Some(cand);
        }
        if norm > 0.5 {
            break;
        }
    }
    let v = best.expect("dimension is positive");
    v.iter().map(|x| x / best_norm).collect()
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    let mut m = Array2::zeros((rows, cols.len()));
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).assign(&Array1::from(c.clone()));
    }
    m
}

/// Smallest k whose leading squared singular values carry at least
/// `epsilon` of the total energy.
pub fn rank_for_energy(singular_values: &[f64], epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(DmeaError::InvalidInput(format!("epsilon {epsilon} outside (0, 1]")));
    }
    if singular_values.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(DmeaError::InvalidInput("singular values must be finite and non-negative".into()));
    }
    if singular_values.windows(2).any(|w| w[1] > w[0]) {
        return Err(DmeaError::InvalidInput("singular values must be non-increasing".into()));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(DmeaError::InvalidInput("all singular values are zero".into()));
    }
    let target = epsilon * total;
    let mut cumulative = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        cumulative += s * s;
        if cumulative >= target {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.len())
}

/// Numerically stable softmax.
pub fn softmax_weights(coefficients: &[f64]) -> Result<Vec<f64>> {
    if coefficients.is_empty() {
        return Err(DmeaError::InvalidInput("softmax of an empty sequence".into()));
    }
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(DmeaError::InvalidInput("softmax input has non-finite entries".into()));
    }
    Ok(softmax_unchecked(coefficients))
}

pub(crate) fn softmax_unchecked(coefficients: &[f64]) -> Vec<f64> {
    let max = coefficients.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = coefficients.iter().map(|c| (c - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DmeaError::InvalidInput(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DmeaError::InvalidInput("cosine similarity with a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn frobenius_norm(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(m: ArrayView2<f64>) -> Result<f64> {
    Ok(svd(m)?.singular_values.first().copied().unwrap_or(0.0))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(DmeaError::InvalidInput(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DmeaError::OracleFailure(format!("objective not finite around coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Max-normalised relative error between two gradient vectors:
/// `|a - b| / max(|a|, |b|, floor)` taken over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over whole vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    l2_norm(&diff) / l2_norm(analytic).max(l2_norm(numeric)).max(floor)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks `BᵀB ≈ I` column-wise.
pub fn is_orthonormal(b: ArrayView2<f64>, tol: f64) -> bool {
    let gram = b.t().dot(&b);
    gram.indexed_iter().all(|((i, j), v)| {
        let target = if i == j { 1.0 } else { 0.0 };
        (v - target).abs() <= tol
    })
}

/// Sum of each column; handy for bias gradients.
pub(crate) fn column_sums(m: ArrayView2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}
