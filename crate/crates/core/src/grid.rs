//! The discrete function space `H` on `[0, T+1]` with zero Dirichlet data,
//! forward/second differences, the energy norm, the matrix realization of
//! the Dirichlet Laplacian and the embedding constants `c_m`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Multiplier callers apply to numerically estimated (non-exact) `c_m`.
pub const DEFAULT_SAFETY_FACTOR: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs T >= 1 interior nodes")]
    Empty,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("boundary values must be exactly zero (got x(0)={left}, x(T+1)={right})")]
    BoundaryNonzero { left: f64, right: f64 },
    #[error("index {k} outside the interior range 1..={t}")]
    IndexOutOfRange { k: usize, t: usize },
    #[error("embedding exponent must satisfy m >= 2, got {0}")]
    BadExponent(u32),
}

/// An element of `H`: values at nodes `0..=T+1`, zero at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(t: usize) -> Result<Self, GridError> {
        if t == 0 {
            return Err(GridError::Empty);
        }
        Ok(Self { values: vec![0.0; t + 2] })
    }

    /// Builds a grid function from its interior values `x(1), ..., x(T)`.
    pub fn from_interior(interior: &[f64]) -> Result<Self, GridError> {
        if interior.is_empty() {
            return Err(GridError::Empty);
        }
        let mut values = Vec::with_capacity(interior.len() + 2);
        values.push(0.0);
        values.extend_from_slice(interior);
        values.push(0.0);
        Ok(Self { values })
    }

    /// Builds a grid function from all `T+2` nodal values; the boundary
    /// entries must be exactly zero.
    pub fn from_values(values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() < 3 {
            return Err(GridError::Empty);
        }
        let (left, right) = (values[0], values[values.len() - 1]);
        if left != 0.0 || right != 0.0 {
            return Err(GridError::BoundaryNonzero { left, right });
        }
        // normalize -0.0 so serialization is canonical
        let mut values = values;
        let n = values.len();
        values[0] = 0.0;
        values[n - 1] = 0.0;
        Ok(Self { values })
    }

    /// Number of interior nodes `T`.
    pub fn t(&self) -> usize {
        self.values.len() - 2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interior(&self) -> &[f64] {
        &self.values[1..self.values.len() - 1]
    }

    /// Value at node `k` in `0..=T+1`.
    pub fn at(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Forward differences `Δx(k-1) = x(k) - x(k-1)` for `k = 1..=T+1`.
    pub fn delta(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `Δ²x(k-1) = x(k+1) - 2x(k) + x(k-1)` for interior `k`.
    pub fn second_difference(&self, k: usize) -> Result<f64, GridError> {
        let t = self.t();
        if k == 0 || k > t {
            return Err(GridError::IndexOutOfRange { k, t });
        }
        Ok(self.values[k + 1] - 2.0 * self.values[k] + self.values[k - 1])
    }

    /// The energy norm `(Σ |Δx(k-1)|²)^{1/2}`.
    pub fn h_norm(&self) -> f64 {
        self.h_dot(self).sqrt()
    }

    /// Inner product `Σ Δx(k-1) Δy(k-1)` inducing [`h_norm`](Self::h_norm).
    pub fn h_dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.t(), other.t());
        self.values
            .windows(2)
            .zip(other.values.windows(2))
            .map(|(a, b)| (a[1] - a[0]) * (b[1] - b[0]))
            .sum()
    }

    /// `self + alpha * other`, boundary preserved.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Self {
        debug_assert_eq!(self.t(), other.t());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Self { values }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let mut values: Vec<f64> = self.values.iter().map(|v| alpha * v).collect();
        let n = values.len();
        values[0] = 0.0;
        values[n - 1] = 0.0;
        Self { values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Distance in the energy norm.
    pub fn h_distance(&self, other: &Self) -> f64 {
        self.axpy(-1.0, other).h_norm()
    }
}

impl TryFrom<Vec<f64>> for GridFunction {
    type Error = GridError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_values(values)
    }
}

impl From<GridFunction> for Vec<f64> {
    fn from(g: GridFunction) -> Self {
        g.values
    }
}

impl std::ops::Add for &GridFunction {
    type Output = GridFunction;
    fn add(self, rhs: Self) -> GridFunction {
        self.axpy(1.0, rhs)
    }
}

impl std::ops::Sub for &GridFunction {
    type Output = GridFunction;
    fn sub(self, rhs: Self) -> GridFunction {
        self.axpy(-1.0, rhs)
    }
}

/// The `T×T` tridiagonal matrix with 2 on the diagonal and -1 off it, so that
/// `½ xᵀLx = Σ |Δx(k-1)|²/2` for the interior values of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirichletLaplacian {
    dim: usize,
}

impl DirichletLaplacian {
    pub fn new(t: usize) -> Result<Self, GridError> {
        if t == 0 {
            return Err(GridError::Empty);
        }
        Ok(Self { dim: t })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `L v` for an interior vector `v` of length `T`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        debug_assert_eq!(v.len(), n);
        (0..n)
            .map(|i| {
                let left = if i > 0 { v[i - 1] } else { 0.0 };
                let right = if i + 1 < n { v[i + 1] } else { 0.0 };
                2.0 * v[i] - left - right
            })
            .collect()
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim;
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Maximum absolute row sum `‖L‖∞`.
    pub fn inf_norm(&self) -> f64 {
        match self.dim {
            1 => 2.0,
            2 => 3.0,
            _ => 4.0,
        }
    }

    /// Closed-form spectrum `4 sin²(jπ / (2(T+1)))`, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = std::f64::consts::PI / (2.0 * (self.dim as f64 + 1.0));
        (1..=self.dim)
            .map(|j| {
                let s = (j as f64 * h).sin();
                4.0 * s * s
            })
            .collect()
    }

    /// Smallest eigenvalue by bisection on the inertia of `L - σI`.
    ///
    /// The pivots of `L - σI = LDLᵀ` are tracked as `q_i = d_i - 1`, which
    /// satisfy `q_1 = 1 - σ`, `q_i = q_{i-1}/(1 + q_{i-1}) - σ`. Unlike the
    /// textbook recurrence `d_i = 2 - σ - 1/d_{i-1}`, this never forms
    /// `2 - σ`, so tiny eigenvalues keep their relative accuracy.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.dim;
        if n == 1 {
            return 2.0;
        }
        let below = |sigma: f64| -> usize {
            let mut q = 1.0 - sigma;
            let mut count = usize::from(1.0 + q < 0.0);
            for _ in 1..n {
                let mut d = 1.0 + q;
                if d == 0.0 {
                    d = f64::MIN_POSITIVE;
                }
                q = q / d - sigma;
                if 1.0 + q < 0.0 {
                    count += 1;
                }
            }
            count
        };
        // Rayleigh quotient of the all-ones vector bounds λ_min from above.
        let mut lo = 0.0_f64;
        let mut hi = 2.0 / n as f64;
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Cholesky factor `L = CCᵀ` of the lower bidiagonal form, returned as
    /// (diagonal, subdiagonal).
    pub fn cholesky(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n.saturating_sub(1));
        diag.push(2.0_f64.sqrt());
        for i in 1..n {
            let l = -1.0 / diag[i - 1];
            sub.push(l);
            diag.push((2.0 - l * l).sqrt());
        }
        (diag, sub)
    }

    /// Solves `(L + diag(shift)) v = rhs` by the Thomas algorithm; `None` if a
    /// pivot vanishes.
    pub fn solve_shifted(&self, shift: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
        let n = self.dim;
        let diag: Vec<f64> = (0..n).map(|i| 2.0 + shift[i]).collect();
        let off = vec![-1.0; n.saturating_sub(1)];
        solve_symmetric_tridiagonal(&diag, &off, rhs)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.solve_shifted(&vec![0.0; self.dim], rhs)
            .expect("Dirichlet Laplacian is positive definite")
    }

    /// Diagonal of `L⁻¹`: `k(T+1-k)/(T+1)`.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n1 = self.dim as f64 + 1.0;
        (1..=self.dim).map(|k| k as f64 * (n1 - k as f64) / n1).collect()
    }
}

/// Thomas algorithm for a symmetric tridiagonal system.
pub fn solve_symmetric_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    if n > 1 {
        c[0] = off[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - off[i - 1] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        if i + 1 < n {
            c[i] = off[i] / denom;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n.saturating_sub(1)).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Some(x)
}

/// Number of eigenvalues strictly below `sigma` of the symmetric tridiagonal
/// matrix with the given diagonal and off-diagonal (Sturm count).
pub fn sturm_count(diag: &[f64], off: &[f64], sigma: f64) -> usize {
    let mut count = 0;
    let mut d = diag[0] - sigma;
    if d < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let piv = if d == 0.0 { f64::EPSILON * (1.0 + sigma.abs()) } else { d };
        d = diag[i] - sigma - off[i - 1] * off[i - 1] / piv;
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest eigenvalue of a symmetric tridiagonal matrix by Sturm bisection
/// inside the Gershgorin interval.
pub fn tridiagonal_min_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 }
            + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let scale = 1.0 + lo.abs().max(hi.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 4.0 * f64::EPSILON * scale {
            break;
        }
        if sturm_count(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The embedding constant `c_m` for a given `T`, with the maximizer that
/// attains (m = 2) or certifies the lower estimate (m > 2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConstant {
    pub m: u32,
    pub t: usize,
    pub value: f64,
    /// True for m = 2 (eigenvalue), false for the numerical lower estimate.
    pub exact: bool,
    pub maximizer: GridFunction,
}

impl EmbeddingConstant {
    /// A value safe to use as an upper bound: exact constants are returned
    /// unchanged, estimates are inflated by `safety`.
    pub fn upper_bound(&self, safety: f64) -> f64 {
        if self.exact {
            self.value
        } else {
            self.value * safety
        }
    }
}

/// `Σ |x(k)|^m / Σ |Δx(k-1)|^m`.
pub fn embedding_ratio(x: &GridFunction, m: u32) -> f64 {
    let p = m as f64;
    let num: f64 = x.interior().iter().map(|v| v.abs().powf(p)).sum();
    let den: f64 = x.delta().iter().map(|v| v.abs().powf(p)).sum();
    num / den
}

/// `c_2 = 1/λ_min(L)`.
pub fn c2(t: usize) -> Result<f64, GridError> {
    Ok(1.0 / DirichletLaplacian::new(t)?.min_eigenvalue())
}

pub fn embedding_constant(m: u32, t: usize) -> Result<EmbeddingConstant, GridError> {
    if m < 2 {
        return Err(GridError::BadExponent(m));
    }
    let lap = DirichletLaplacian::new(t)?;
    let lambda = lap.min_eigenvalue();
    let eigvec = min_eigenvector(&lap);
    if m == 2 {
        return Ok(EmbeddingConstant { m, t, value: 1.0 / lambda, exact: true, maximizer: eigvec });
    }
    if t == 1 {
        let x = GridFunction::from_interior(&[1.0])?;
        let value = embedding_ratio(&x, m);
        return Ok(EmbeddingConstant { m, t, value, exact: true, maximizer: x });
    }

    // Multi-start ascent of log R(x) on the unit sphere, preconditioned by L⁻¹.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x5eed ^ m as u64);
    let mut starts = vec![eigvec.interior().to_vec()];
    starts.push(vec![1.0; t]);
    for _ in 0..6 {
        let v: Vec<f64> = (0..t).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        starts.push(v);
    }
    let mut best = (f64::NEG_INFINITY, eigvec.clone());
    for start in starts {
        let (ratio, x) = ascend_ratio(&lap, start, m);
        if ratio > best.0 {
            best = (ratio, x);
        }
    }
    Ok(EmbeddingConstant { m, t, value: best.0, exact: false, maximizer: best.1 })
}

fn min_eigenvector(lap: &DirichletLaplacian) -> GridFunction {
    let t = lap.dim();
    let mut v = vec![1.0; t];
    for _ in 0..400 {
        let w = lap.solve(&v);
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        let next: Vec<f64> = w.iter().map(|a| a / norm).collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < 1e-15 {
            break;
        }
    }
    GridFunction::from_interior(&v).expect("t >= 1")
}

fn log_ratio_and_grad(x: &[f64], m: u32) -> (f64, Vec<f64>) {
    let p = m as f64;
    let t = x.len();
    let num: f64 = x.iter().map(|v| v.abs().powf(p)).sum();
    let diffs: Vec<f64> = (0..=t)
        .map(|i| {
            let right = if i < t { x[i] } else { 0.0 };
            let left = if i > 0 { x[i - 1] } else { 0.0 };
            right - left
        })
        .collect();
    let den: f64 = diffs.iter().map(|v| v.abs().powf(p)).sum();
    let dpow = |v: f64| p * v.abs().powf(p - 1.0) * v.signum();
    let grad = (0..t)
        .map(|j| dpow(x[j]) / num - (dpow(diffs[j]) - dpow(diffs[j + 1])) / den)
        .collect();
    (num.ln() - den.ln(), grad)
}

fn ascend_ratio(lap: &DirichletLaplacian, start: Vec<f64>, m: u32) -> (f64, GridFunction) {
    let normalize = |v: Vec<f64>| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect::<Vec<f64>>()
    };
    let mut x = normalize(start);
    let (mut f, mut g) = log_ratio_and_grad(&x, m);
    let mut step: f64 = 1.0;
    for _ in 0..5000 {
        let dir = lap.solve(&g);
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope <= 1e-28 {
            break;
        }
        let mut accepted = false;
        step = (step * 4.0).min(1e6);
        while step > 1e-16 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let trial = normalize(trial);
            let (ft, gt) = log_ratio_and_grad(&trial, m);
            if ft.is_finite() && ft >= f + 1e-4 * step * slope {
                x = trial;
                f = ft;
                g = gt;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (f.exp(), GridFunction::from_interior(&x).expect("t >= 1"))
}

/// Upper bound on `max_k |x(k)|` over the ball `‖x‖ ≤ r`.
pub fn sup_norm_bound(t: usize, r: f64) -> Result<f64, GridError> {
    let lap = DirichletLaplacian::new(t)?;
    let worst = lap.inverse_diagonal().into_iter().fold(0.0, f64::max);
    Ok(r * worst.sqrt())
}

/// Draws a point uniformly from the ellipsoid `{x ∈ H : ‖x‖ ≤ radius}`.
pub fn sample_in_ball<R: Rng + ?Sized>(t: usize, radius: f64, rng: &mut R) -> GridFunction {
    let lap = DirichletLaplacian::new(t).expect("t >= 1");
    let mut w: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
    let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let rho = radius * rng.random::<f64>().powf(1.0 / t as f64);
    for v in &mut w {
        *v *= rho / norm;
    }
    // ‖x‖² = ‖Cᵀx‖², so x = C⁻ᵀ w maps the Euclidean ball onto the H-ball.
    let (diag, sub) = lap.cholesky();
    let mut x = vec![0.0; t];
    for i in (0..t).rev() {
        let upper = if i + 1 < t { sub[i] * x[i + 1] } else { 0.0 };
        x[i] = (w[i] - upper) / diag[i];
    }
    GridFunction::from_interior(&x).expect("t >= 1")
}
