//! Numerical certification of the structural hypotheses on `F`: quadratic
//! growth bounds with constants below `1/(2c₂)`, convexity in `x`, concavity
//! in `y`, and the a priori radii of the balls that contain every saddle
//! point.
//!
//! Sampled checks cannot prove a global property. Reports therefore carry
//! the sampling box and density; the Hessian test is an exact decision only
//! when the relevant second partial does not depend on `x` or `y`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Var;
use crate::grid::{self, tridiagonal_min_eigenvalue, GridFunction};
use crate::problem::{ParameterFunction, Partial, ProblemError, ProblemSpec};

/// Default slack on every inequality margin.
pub const MARGIN_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HypothesisError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("margin violated: alpha{which} = {alpha} must be < 1/(2 c2) = {limit}")]
    MarginViolated { which: u8, alpha: f64, limit: f64 },
    #[error("certificate has {got} gamma values, problem has T = {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Constants witnessing the lower growth bound in `x` (for the fixed
/// `anchor_y`) and the upper growth bound in `y` (for the fixed `anchor_x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub alpha1: f64,
    pub beta1: f64,
    pub gamma1: Vec<f64>,
    pub alpha2: f64,
    pub beta2: f64,
    pub gamma2: Vec<f64>,
    /// Half-width of the sampling box for the free scalar argument.
    pub box_radius: f64,
    pub anchor_y: GridFunction,
    pub anchor_x: GridFunction,
}

impl GrowthCertificate {
    /// A certificate with the given constants and zero anchors.
    pub fn uniform(t: usize, alpha: f64, beta: f64, gamma1: f64, gamma2: f64, box_radius: f64) -> Self {
        let zero = GridFunction::zeros(t).expect("t >= 1");
        Self {
            alpha1: alpha,
            beta1: beta,
            gamma1: vec![gamma1; t],
            alpha2: alpha,
            beta2: beta,
            gamma2: vec![gamma2; t],
            box_radius,
            anchor_y: zero.clone(),
            anchor_x: zero,
        }
    }

    fn check_dims(&self, t: usize) -> Result<(), HypothesisError> {
        for got in [self.gamma1.len(), self.gamma2.len(), self.anchor_x.t(), self.anchor_y.t()] {
            if got != t {
                return Err(HypothesisError::Dimension { expected: t, got });
            }
        }
        Ok(())
    }

    /// Checks `alpha_i < 1/(2c₂)` for both constants.
    pub fn check_alpha(&self, c2: f64) -> Result<(), HypothesisError> {
        let limit = 0.5 / c2;
        for (which, alpha) in [(1, self.alpha1), (2, self.alpha2)] {
            if !(alpha < limit) {
                return Err(HypothesisError::MarginViolated { which, alpha, limit });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthBound {
    /// `F(k, s, anchor_y(k), u) ≥ -α₁s² + β₁s + γ₁(k)`.
    Lower,
    /// `F(k, anchor_x(k), s, u) ≤ α₂s² + β₂s + γ₂(k)`.
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthViolation {
    pub bound: GrowthBound,
    pub k: usize,
    pub s: f64,
    pub u: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub passed: bool,
    pub alpha_limit: f64,
    /// Set when an `alpha_i` is not below `1/(2c₂)`.
    pub margin_violated: Option<String>,
    pub worst_lower_margin: f64,
    pub worst_upper_margin: f64,
    pub counterexample: Option<GrowthViolation>,
    pub box_radius: f64,
    pub density: usize,
    pub evaluations: usize,
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> + Clone {
    let n = n.max(2);
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Dense-grid check of both growth bounds over `s ∈ [-R, R]`, `u ∈ [-D, D]`
/// and `k ∈ 1..=T`.
pub fn verify_growth(
    spec: &ProblemSpec,
    cert: &GrowthCertificate,
    density: usize,
    tol: f64,
) -> Result<GrowthReport, HypothesisError> {
    let t = spec.t();
    cert.check_dims(t)?;
    let c2 = grid::c2(t).map_err(ProblemError::from)?;
    let margin_violated = cert.check_alpha(c2).err().map(|e| e.to_string());
    let r = cert.box_radius;
    let d = spec.bound();
    let mut worst_lower = f64::INFINITY;
    let mut worst_upper = f64::INFINITY;
    let mut worst: Option<GrowthViolation> = None;
    let mut evaluations = 0;
    let mut record = |bound, k, s, u, margin: f64, worst_slot: &mut f64| {
        if margin < *worst_slot {
            *worst_slot = margin;
        }
        if margin < -tol && worst.as_ref().is_none_or(|w| margin < w.margin) {
            worst = Some(GrowthViolation { bound, k, s, u, margin });
        }
    };
    for k in 1..=t {
        let (ay, ax) = (cert.anchor_y.at(k), cert.anchor_x.at(k));
        for u in linspace(-d, d, density) {
            for s in linspace(-r, r, density) {
                let lower = -cert.alpha1 * s * s + cert.beta1 * s + cert.gamma1[k - 1];
                let f = spec.integrand(k, s, ay, u).map_err(ProblemError::from)?;
                record(GrowthBound::Lower, k, s, u, f - lower, &mut worst_lower);
                let upper = cert.alpha2 * s * s + cert.beta2 * s + cert.gamma2[k - 1];
                let f = spec.integrand(k, ax, s, u).map_err(ProblemError::from)?;
                record(GrowthBound::Upper, k, s, u, upper - f, &mut worst_upper);
                evaluations += 2;
            }
        }
    }
    let passed = margin_violated.is_none() && worst.is_none();
    Ok(GrowthReport {
        passed,
        alpha_limit: 0.5 / c2,
        margin_violated,
        worst_lower_margin: worst_lower,
        worst_upper_margin: worst_upper,
        counterexample: worst,
        box_radius: r,
        density,
        evaluations,
    })
}

/// Fits a certificate on the same grid `verify_growth` samples: the alphas
/// are `alpha_fraction / (2c₂)`, the betas zero, and each gamma is the
/// tightest constant on the sampled box.
pub fn fit_certificate(
    spec: &ProblemSpec,
    anchor_x: GridFunction,
    anchor_y: GridFunction,
    box_radius: f64,
    density: usize,
    alpha_fraction: f64,
) -> Result<GrowthCertificate, HypothesisError> {
    let t = spec.t();
    let c2 = grid::c2(t).map_err(ProblemError::from)?;
    let alpha = alpha_fraction * 0.5 / c2;
    let d = spec.bound();
    let mut gamma1 = vec![f64::INFINITY; t];
    let mut gamma2 = vec![f64::NEG_INFINITY; t];
    for k in 1..=t {
        for u in linspace(-d, d, density) {
            for s in linspace(-box_radius, box_radius, density) {
                let f = spec.integrand(k, s, anchor_y.at(k), u).map_err(ProblemError::from)?;
                gamma1[k - 1] = f64::min(gamma1[k - 1], f + alpha * s * s);
                let f = spec.integrand(k, anchor_x.at(k), s, u).map_err(ProblemError::from)?;
                gamma2[k - 1] = f64::max(gamma2[k - 1], f - alpha * s * s);
            }
        }
    }
    let cert = GrowthCertificate {
        alpha1: alpha,
        beta1: 0.0,
        gamma1,
        alpha2: alpha,
        beta2: 0.0,
        gamma2,
        box_radius,
        anchor_y,
        anchor_x,
    };
    cert.check_dims(t)?;
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CurvatureViolation {
    /// `J` at the midpoint exceeds (convexity) or falls below (concavity) the
    /// chord average by `excess`.
    Midpoint { a: GridFunction, b: GridFunction, excess: f64 },
    /// The relevant Hessian block has the wrong definiteness at `point`.
    Hessian { point: GridFunction, eigenvalue: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub passed: bool,
    /// True when the Hessian block is independent of `x` and `y`, so the
    /// eigenvalue test decides the property without sampling error.
    pub exact: bool,
    /// Smallest eigenvalue of `L + diag F_xx` (convexity) or of
    /// `L - diag F_yy` (concavity) over the sampled points.
    pub min_eigenvalue: Option<f64>,
    pub samples: usize,
    pub box_radius: f64,
    pub counterexample: Option<CurvatureViolation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Curvature {
    ConvexInX,
    ConcaveInY,
}

fn random_grid(t: usize, r: f64, rng: &mut ChaCha8Rng) -> GridFunction {
    let v: Vec<f64> = (0..t).map(|_| r * (2.0 * rng.random::<f64>() - 1.0)).collect();
    GridFunction::from_interior(&v).expect("t >= 1")
}

fn check_curvature(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    fixed: &GridFunction,
    box_radius: f64,
    samples: usize,
    seed: u64,
    tol: f64,
    which: Curvature,
) -> Result<CurvatureReport, ProblemError> {
    let t = spec.t();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // J along the free argument; for concavity the sign is flipped so both
    // cases test convexity.
    let j = |free: &GridFunction| -> Result<f64, ProblemError> {
        match which {
            Curvature::ConvexInX => spec.action(u, free, fixed),
            Curvature::ConcaveInY => Ok(-spec.action(u, fixed, free)?),
        }
    };
    let mut counterexample = None;
    let mut worst_excess = -f64::INFINITY;
    for _ in 0..samples.max(1) {
        let a = random_grid(t, box_radius, &mut rng);
        let b = random_grid(t, box_radius, &mut rng);
        let mid = a.axpy(1.0, &b).scale(0.5);
        let (ja, jb, jm) = (j(&a)?, j(&b)?, j(&mid)?);
        let chord = 0.5 * (ja + jb);
        let excess = jm - chord;
        if excess > tol * (1.0 + chord.abs()) && excess > worst_excess {
            worst_excess = excess;
            counterexample = Some(CurvatureViolation::Midpoint { a, b, excess });
        }
    }

    let mut exact = false;
    let mut min_eigenvalue = None;
    if let Some(second) = &spec.field().second {
        let block = match which {
            Curvature::ConvexInX => &second.fxx,
            Curvature::ConcaveInY => &second.fyy,
        };
        exact = !block.depends_on(Var::X) && !block.depends_on(Var::Y);
        let points = if exact { 1 } else { samples.max(1) };
        let mut lowest = f64::INFINITY;
        let mut hessian_violation = None;
        for _ in 0..points {
            let p = random_grid(t, box_radius, &mut rng);
            let diag: Vec<f64> = match which {
                Curvature::ConvexInX => spec
                    .tabulate(Partial::Fxx, u, &p, fixed)?
                    .into_iter()
                    .map(|v| 2.0 + v)
                    .collect(),
                Curvature::ConcaveInY => spec
                    .tabulate(Partial::Fyy, u, fixed, &p)?
                    .into_iter()
                    .map(|v| 2.0 - v)
                    .collect(),
            };
            let off = vec![-1.0; t - 1];
            let lambda = tridiagonal_min_eigenvalue(&diag, &off);
            if lambda < lowest {
                lowest = lambda;
                if lambda < -tol {
                    hessian_violation = Some(CurvatureViolation::Hessian { point: p, eigenvalue: lambda });
                }
            }
        }
        min_eigenvalue = Some(lowest);
        if let Some(h) = hessian_violation {
            // an exact Hessian verdict outranks a sampled midpoint
            if exact || counterexample.is_none() {
                counterexample = Some(h);
            }
        }
    }
    Ok(CurvatureReport {
        passed: counterexample.is_none(),
        exact,
        min_eigenvalue,
        samples,
        box_radius,
        counterexample,
    })
}

/// Tests convexity of `x ↦ J_u(x, y)` by midpoint sampling and, when second
/// partials exist, by `λ_min(L + diag F_xx) ≥ -tol`.
pub fn check_convexity_x(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    y: &GridFunction,
    box_radius: f64,
    samples: usize,
    seed: u64,
) -> Result<CurvatureReport, ProblemError> {
    check_curvature(spec, u, y, box_radius, samples, seed, MARGIN_TOL, Curvature::ConvexInX)
}

/// Mirror image of [`check_convexity_x`] for `y ↦ J_u(x, y)`, using
/// `-L + diag F_yy ⪯ 0`.
pub fn check_concavity_y(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    x: &GridFunction,
    box_radius: f64,
    samples: usize,
    seed: u64,
) -> Result<CurvatureReport, ProblemError> {
    check_curvature(spec, u, x, box_radius, samples, seed, MARGIN_TOL, Curvature::ConcaveInY)
}

/// Radii of the balls `B₁ ∋ x*`, `B₂ ∋ y*` together with the constants of
/// the coercive minorant and anti-coercive majorant they come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallRadii {
    pub r1: f64,
    pub r2: f64,
    pub beta_tilde1: f64,
    pub gamma_tilde1: f64,
    pub beta_tilde2: f64,
    pub gamma_tilde2: f64,
    /// Lower bound on the saddle value.
    pub lower_value: f64,
    /// Upper bound on the saddle value.
    pub upper_value: f64,
}

/// Largest root of `a r² - b r - c = 0` (zero when the quadratic has none).
fn positive_root(a: f64, b: f64, c: f64) -> f64 {
    let disc = (b * b + 4.0 * a * c).max(0.0);
    ((b + disc.sqrt()) / (2.0 * a)).max(0.0)
}

/// Ball radii from a certificate.
///
/// With `a₁ = ½ - c₂α₁⁺`, `β̃₁ = |β₁|√(Tc₂)` the coercive minorant is
/// `J_u(x, anchor_y) ≥ a₁‖x‖² - β̃₁‖x‖ + γ̃₁`, where `γ̃₁ = Σ min(γ₁(k), 0) -
/// ½‖anchor_y‖²`; symmetrically `J_u(anchor_x, y) ≤ -a₂‖y‖² + β̃₂‖y‖ + γ̃₂`
/// with `γ̃₂ = Σ max(γ₂(k), 0) + ½‖anchor_x‖²`. The saddle value lies between
/// `ℓ = Σγ₁ - ½‖anchor_y‖² - β̃₁²/(4a₁)` and
/// `υ = Σγ₂ + ½‖anchor_x‖² + β̃₂²/(4a₂)`, so `-a₂‖y*‖² + β̃₂‖y*‖ + γ̃₂ ≥ ℓ` and
/// `a₁‖x*‖² - β̃₁‖x*‖ + γ̃₁ ≤ υ`, which give `r₂` and `r₁`.
pub fn ball_radii(cert: &GrowthCertificate, c2: f64, t: usize) -> Result<BallRadii, HypothesisError> {
    cert.check_dims(t)?;
    cert.check_alpha(c2)?;
    let a1 = 0.5 - c2 * cert.alpha1.max(0.0);
    let a2 = 0.5 - c2 * cert.alpha2.max(0.0);
    let norm_equiv = (t as f64 * c2).sqrt();
    let beta_tilde1 = cert.beta1.abs() * norm_equiv;
    let beta_tilde2 = cert.beta2.abs() * norm_equiv;
    let half_ay = 0.5 * cert.anchor_y.h_dot(&cert.anchor_y);
    let half_ax = 0.5 * cert.anchor_x.h_dot(&cert.anchor_x);
    let gamma_tilde1 = cert.gamma1.iter().map(|g| g.min(0.0)).sum::<f64>() - half_ay;
    let gamma_tilde2 = cert.gamma2.iter().map(|g| g.max(0.0)).sum::<f64>() + half_ax;
    let lower_value =
        cert.gamma1.iter().sum::<f64>() - half_ay - beta_tilde1 * beta_tilde1 / (4.0 * a1);
    let upper_value =
        cert.gamma2.iter().sum::<f64>() + half_ax + beta_tilde2 * beta_tilde2 / (4.0 * a2);
    Ok(BallRadii {
        r1: radius_from(a1, beta_tilde1, upper_value - gamma_tilde1),
        r2: radius_from(a2, beta_tilde2, gamma_tilde2 - lower_value),
        beta_tilde1,
        gamma_tilde1,
        beta_tilde2,
        gamma_tilde2,
        lower_value,
        upper_value,
    })
}

/// Radius beyond which `a r² - β̃ r > gap`.
pub fn radius_from(a: f64, beta_tilde: f64, gap: f64) -> f64 {
    positive_root(a, beta_tilde, gap)
}

/// All hypothesis checks for one problem, parameter and certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub c2: f64,
    pub growth: GrowthReport,
    pub convexity_x: CurvatureReport,
    pub concavity_y: CurvatureReport,
    pub radii: Option<BallRadii>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub density: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { density: 101, samples: 200, seed: 0 }
    }
}

pub fn certify(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    cert: &GrowthCertificate,
    opts: CheckOptions,
) -> Result<CertificationReport, HypothesisError> {
    let c2 = grid::c2(spec.t()).map_err(ProblemError::from)?;
    let growth = verify_growth(spec, cert, opts.density, MARGIN_TOL)?;
    let convexity_x =
        check_convexity_x(spec, u, &cert.anchor_y, cert.box_radius, opts.samples, opts.seed)?;
    let concavity_y = check_concavity_y(
        spec,
        u,
        &cert.anchor_x,
        cert.box_radius,
        opts.samples,
        opts.seed.wrapping_add(1),
    )?;
    let radii = ball_radii(cert, c2, spec.t()).ok();
    let passed = growth.passed && convexity_x.passed && concavity_y.passed && radii.is_some();
    Ok(CertificationReport { c2, growth, convexity_x, concavity_y, radii, passed })
}
