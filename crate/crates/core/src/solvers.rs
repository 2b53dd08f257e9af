//! Saddle-point solvers for `J_u`: extragradient on the monotone operator
//! `G = (∇ₓJ, -∇_yJ)`, damped Newton on the first-order system, and nested
//! max-min / min-max optimization. Candidates are checked a posteriori by
//! [`verify_saddle`] and grouped into a [`SaddleSet`] by multistart.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{sample_in_ball, solve_symmetric_tridiagonal, GridFunction};
use crate::problem::{
    product_distance, Method, ParameterFunction, Partial, ProblemError, ProblemSpec, SaddleCandidate,
};

/// Condition number beyond which the Newton Jacobian counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e14;
/// Iterations over which the divergence detector compares `‖G‖`.
pub const DIVERGENCE_WINDOW: usize = 50;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DEFAULT_CLUSTER_RADIUS: f64 = 1e-4;
/// Ratio of inner to outer tolerance in the nested solver.
pub const INNER_TOL_RATIO: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("step too large: ‖G‖ = {grad_norm:e} grew more than tenfold by iteration {iteration}")]
    StepTooLarge { iteration: usize, grad_norm: f64 },
    #[error("singular Jacobian (condition estimate {condition:e})")]
    SingularJacobian { condition: f64 },
    #[error("inner minimization failed after {iterations} iterations (gradient norm {grad_norm:e})")]
    InnerSolveFailed { iterations: usize, grad_norm: f64 },
    #[error("outer ascent stalled after {iterations} iterations (gradient norm {grad_norm:e})")]
    OuterStall { iterations: usize, grad_norm: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Extragradient step; estimated as `0.9/Λ` when absent.
    pub step: Option<f64>,
    pub tol_grad: f64,
    pub tol_res: f64,
    pub max_iter: usize,
    pub multistart: usize,
    pub seed: u64,
    pub cluster_radius: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Newton,
            step: None,
            tol_grad: 1e-10,
            tol_res: 1e-10,
            max_iter: 100_000,
            multistart: 8,
            seed: 0,
            cluster_radius: DEFAULT_CLUSTER_RADIUS,
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SolverError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tol_grad", self.tol_grad)?;
        positive("tol_res", self.tol_res)?;
        positive("cluster_radius", self.cluster_radius)?;
        if let Some(s) = self.step {
            positive("step", s)?;
        }
        if self.max_iter == 0 {
            return Err(SolverError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if self.multistart == 0 {
            return Err(SolverError::InvalidConfig("multistart must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub grad_norm: f64,
    pub residual: f64,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub candidate: SaddleCandidate,
    pub trace: Vec<TraceRow>,
}

fn gf(v: &[f64]) -> GridFunction {
    GridFunction::from_interior(v).expect("dimension is at least 1")
}

fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm_pair(a: &[f64], b: &[f64]) -> f64 {
    norm2(a).hypot(norm2(b))
}

fn inf_pair(a: &[f64], b: &[f64]) -> f64 {
    a.iter().chain(b).fold(0.0, |m, v| f64::max(m, v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn axpy(a: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    a.iter().zip(d).map(|(p, q)| p + t * q).collect()
}

/// `G(x, y) = (∇ₓJ_u, -∇_yJ_u)`.
fn operator(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    x: &[f64],
    y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ProblemError> {
    let (gx, gy) = spec.grad(u, &gf(x), &gf(y))?;
    Ok((gx, gy.into_iter().map(|v| -v).collect()))
}

/// Trace rows are kept for the first hundred iterations, then every
/// hundredth.
fn recorded(iter: usize) -> bool {
    iter <= 100 || iter.is_multiple_of(100)
}

fn trace_row(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    iter: usize,
    x: &[f64],
    y: &[f64],
    gx: &[f64],
    gy: &[f64],
) -> Result<TraceRow, ProblemError> {
    Ok(TraceRow {
        iter,
        grad_norm: norm_pair(gx, gy),
        residual: inf_pair(gx, gy),
        value: spec.action(u, &gf(x), &gf(y))?,
    })
}

fn push_final(trace: &mut Vec<TraceRow>, row: TraceRow) {
    if trace.last().is_none_or(|r| r.iter != row.iter) {
        trace.push(row);
    }
}

/// Spectral-norm estimate of the Jacobian of `G` at one point: power
/// iteration on `JᵀJ` with exact second partials, otherwise on `J` with
/// central differences.
fn jacobian_norm(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    x: &[f64],
    y: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64, ProblemError> {
    let t = spec.t();
    let lap = spec.lap();
    let mut v: Vec<f64> = (0..2 * t).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm2(&v);
    v.iter_mut().for_each(|c| *c /= n);
    let mut estimate = 0.0_f64;
    if spec.has_second_partials() {
        let (gx, gy) = (gf(x), gf(y));
        let dxx = spec.tabulate(Partial::Fxx, u, &gx, &gy)?;
        let dxy = spec.tabulate(Partial::Fxy, u, &gx, &gy)?;
        let dyy = spec.tabulate(Partial::Fyy, u, &gx, &gy)?;
        let apply = |v: &[f64], transpose: bool| -> Vec<f64> {
            let (a, b) = v.split_at(t);
            let (la, lb) = (lap.apply(a), lap.apply(b));
            let s = if transpose { -1.0 } else { 1.0 };
            let mut out = Vec::with_capacity(2 * t);
            out.extend((0..t).map(|i| la[i] + dxx[i] * a[i] + s * dxy[i] * b[i]));
            out.extend((0..t).map(|i| -s * dxy[i] * a[i] + lb[i] - dyy[i] * b[i]));
            out
        };
        for _ in 0..300 {
            let w = apply(&apply(&v, false), true);
            let nw = norm2(&w);
            if nw == 0.0 {
                break;
            }
            let next = nw.sqrt();
            let done = (next - estimate).abs() <= 1e-12 * next;
            estimate = next;
            v = w.into_iter().map(|c| c / nw).collect();
            if done {
                break;
            }
        }
    } else {
        let h = 1e-6 * (1.0 + norm_pair(x, y));
        for _ in 0..100 {
            let (a, b) = v.split_at(t);
            let (px, py) = operator(spec, u, &axpy(x, h, a), &axpy(y, h, b))?;
            let (mx, my) = operator(spec, u, &axpy(x, -h, a), &axpy(y, -h, b))?;
            let w: Vec<f64> = px
                .iter()
                .zip(&mx)
                .chain(py.iter().zip(&my))
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect();
            let nw = norm2(&w);
            if nw == 0.0 {
                break;
            }
            estimate = estimate.max(nw);
            v = w.into_iter().map(|c| c / nw).collect();
        }
    }
    Ok(estimate)
}

/// Lipschitz estimate `Λ` of `G`: the largest Jacobian norm at `z0` and at
/// four seeded points of a ball around it.
pub fn lipschitz_estimate(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    x0: &GridFunction,
    y0: &GridFunction,
    seed: u64,
) -> Result<f64, ProblemError> {
    let t = spec.t();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 1f64.max(x0.h_norm()).max(y0.h_norm());
    let mut lambda = jacobian_norm(spec, u, x0.interior(), y0.interior(), &mut rng)?;
    for _ in 0..4 {
        let x = x0 + &sample_in_ball(t, radius, &mut rng);
        let y = y0 + &sample_in_ball(t, radius, &mut rng);
        // points outside the domain of F are skipped
        if let Ok(l) = jacobian_norm(spec, u, x.interior(), y.interior(), &mut rng) {
            lambda = lambda.max(l);
        }
    }
    Ok(lambda)
}

/// Extragradient iteration `z½ = z - γG(z)`, `z⁺ = z - γG(z½)`.
pub fn extragradient(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    z0: (&GridFunction, &GridFunction),
    cfg: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let gamma = match cfg.step {
        Some(s) => s,
        None => {
            let lambda = lipschitz_estimate(spec, u, z0.0, z0.1, cfg.seed)?;
            0.9 / lambda.max(f64::MIN_POSITIVE)
        }
    };
    let mut x = z0.0.interior().to_vec();
    let mut y = z0.1.interior().to_vec();
    let (mut gx, mut gy) = operator(spec, u, &x, &y)?;
    let mut gnorm = norm_pair(&gx, &gy);
    let mut best = (gnorm, x.clone(), y.clone());
    let mut history = VecDeque::with_capacity(DIVERGENCE_WINDOW + 1);
    history.push_back(gnorm);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        if recorded(iterations) {
            trace.push(trace_row(spec, u, iterations, &x, &y, &gx, &gy)?);
        }
        if gnorm <= cfg.tol_grad {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        let xh = axpy(&x, -gamma, &gx);
        let yh = axpy(&y, -gamma, &gy);
        let (hx, hy) = operator(spec, u, &xh, &yh)?;
        x = axpy(&x, -gamma, &hx);
        y = axpy(&y, -gamma, &hy);
        (gx, gy) = operator(spec, u, &x, &y)?;
        gnorm = norm_pair(&gx, &gy);
        iterations += 1;
        if !gnorm.is_finite() {
            return Err(SolverError::StepTooLarge { iteration: iterations, grad_norm: gnorm });
        }
        history.push_back(gnorm);
        if history.len() > DIVERGENCE_WINDOW {
            let past = history.pop_front().expect("nonempty");
            if gnorm > DIVERGENCE_FACTOR * past {
                return Err(SolverError::StepTooLarge { iteration: iterations, grad_norm: gnorm });
            }
        }
        if gnorm < best.0 {
            best = (gnorm, x.clone(), y.clone());
        }
    }
    if !converged {
        (_, x, y) = best;
        (gx, gy) = operator(spec, u, &x, &y)?;
    }
    push_final(&mut trace, trace_row(spec, u, iterations, &x, &y, &gx, &gy)?);
    let candidate =
        SaddleCandidate::evaluate(spec, u, gf(&x), gf(&y), Method::Extragradient, iterations, converged)?;
    Ok(SolveOutcome { candidate, trace })
}

/// Jacobian of `R = (∇ₓJ, -∇_yJ)`.
fn newton_jacobian(spec: &ProblemSpec, u: &ParameterFunction, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
    let t = spec.t();
    let h = spec.hessian_blocks(u, &gf(x), &gf(y))?;
    let mut j = DMatrix::zeros(2 * t, 2 * t);
    j.view_mut((0, 0), (t, t)).copy_from(&h.axx);
    j.view_mut((0, t), (t, t)).copy_from(&h.axy);
    j.view_mut((t, 0), (t, t)).copy_from(&(-h.axy.transpose()));
    j.view_mut((t, t), (t, t)).copy_from(&(-&h.ayy));
    Ok(j)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Damped Newton on `R(x, y) = (Lx + F_x, Ly - F_y) = 0` with Armijo
/// backtracking on `‖R‖`.
pub fn newton(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    z0: (&GridFunction, &GridFunction),
    cfg: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    if !spec.has_second_partials() {
        return Err(ProblemError::MissingSecondPartials.into());
    }
    let t = spec.t();
    let mut x = z0.0.interior().to_vec();
    let mut y = z0.1.interior().to_vec();
    let (mut rx, mut ry) = operator(spec, u, &x, &y)?;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        if recorded(iterations) {
            trace.push(trace_row(spec, u, iterations, &x, &y, &rx, &ry)?);
        }
        if inf_pair(&rx, &ry) <= cfg.tol_res {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        let j = newton_jacobian(spec, u, &x, &y)?;
        let lu = j.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or(SolverError::SingularJacobian { condition: f64::INFINITY })?;
        let condition = norm1(&j) * norm1(&inv);
        if !(condition <= SINGULAR_CONDITION) {
            return Err(SolverError::SingularJacobian { condition });
        }
        let rhs = DVector::from_iterator(2 * t, rx.iter().chain(&ry).map(|v| -v));
        let d = lu.solve(&rhs).ok_or(SolverError::SingularJacobian { condition })?;
        let (dx, dy) = d.as_slice().split_at(t);
        let r0 = norm_pair(&rx, &ry);
        let mut step = 1.0;
        let mut accepted = None;
        while step >= 1e-10 {
            let (xt, yt) = (axpy(&x, step, dx), axpy(&y, step, dy));
            if let Ok((tx, ty)) = operator(spec, u, &xt, &yt) {
                let r = norm_pair(&tx, &ty);
                if r.is_finite() && r <= (1.0 - 1e-4 * step) * r0 {
                    accepted = Some((xt, yt, tx, ty));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xt, yt, tx, ty)) = accepted else { break };
        (x, y, rx, ry) = (xt, yt, tx, ty);
        iterations += 1;
    }
    push_final(&mut trace, trace_row(spec, u, iterations, &x, &y, &rx, &ry)?);
    let candidate =
        SaddleCandidate::evaluate(spec, u, gf(&x), gf(&y), Method::Newton, iterations, converged)?;
    Ok(SolveOutcome { candidate, trace })
}

/// Which nested problem to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// `max_y min_x J`.
    MaxMin,
    /// `min_x max_y J`.
    MinMax,
}

/// `φ(v, w)`, convex in the inner variable `v` and concave in the outer `w`:
/// `J(v, w)` for max-min and `-J(w, v)` for min-max.
struct Oriented<'a> {
    spec: &'a ProblemSpec,
    u: &'a ParameterFunction,
    order: Order,
}

/// Curvature data of `φ`: `∇²_vv = L + diag(dv)`, `∇²_vw = diag(dvw)`,
/// `∇²_ww = -L + diag(dw)`.
struct Curvature {
    dv: Vec<f64>,
    dvw: Vec<f64>,
    dw: Vec<f64>,
}

impl Oriented<'_> {
    fn xy<'b>(&self, v: &'b [f64], w: &'b [f64]) -> (&'b [f64], &'b [f64]) {
        match self.order {
            Order::MaxMin => (v, w),
            Order::MinMax => (w, v),
        }
    }

    fn sign(&self) -> f64 {
        match self.order {
            Order::MaxMin => 1.0,
            Order::MinMax => -1.0,
        }
    }

    fn value(&self, v: &[f64], w: &[f64]) -> Result<f64, ProblemError> {
        let (x, y) = self.xy(v, w);
        Ok(self.sign() * self.spec.action(self.u, &gf(x), &gf(y))?)
    }

    fn grad(&self, v: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ProblemError> {
        let (x, y) = self.xy(v, w);
        let (gx, gy) = self.spec.grad(self.u, &gf(x), &gf(y))?;
        Ok(match self.order {
            Order::MaxMin => (gx, gy),
            Order::MinMax => (gy.into_iter().map(|g| -g).collect(), gx.into_iter().map(|g| -g).collect()),
        })
    }

    fn curvature(&self, v: &[f64], w: &[f64]) -> Result<Option<Curvature>, ProblemError> {
        if !self.spec.has_second_partials() {
            return Ok(None);
        }
        let (x, y) = self.xy(v, w);
        let (x, y) = (gf(x), gf(y));
        let fxx = self.spec.tabulate(Partial::Fxx, self.u, &x, &y)?;
        let fxy = self.spec.tabulate(Partial::Fxy, self.u, &x, &y)?;
        let fyy = self.spec.tabulate(Partial::Fyy, self.u, &x, &y)?;
        let neg = |v: Vec<f64>| v.into_iter().map(|c| -c).collect();
        Ok(Some(match self.order {
            Order::MaxMin => Curvature { dv: fxx, dvw: fxy, dw: fyy },
            Order::MinMax => Curvature { dv: neg(fyy), dvw: neg(fxy), dw: neg(fxx) },
        }))
    }
}

/// Changes in `φ` below this size are indistinguishable from rounding.
fn rounding(value: f64) -> f64 {
    64.0 * f64::EPSILON * (1.0 + value.abs())
}

struct InnerSolution {
    v: Vec<f64>,
    value: f64,
    gw: Vec<f64>,
}

/// Minimizes the convex `v ↦ φ(v, w)` by Newton steps on the tridiagonal
/// Hessian, or by `L⁻¹`-preconditioned descent without second partials.
/// A step is accepted on sufficient decrease of `φ` or of `‖∇_vφ‖`, which
/// keeps progress possible once value changes fall below rounding.
fn inner_minimize(
    o: &Oriented,
    v0: Vec<f64>,
    w: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<InnerSolution, SolverError> {
    let lap = o.spec.lap();
    let mut v = v0;
    let mut value = o.value(&v, w)?;
    let (mut gv, mut gw) = o.grad(&v, w)?;
    let mut iterations = 0;
    loop {
        let gnorm = norm2(&gv);
        if gnorm <= tol {
            return Ok(InnerSolution { v, value, gw });
        }
        if iterations == max_iter {
            return Err(SolverError::InnerSolveFailed { iterations, grad_norm: gnorm });
        }
        let rhs: Vec<f64> = gv.iter().map(|g| -g).collect();
        let newton_dir = o.curvature(&v, w)?.and_then(|c| {
            let diag: Vec<f64> = c.dv.iter().map(|d| 2.0 + d).collect();
            solve_symmetric_tridiagonal(&diag, &vec![-1.0; v.len() - 1], &rhs)
        });
        let p = match newton_dir {
            Some(p) if dot(&p, &gv) < 0.0 => p,
            _ => lap.solve(&rhs),
        };
        let slope = dot(&gv, &p);
        let mut step = 1.0;
        let mut accepted = None;
        while step >= 1e-12 {
            let vt = axpy(&v, step, &p);
            if let (Ok(ft), Ok((gvt, gwt))) = (o.value(&vt, w), o.grad(&vt, w)) {
                let decrease = -step * slope > rounding(value) && ft <= value + 1e-4 * step * slope;
                let flatter = norm2(&gvt) <= (1.0 - 1e-4 * step) * gnorm;
                if ft.is_finite() && (decrease || flatter) {
                    accepted = Some((vt, ft, gvt, gwt));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some(a) => (v, value, gv, gw) = a,
            None if gnorm <= 1e3 * tol => return Ok(InnerSolution { v, value, gw }),
            None => return Err(SolverError::InnerSolveFailed { iterations, grad_norm: gnorm }),
        }
        iterations += 1;
    }
}

/// Newton direction for the concave outer function `ψ(w) = min_v φ(v, w)`
/// using the Schur complement `∇²_ww - ∇²_wv (∇²_vv)⁻¹ ∇²_vw`.
fn outer_newton_direction(c: &Curvature, grad: &[f64]) -> Option<Vec<f64>> {
    let t = grad.len();
    let diag: Vec<f64> = c.dv.iter().map(|d| 2.0 + d).collect();
    let off = vec![-1.0; t - 1];
    // -S = L - diag(dw) + D A⁻¹ D must be positive definite
    let mut neg_s = DMatrix::zeros(t, t);
    for i in 0..t {
        neg_s[(i, i)] = 2.0 - c.dw[i];
        if i + 1 < t {
            neg_s[(i, i + 1)] = -1.0;
            neg_s[(i + 1, i)] = -1.0;
        }
    }
    for j in 0..t {
        if c.dvw[j] == 0.0 {
            continue;
        }
        let mut e = vec![0.0; t];
        e[j] = c.dvw[j];
        let col = solve_symmetric_tridiagonal(&diag, &off, &e)?;
        for i in 0..t {
            neg_s[(i, j)] += c.dvw[i] * col[i];
        }
    }
    let neg_s = 0.5 * (&neg_s + neg_s.transpose());
    let chol = neg_s.cholesky()?;
    let p = chol.solve(&DVector::from_column_slice(grad));
    Some(p.as_slice().to_vec())
}

/// Nested solve of the given order from `(x0, y0)`: the outer variable is
/// driven to a stationary point of `ψ` while the inner variable is
/// re-minimized at every trial point to `1e-2` times the outer tolerance.
pub fn nested(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    z0: (&GridFunction, &GridFunction),
    cfg: &SolverConfig,
    order: Order,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let o = Oriented { spec, u, order };
    let (v0, w0) = match order {
        Order::MaxMin => (z0.0, z0.1),
        Order::MinMax => (z0.1, z0.0),
    };
    let inner_tol = INNER_TOL_RATIO * cfg.tol_grad;
    let mut w = w0.interior().to_vec();
    let mut inner = inner_minimize(&o, v0.interior().to_vec(), &w, inner_tol, cfg.max_iter)?;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let row = |iter: usize, v: &[f64], w: &[f64]| -> Result<TraceRow, ProblemError> {
        let (x, y) = o.xy(v, w);
        let (gx, gy) = operator(spec, u, x, y)?;
        trace_row(spec, u, iter, x, y, &gx, &gy)
    };
    loop {
        if recorded(iterations) {
            trace.push(row(iterations, &inner.v, &w)?);
        }
        let gnorm = norm2(&inner.gw);
        if gnorm <= cfg.tol_grad {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        let p = o
            .curvature(&inner.v, &w)?
            .and_then(|c| outer_newton_direction(&c, &inner.gw))
            .filter(|p| dot(p, &inner.gw) > 0.0)
            .unwrap_or_else(|| spec.lap().solve(&inner.gw));
        let slope = dot(&inner.gw, &p);
        let mut step = 1.0;
        let mut accepted = None;
        while step >= 1e-12 {
            let wt = axpy(&w, step, &p);
            if let Ok(it) = inner_minimize(&o, inner.v.clone(), &wt, inner_tol, cfg.max_iter) {
                let increase = step * slope > rounding(inner.value) && it.value >= inner.value + 1e-4 * step * slope;
                let flatter = norm2(&it.gw) <= (1.0 - 1e-4 * step) * gnorm;
                if it.value.is_finite() && (increase || flatter) {
                    accepted = Some((wt, it));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((wt, it)) => (w, inner) = (wt, it),
            None if gnorm <= 1e3 * cfg.tol_grad => break,
            None => return Err(SolverError::OuterStall { iterations, grad_norm: gnorm }),
        }
        iterations += 1;
    }
    push_final(&mut trace, row(iterations, &inner.v, &w)?);
    let (x, y) = o.xy(&inner.v, &w);
    let candidate = SaddleCandidate::evaluate(spec, u, gf(x), gf(y), Method::Nested, iterations, converged)?;
    Ok(SolveOutcome { candidate, trace })
}

/// `max_y min_x J_u` from `y0`, with the inner minimization warm-started at
/// zero.
pub fn nested_minimax(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    y0: &GridFunction,
    cfg: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    let x0 = GridFunction::zeros(spec.t()).map_err(ProblemError::from)?;
    nested(spec, u, (&x0, y0), cfg, Order::MaxMin)
}

/// Dispatches on `cfg.method`; the nested method solves the max-min order.
pub fn solve(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    z0: (&GridFunction, &GridFunction),
    cfg: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    match cfg.method {
        Method::Extragradient => extragradient(spec, u, z0, cfg),
        Method::Newton => newton(spec, u, z0, cfg),
        Method::Nested => nested(spec, u, z0, cfg, Order::MaxMin),
    }
}

/// Both nested orders computed independently from the same start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FanGap {
    pub max_min: f64,
    pub min_max: f64,
    pub gap: f64,
    pub max_min_point: SaddleCandidate,
    pub min_max_point: SaddleCandidate,
}

pub fn fan_gap(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    z0: (&GridFunction, &GridFunction),
    cfg: &SolverConfig,
) -> Result<FanGap, SolverError> {
    let a = nested(spec, u, z0, cfg, Order::MaxMin)?.candidate;
    let b = nested(spec, u, z0, cfg, Order::MinMax)?.candidate;
    Ok(FanGap { max_min: a.value, min_max: b.value, gap: (a.value - b.value).abs(), max_min_point: a, min_max_point: b })
}

/// Settings for [`verify_saddle`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Random probes per family (global ball samples and each local scale).
    pub probes: usize,
    /// Radii of the sampling balls; `2·max(1, ‖z*‖)` when absent.
    pub radii: Option<(f64, f64)>,
    pub tol_res: f64,
    /// Slack in the saddle inequalities; `1e-9·(1 + |J*|)` when absent.
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub inner_tol: f64,
    pub max_iter: usize,
}

impl ProbeConfig {
    pub fn from_solver(cfg: &SolverConfig, radii: Option<(f64, f64)>) -> Self {
        Self {
            probes: 64,
            radii,
            tol_res: cfg.tol_res.max(1e-8),
            epsilon: None,
            seed: cfg.seed,
            inner_tol: INNER_TOL_RATIO * cfg.tol_grad,
            max_iter: cfg.max_iter.min(1000),
        }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::from_solver(&SolverConfig::default(), None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    pub passed: bool,
    pub residual: f64,
    pub residual_ok: bool,
    pub epsilon: f64,
    /// `min J(x, y*) - J*` over the x-probes; must be `≥ -ε`.
    pub x_probe_margin: f64,
    /// `max J(x*, y) - J*` over the y-probes; must be `≤ ε`.
    pub y_probe_margin: f64,
    pub inequalities_ok: bool,
    pub min_over_x: Option<f64>,
    pub max_over_y: Option<f64>,
    pub minimax_ok: bool,
    pub failures: Vec<String>,
}

/// Checks residual, sampled saddle inequalities and the minimax equality
/// `min_x J(x, y*) = J* = max_y J(x*, y)`.
pub fn verify_saddle(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    cand: &SaddleCandidate,
    probes: &ProbeConfig,
) -> SaddleReport {
    let mut failures = Vec::new();
    let finite = cand.x.is_finite() && cand.y.is_finite();
    let residual = if finite { spec.residual(u, &cand.x, &cand.y).unwrap_or(f64::INFINITY) } else { f64::INFINITY };
    let value = if finite { spec.action(u, &cand.x, &cand.y).unwrap_or(f64::NAN) } else { f64::NAN };
    let epsilon = probes.epsilon.unwrap_or(1e-9 * (1.0 + value.abs()));
    let residual_ok = residual <= probes.tol_res;
    if !residual_ok {
        failures.push(format!("residual {residual:e} exceeds {:e}", probes.tol_res));
    }
    if !value.is_finite() {
        failures.push("candidate value is not finite".into());
        return SaddleReport {
            passed: false,
            residual,
            residual_ok,
            epsilon,
            x_probe_margin: f64::NAN,
            y_probe_margin: f64::NAN,
            inequalities_ok: false,
            min_over_x: None,
            max_over_y: None,
            minimax_ok: false,
            failures,
        };
    }

    let t = spec.t();
    let scale = 1f64.max(cand.x.h_norm()).max(cand.y.h_norm());
    let (r1, r2) = probes.radii.unwrap_or((2.0 * scale, 2.0 * scale));
    let mut rng = ChaCha8Rng::seed_from_u64(probes.seed);
    let mut x_probes = Vec::new();
    let mut y_probes = Vec::new();
    for _ in 0..probes.probes {
        x_probes.push(sample_in_ball(t, r1, &mut rng));
        y_probes.push(sample_in_ball(t, r2, &mut rng));
    }
    for delta in [1e-1, 1e-2, 1e-3] {
        for _ in 0..probes.probes {
            let dx = sample_in_ball(t, 1.0, &mut rng);
            let dy = sample_in_ball(t, 1.0, &mut rng);
            x_probes.push(cand.x.axpy(delta * scale / dx.h_norm().max(1e-300), &dx));
            y_probes.push(cand.y.axpy(delta * scale / dy.h_norm().max(1e-300), &dy));
        }
    }

    let min_x = Oriented { spec, u, order: Order::MaxMin };
    let max_y = Oriented { spec, u, order: Order::MinMax };
    let best_x = inner_minimize(&min_x, cand.x.interior().to_vec(), cand.y.interior(), probes.inner_tol, probes.max_iter);
    let best_y = inner_minimize(&max_y, cand.y.interior().to_vec(), cand.x.interior(), probes.inner_tol, probes.max_iter);
    let min_over_x = best_x.as_ref().ok().map(|s| s.value);
    let max_over_y = best_y.as_ref().ok().map(|s| -s.value);
    if let Ok(s) = &best_x {
        x_probes.push(gf(&s.v));
    }
    if let Ok(s) = &best_y {
        y_probes.push(gf(&s.v));
    }

    let mut x_margin = f64::INFINITY;
    for x in &x_probes {
        if let Ok(j) = spec.action(u, x, &cand.y) {
            x_margin = x_margin.min(j - value);
        }
    }
    let mut y_margin = f64::NEG_INFINITY;
    for y in &y_probes {
        if let Ok(j) = spec.action(u, &cand.x, y) {
            y_margin = y_margin.max(j - value);
        }
    }
    let inequalities_ok = x_margin >= -epsilon && y_margin <= epsilon;
    if !inequalities_ok {
        failures.push(format!(
            "saddle inequalities violated: min J(x, y*) - J* = {x_margin:e}, max J(x*, y) - J* = {y_margin:e}"
        ));
    }
    let mut minimax_ok = true;
    match (&best_x, min_over_x) {
        (Ok(_), Some(m)) if (m - value).abs() <= epsilon => {}
        (Ok(_), Some(m)) => {
            minimax_ok = false;
            failures.push(format!("min over x differs from J* by {:e}", m - value));
        }
        _ => {
            minimax_ok = false;
            failures.push(format!("min over x failed: {}", best_x.as_ref().err().map_or(String::new(), |e| e.to_string())));
        }
    }
    match (&best_y, max_over_y) {
        (Ok(_), Some(m)) if (m - value).abs() <= epsilon => {}
        (Ok(_), Some(m)) => {
            minimax_ok = false;
            failures.push(format!("max over y differs from J* by {:e}", m - value));
        }
        _ => {
            minimax_ok = false;
            failures.push(format!("max over y failed: {}", best_y.as_ref().err().map_or(String::new(), |e| e.to_string())));
        }
    }
    SaddleReport {
        passed: residual_ok && inequalities_ok && minimax_ok,
        residual,
        residual_ok,
        epsilon,
        x_probe_margin: x_margin,
        y_probe_margin: y_margin,
        inequalities_ok,
        min_over_x,
        max_over_y,
        minimax_ok,
        failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartFailure {
    pub start: usize,
    pub message: String,
}

/// Cluster representatives of the converged multistart candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleSet {
    pub points: Vec<SaddleCandidate>,
    pub cluster_sizes: Vec<usize>,
    pub cluster_radius: f64,
    pub starts: usize,
    pub converged: usize,
    pub failures: Vec<StartFailure>,
    /// Convergence trace of every start, in start order.
    #[serde(skip)]
    pub traces: Vec<Vec<TraceRow>>,
}

impl SaddleSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest product distance from `(x, y)` to a representative.
    pub fn distance_to(&self, x: &GridFunction, y: &GridFunction) -> f64 {
        self.points
            .iter()
            .map(|p| product_distance(x, y, &p.x, &p.y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Orders candidates by value, then lexicographically by `x`.
pub fn candidate_order(a: &SaddleCandidate, b: &SaddleCandidate) -> std::cmp::Ordering {
    a.value.total_cmp(&b.value).then_with(|| {
        a.x.values()
            .iter()
            .zip(b.x.values())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Leader clustering of sorted candidates: each joins the first
/// representative within `radius` or becomes one.
pub fn cluster(mut candidates: Vec<SaddleCandidate>, radius: f64) -> (Vec<SaddleCandidate>, Vec<usize>) {
    candidates.sort_by(candidate_order);
    let mut leaders: Vec<SaddleCandidate> = Vec::new();
    let mut sizes = Vec::new();
    for c in candidates {
        match leaders.iter().position(|l| l.distance(&c) <= radius) {
            Some(i) => sizes[i] += 1,
            None => {
                leaders.push(c);
                sizes.push(1);
            }
        }
    }
    (leaders, sizes)
}

/// The seeded start of multistart run `index`, uniform in `B₁ × B₂`.
pub fn start_point(t: usize, radii: (f64, f64), seed: u64, index: usize) -> (GridFunction, GridFunction) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let x = sample_in_ball(t, radii.0, &mut rng);
    let y = sample_in_ball(t, radii.1, &mut rng);
    (x, y)
}

/// Runs `cfg.multistart` solves from seeded starts in `B₁ × B₂` and
/// clusters the converged candidates. Starts run in parallel; results do
/// not depend on scheduling.
pub fn saddle_set(
    spec: &ProblemSpec,
    u: &ParameterFunction,
    cfg: &SolverConfig,
    radii: (f64, f64),
) -> Result<SaddleSet, SolverError> {
    cfg.validate()?;
    let t = spec.t();
    let outcomes: Vec<Result<SolveOutcome, SolverError>> = (0..cfg.multistart)
        .into_par_iter()
        .map(|i| {
            let (x0, y0) = start_point(t, radii, cfg.seed, i);
            let run = SolverConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
            solve(spec, u, (&x0, &y0), &run)
        })
        .collect();
    let mut converged = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (start, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                traces.push(o.trace);
                if o.candidate.converged {
                    converged.push(o.candidate);
                } else {
                    failures.push(StartFailure { start, message: "did not converge".into() });
                }
            }
            Err(e) => {
                traces.push(Vec::new());
                failures.push(StartFailure { start, message: e.to_string() });
            }
        }
    }
    let n_converged = converged.len();
    let (points, cluster_sizes) = cluster(converged, cfg.cluster_radius);
    Ok(SaddleSet {
        points,
        cluster_sizes,
        cluster_radius: cfg.cluster_radius,
        starts: cfg.multistart,
        converged: n_converged,
        failures,
        traces,
    })
}
