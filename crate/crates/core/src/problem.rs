//! Problem assembly: the parameter box `L_D`, the action functional
//! `J_u(x, y) = Σ |Δx|²/2 - |Δy|²/2 + Σ F(k, x(k), y(k), u(k))`, its
//! gradient and Hessian blocks, and the pointwise residual of the discrete
//! boundary value system.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Env, EvalError, Expr, FieldError, ScalarField, Var};
use crate::grid::{DirichletLaplacian, GridError, GridFunction};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid expression for F: {0}")]
    Field(#[from] FieldError),
    #[error("invalid expression for u: {0}")]
    ParameterExpr(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("parameter leaves the box: max |u(k)| = {max} > D = {bound}")]
    OutsideBox { max: f64, bound: f64 },
    #[error("bound D must be positive and finite, got {0}")]
    InvalidBound(f64),
    #[error("dimension mismatch: problem has T = {expected}, argument has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("F has no second partial derivatives")]
    MissingSecondPartials,
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// An element of `L_D`: values `u(1..=T)` with `max |u(k)| ≤ D`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterFunction {
    values: Vec<f64>,
    bound: f64,
}

impl ParameterFunction {
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self, ProblemError> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(ProblemError::InvalidBound(bound));
        }
        if values.is_empty() {
            return Err(GridError::Empty.into());
        }
        let max = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max > bound || values.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::OutsideBox { max, bound });
        }
        Ok(Self { values, bound })
    }

    pub fn constant(t: usize, value: f64, bound: f64) -> Result<Self, ProblemError> {
        Self::new(vec![value; t], bound)
    }

    /// Clips each value into `[-D, D]`; the flag reports whether any value moved.
    pub fn project(values: Vec<f64>, bound: f64) -> Result<(Self, bool), ProblemError> {
        let mut moved = false;
        let clipped = values
            .into_iter()
            .map(|v| {
                let c = v.clamp(-bound, bound);
                moved |= c != v;
                c
            })
            .collect();
        Ok((Self::new(clipped, bound)?, moved))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn t(&self) -> usize {
        self.values.len()
    }

    /// `u(k)` for `k` in `1..=T`.
    pub fn at(&self, k: usize) -> f64 {
        self.values[k - 1]
    }

    /// `‖self - other‖_C`.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

/// The data of one boundary value system: `T`, `D` and the integrand.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    t: usize,
    bound: f64,
    field: ScalarField,
    lap: DirichletLaplacian,
}

/// Which partial of `F` to tabulate along a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partial {
    F,
    Fx,
    Fy,
    Fxx,
    Fxy,
    Fyy,
}

impl ProblemSpec {
    pub fn new(t: usize, bound: f64, field: ScalarField) -> Result<Self, ProblemError> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(ProblemError::InvalidBound(bound));
        }
        let lap = DirichletLaplacian::new(t)?;
        Ok(Self { t, bound, field, lap })
    }

    pub fn parse(t: usize, bound: f64, f: &str) -> Result<Self, ProblemError> {
        Self::new(t, bound, ScalarField::parse(f)?)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn lap(&self) -> &DirichletLaplacian {
        &self.lap
    }

    pub fn has_second_partials(&self) -> bool {
        self.field.second.is_some()
    }

    fn expr_for(&self, which: Partial) -> Result<&Expr, ProblemError> {
        let second = || self.field.second.as_ref().ok_or(ProblemError::MissingSecondPartials);
        Ok(match which {
            Partial::F => &self.field.f,
            Partial::Fx => &self.field.fx,
            Partial::Fy => &self.field.fy,
            Partial::Fxx => &second()?.fxx,
            Partial::Fxy => &second()?.fxy,
            Partial::Fyy => &second()?.fyy,
        })
    }

    fn check(&self, u: &ParameterFunction, x: &GridFunction, y: &GridFunction) -> Result<(), ProblemError> {
        for got in [u.t(), x.t(), y.t()] {
            if got != self.t {
                return Err(ProblemError::Dimension { expected: self.t, got });
            }
        }
        Ok(())
    }

    /// Evaluates the requested partial at every interior node.
    pub fn tabulate(
        &self,
        which: Partial,
        u: &ParameterFunction,
        x: &GridFunction,
        y: &GridFunction,
    ) -> Result<Vec<f64>, ProblemError> {
        self.check(u, x, y)?;
        let e = self.expr_for(which)?;
        (1..=self.t)
            .map(|k| Ok(e.eval(&Env::new(k as f64, x.at(k), y.at(k), u.at(k)))?))
            .collect()
    }

    /// Evaluates `F(k, s, t, v)` at a single node.
    pub fn integrand(&self, k: usize, x: f64, y: f64, u: f64) -> Result<f64, EvalError> {
        self.field.f.eval(&Env::new(k as f64, x, y, u))
    }

    pub fn action(
        &self,
        u: &ParameterFunction,
        x: &GridFunction,
        y: &GridFunction,
    ) -> Result<f64, ProblemError> {
        let f = self.tabulate(Partial::F, u, x, y)?;
        let quad = 0.5 * (x.h_dot(x) - y.h_dot(y));
        Ok(quad + f.iter().sum::<f64>())
    }

    /// `(∇ₓJ_u, ∇_yJ_u) = (Lx + F_x, -Ly + F_y)` over the interior nodes.
    pub fn grad(
        &self,
        u: &ParameterFunction,
        x: &GridFunction,
        y: &GridFunction,
    ) -> Result<(Vec<f64>, Vec<f64>), ProblemError> {
        let fx = self.tabulate(Partial::Fx, u, x, y)?;
        let fy = self.tabulate(Partial::Fy, u, x, y)?;
        let lx = self.lap.apply(x.interior());
        let ly = self.lap.apply(y.interior());
        let gx = lx.iter().zip(&fx).map(|(a, b)| a + b).collect();
        let gy = ly.iter().zip(&fy).map(|(a, b)| b - a).collect();
        Ok((gx, gy))
    }

    /// Max-norm residual of `Δ²x(k-1) = F_x` and `Δ²y(k-1) = -F_y`.
    pub fn residual(
        &self,
        u: &ParameterFunction,
        x: &GridFunction,
        y: &GridFunction,
    ) -> Result<f64, ProblemError> {
        let fx = self.tabulate(Partial::Fx, u, x, y)?;
        let fy = self.tabulate(Partial::Fy, u, x, y)?;
        let mut worst = 0.0_f64;
        for k in 1..=self.t {
            let rx = x.second_difference(k)? - fx[k - 1];
            let ry = y.second_difference(k)? + fy[k - 1];
            worst = worst.max(rx.abs()).max(ry.abs());
        }
        Ok(worst)
    }

    /// `(Axx, Axy, Ayy) = (L + diag F_xx, diag F_xy, -L + diag F_yy)`.
    pub fn hessian_blocks(
        &self,
        u: &ParameterFunction,
        x: &GridFunction,
        y: &GridFunction,
    ) -> Result<HessianBlocks, ProblemError> {
        let fxx = self.tabulate(Partial::Fxx, u, x, y)?;
        let fxy = self.tabulate(Partial::Fxy, u, x, y)?;
        let fyy = self.tabulate(Partial::Fyy, u, x, y)?;
        let l = self.lap.to_dense();
        let mut axx = l.clone();
        let mut ayy = -l;
        let mut axy = DMatrix::zeros(self.t, self.t);
        for i in 0..self.t {
            axx[(i, i)] += fxx[i];
            ayy[(i, i)] += fyy[i];
            axy[(i, i)] = fxy[i];
        }
        Ok(HessianBlocks { axx, axy, ayy, fxx, fxy, fyy })
    }
}

/// Second-derivative blocks of `J_u`, with their diagonal parts kept for
/// tridiagonal solves.
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    pub axx: DMatrix<f64>,
    pub axy: DMatrix<f64>,
    pub ayy: DMatrix<f64>,
    pub fxx: Vec<f64>,
    pub fxy: Vec<f64>,
    pub fyy: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Extragradient,
    Newton,
    Nested,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Extragradient => "extragradient",
            Method::Newton => "newton",
            Method::Nested => "nested",
        })
    }
}

/// A computed approximation of a saddle point with its diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleCandidate {
    pub x: GridFunction,
    pub y: GridFunction,
    pub value: f64,
    pub grad_norm: f64,
    pub residual_norm: f64,
    pub method: Method,
    pub iterations: usize,
    pub converged: bool,
}

impl SaddleCandidate {
    /// Evaluates value, gradient norm and residual at `(x, y)`.
    pub fn evaluate(
        spec: &ProblemSpec,
        u: &ParameterFunction,
        x: GridFunction,
        y: GridFunction,
        method: Method,
        iterations: usize,
        converged: bool,
    ) -> Result<Self, ProblemError> {
        let value = spec.action(u, &x, &y)?;
        let (gx, gy) = spec.grad(u, &x, &y)?;
        let grad_norm = gx.iter().chain(&gy).map(|g| g * g).sum::<f64>().sqrt();
        let residual_norm = spec.residual(u, &x, &y)?;
        Ok(Self { x, y, value, grad_norm, residual_norm, method, iterations, converged })
    }

    /// Product distance `√(‖x - x'‖² + ‖y - y'‖²)`.
    pub fn distance(&self, other: &Self) -> f64 {
        product_distance(&self.x, &self.y, &other.x, &other.y)
    }
}

pub fn product_distance(x: &GridFunction, y: &GridFunction, x2: &GridFunction, y2: &GridFunction) -> f64 {
    x.h_distance(x2).hypot(y.h_distance(y2))
}

/// Either an expression in `k` or an explicit list of `T` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParameterInput {
    Expr(String),
    Values(Vec<f64>),
}

impl ParameterInput {
    /// Tabulates the input on `1..=T` without checking the box.
    pub fn tabulate(&self, t: usize) -> Result<Vec<f64>, ProblemError> {
        match self {
            ParameterInput::Values(v) => {
                if v.len() != t {
                    return Err(ProblemError::Dimension { expected: t, got: v.len() });
                }
                Ok(v.clone())
            }
            ParameterInput::Expr(text) => {
                let e = expr::parse(text).map_err(|err| ProblemError::ParameterExpr(err.to_string()))?;
                for v in [Var::X, Var::Y, Var::U] {
                    if e.depends_on(v) {
                        return Err(ProblemError::ParameterExpr(format!(
                            "'{text}' may only depend on k, found {}",
                            v.name()
                        )));
                    }
                }
                (1..=t)
                    .map(|k| Ok(e.eval(&Env::new(k as f64, 0.0, 0.0, 0.0))?))
                    .collect()
            }
        }
    }

    pub fn resolve(&self, t: usize, bound: f64) -> Result<ParameterFunction, ProblemError> {
        ParameterFunction::new(self.tabulate(t)?, bound)
    }
}

/// On-disk problem description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "F")]
    pub f: String,
    pub u: ParameterInput,
}

impl ProblemFile {
    pub fn build(&self) -> Result<(ProblemSpec, ParameterFunction), ProblemError> {
        let spec = ProblemSpec::parse(self.t, self.d, &self.f)?;
        let u = self.u.resolve(self.t, self.d)?;
        Ok((spec, u))
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProblemError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}
