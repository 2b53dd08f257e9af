#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use saddlebvp::grid::GridFunction;
use saddlebvp::hypotheses::{certify, CheckOptions, GrowthCertificate};
use saddlebvp::problem::{ParameterFunction, ProblemSpec};

pub struct Instance {
    pub f: String,
    pub spec: ProblemSpec,
    pub u: ParameterFunction,
    pub cert: GrowthCertificate,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    round4(lo + (hi - lo) * rng.random::<f64>())
}

pub fn random_u(rng: &mut ChaCha8Rng, t: usize, d: f64) -> ParameterFunction {
    let v = (0..t).map(|_| uniform(rng, -d, d)).collect();
    ParameterFunction::new(v, d).unwrap()
}

/// `F = a x² - c y² + b xy + s sin(x + p y + q k) + u (x - y)` with
/// `|s| < 2a` and `|s| p² < 2c`, so `F` is strictly convex in `x` and
/// strictly concave in `y`.
///
/// With zero anchors, `a s² - |s| - D|s| ≥ -|s| - D²/(4a)` and
/// `-c s² + |s| + D|s| ≤ |s| + D²/(4c)` give a valid certificate with
/// `α = β = 0`.
pub fn nonlinear_instance(rng: &mut ChaCha8Rng, t: usize) -> Instance {
    let d = 1.0;
    let a = uniform(rng, 0.2, 1.0);
    let c = uniform(rng, 0.2, 1.0);
    let b = uniform(rng, -1.0, 1.0);
    let p = uniform(rng, -1.0, 1.0);
    let q = uniform(rng, -0.5, 0.5);
    let cap = (2.0 * a).min(2.0 * c / (p * p).max(1e-3));
    let s = round4(0.9 * cap * (2.0 * rng.random::<f64>() - 1.0));
    let f = format!("{a}*x^2 - {c}*y^2 + {b}*x*y + {s}*sin(x + {p}*y + {q}*k) + u*(x - y)");
    let spec = ProblemSpec::parse(t, d, &f).unwrap();
    let u = random_u(rng, t, d);
    let gamma1 = -s.abs() - d * d / (4.0 * a);
    let gamma2 = s.abs() + d * d / (4.0 * c);
    let cert = GrowthCertificate::uniform(t, 0.0, 0.0, gamma1, gamma2, 5.0);
    Instance { f, spec, u, cert }
}

/// Runs the full hypothesis check at test density.
pub fn certified(inst: &Instance) -> bool {
    let opts = CheckOptions { density: 15, samples: 20, seed: 1 };
    certify(&inst.spec, &inst.u, &inst.cert, opts).unwrap().passed
}

pub struct Quadratic {
    pub f: String,
    pub spec: ProblemSpec,
    pub u: ParameterFunction,
    pub coef: [f64; 6],
}

/// `F = a x² + b xy - c y² + p x + q u y + r k x` with `a, c ≥ 0`.
pub fn quadratic_instance(rng: &mut ChaCha8Rng, t: usize) -> Quadratic {
    let a = uniform(rng, 0.0, 1.0);
    let c = uniform(rng, 0.0, 1.0);
    let b = uniform(rng, -1.0, 1.0);
    let p = uniform(rng, -1.0, 1.0);
    let q = uniform(rng, -1.0, 1.0);
    let r = uniform(rng, -0.2, 0.2);
    let f = format!("{a}*x^2 + {b}*x*y - {c}*y^2 + {p}*x + {q}*u*y + {r}*k*x");
    let spec = ProblemSpec::parse(t, 1.0, &f).unwrap();
    let u = random_u(rng, t, 1.0);
    Quadratic { f, spec, u, coef: [a, b, c, p, q, r] }
}

/// Direct solve of `Lx + 2a x + b y + p + r k = 0`,
/// `-Ly + b x - 2c y + q u = 0`.
pub fn quadratic_oracle(qd: &Quadratic) -> (Vec<f64>, Vec<f64>) {
    let t = qd.spec.t();
    let [a, b, c, p, q, r] = qd.coef;
    let mut m = DMatrix::zeros(2 * t, 2 * t);
    let mut rhs = DVector::zeros(2 * t);
    for i in 0..t {
        for (j, v) in [(i.wrapping_sub(1), -1.0), (i, 2.0), (i + 1, -1.0)] {
            if j < t {
                m[(i, j)] += v;
                m[(t + i, t + j)] -= v;
            }
        }
        m[(i, i)] += 2.0 * a;
        m[(i, t + i)] = b;
        m[(t + i, i)] = b;
        m[(t + i, t + i)] -= 2.0 * c;
        rhs[i] = -(p + r * (i + 1) as f64);
        rhs[t + i] = -q * qd.u.values()[i];
    }
    let s = m.lu().solve(&rhs).unwrap();
    (s.as_slice()[..t].to_vec(), s.as_slice()[t..].to_vec())
}

pub fn grid(v: &[f64]) -> GridFunction {
    GridFunction::from_interior(v).unwrap()
}

/// Largest absolute difference between interior values.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}
