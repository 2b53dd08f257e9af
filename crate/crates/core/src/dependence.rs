//! Continuous dependence of the saddle set and saddle value on the
//! parameter: along a sequence `u_n → u_0`, computed saddle sets approach
//! the one for `u_0` and their values converge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{sample_in_ball, sup_norm_bound, GridFunction};
use crate::problem::{ParameterFunction, ProblemError, ProblemSpec, SaddleCandidate};
use crate::solvers::{
    saddle_set, solve, verify_saddle, ProbeConfig, SaddleReport, SaddleSet, SolverConfig, SolverError,
};

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceRule {
    /// `u_n` given explicitly for `n = 1..=len`.
    Explicit(Vec<ParameterFunction>),
    /// `u_n = u_0 + v/n`, projected onto the box.
    Direction(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSequence {
    u0: ParameterFunction,
    rule: SequenceRule,
    len: usize,
}

impl ParameterSequence {
    pub fn with_direction(u0: ParameterFunction, direction: Vec<f64>, len: usize) -> Result<Self, ProblemError> {
        if direction.len() != u0.t() {
            return Err(ProblemError::Dimension { expected: u0.t(), got: direction.len() });
        }
        Ok(Self { u0, rule: SequenceRule::Direction(direction), len: len.max(1) })
    }

    pub fn explicit(u0: ParameterFunction, members: Vec<ParameterFunction>) -> Result<Self, ProblemError> {
        for m in &members {
            if m.t() != u0.t() {
                return Err(ProblemError::Dimension { expected: u0.t(), got: m.t() });
            }
        }
        let len = members.len().max(1);
        Ok(Self { u0, rule: SequenceRule::Explicit(members), len })
    }

    pub fn limit(&self) -> &ParameterFunction {
        &self.u0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `u_n` and whether projection onto the box was needed.
    pub fn member(&self, n: usize) -> Result<(ParameterFunction, bool), ProblemError> {
        match &self.rule {
            SequenceRule::Explicit(list) => {
                Ok((list.get(n - 1).cloned().unwrap_or_else(|| self.u0.clone()), false))
            }
            SequenceRule::Direction(v) => {
                let vals = self.u0.values().iter().zip(v).map(|(a, b)| a + b / n as f64).collect();
                ParameterFunction::project(vals, self.u0.bound())
            }
        }
    }

    /// Geometric schedule `1, 2, 4, …` ending with the length itself.
    pub fn schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = std::iter::successors(Some(1usize), |n| n.checked_mul(2))
            .take_while(|&n| n < self.len)
            .collect();
        s.push(self.len);
        s
    }
}

/// Settings shared by [`run_sequence`] and [`upper_limit_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct DependenceConfig {
    pub solver: SolverConfig,
    /// Radii of `B₁`, `B₂` for multistart and gap sampling.
    pub radii: (f64, f64),
    pub tol_dep: f64,
    pub gap_samples: usize,
}

impl DependenceConfig {
    pub fn new(solver: SolverConfig, radii: (f64, f64)) -> Self {
        Self { solver, radii, tol_dep: 1e-4, gap_samples: 256 }
    }
}

/// Sup of `|J_a - J_b|` over `samples` seeded points of `B₁ × B₂` and the
/// extra points given.
pub fn uniform_gap(
    spec: &ProblemSpec,
    ua: &ParameterFunction,
    ub: &ParameterFunction,
    radii: (f64, f64),
    samples: usize,
    seed: u64,
    extra: &[(GridFunction, GridFunction)],
) -> Result<f64, ProblemError> {
    let t = spec.t();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap = 0.0_f64;
    let mut eval = |x: &GridFunction, y: &GridFunction| -> Result<(), ProblemError> {
        let d = (spec.action(ua, x, y)? - spec.action(ub, x, y)?).abs();
        gap = gap.max(d);
        Ok(())
    };
    for _ in 0..samples {
        let x = sample_in_ball(t, radii.0, &mut rng);
        let y = sample_in_ball(t, radii.1, &mut rng);
        eval(&x, &y)?;
    }
    for (x, y) in extra {
        eval(x, y)?;
    }
    Ok(gap)
}

/// Largest difference quotient of `F` in `u` over a grid of `density`
/// points per axis of `[1, T] × [-S₁, S₁] × [-S₂, S₂] × [-D, D]`, where
/// `S_i` bound the sup norm on `B_i`.
pub fn lipschitz_in_u(spec: &ProblemSpec, radii: (f64, f64), density: usize) -> Result<f64, ProblemError> {
    let t = spec.t();
    let n = density.max(2);
    let grid = |r: f64| (0..n).map(move |i| -r + 2.0 * r * i as f64 / (n - 1) as f64);
    let sx = sup_norm_bound(t, radii.0)?;
    let sy = sup_norm_bound(t, radii.1)?;
    let us: Vec<f64> = grid(spec.bound()).collect();
    let mut lip = 0.0_f64;
    for k in 1..=t {
        for x in grid(sx) {
            for y in grid(sy) {
                let mut prev = spec.integrand(k, x, y, us[0])?;
                for w in us.windows(2) {
                    let next = spec.integrand(k, x, y, w[1])?;
                    lip = lip.max((next - prev).abs() / (w[1] - w[0]));
                    prev = next;
                }
            }
        }
    }
    Ok(lip)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRow {
    pub n: usize,
    pub projected: bool,
    /// `‖u_n - u_0‖_C`.
    pub u_distance: f64,
    pub a_n: f64,
    /// Largest distance from a representative of `V̂_n` to `V̂_0`.
    pub dist_n: f64,
    pub gap_n: f64,
    pub value_gap: f64,
    /// `Lip_F · ‖u_n - u_0‖_C · T`.
    pub gap_bound: f64,
    pub points: Vec<SaddleCandidate>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceReport {
    pub a_0: f64,
    pub v0: SaddleSet,
    pub rows: Vec<SequenceRow>,
    pub lipschitz_u: f64,
    pub all_nonempty: bool,
    pub final_dist: f64,
    pub final_value_gap: f64,
    /// `dist_N ≤ tol_dep`.
    pub dist_converged: bool,
    /// `|a_N - a_0| ≤ tol_dep` with `|a_n - a_0|` nonincreasing.
    pub value_converged: bool,
    /// `|a_n - a_0| ≤ gap_n + 2·tol` for every row.
    pub values_within_gap: bool,
    /// `gap_n ≤ Lip_F·‖u_n - u_0‖_C·T` for every row.
    pub gaps_within_bound: bool,
}

fn saddle_value(set: &SaddleSet) -> f64 {
    set.points.first().map_or(f64::NAN, |p| p.value)
}

/// Computes `V̂_0` and `V̂_n` along the schedule and the derived distances,
/// values and gaps. A solver failure at some `n` is recorded in its row.
pub fn run_sequence(
    spec: &ProblemSpec,
    seq: &ParameterSequence,
    cfg: &DependenceConfig,
) -> Result<DependenceReport, SolverError> {
    let u0 = seq.limit();
    let v0 = saddle_set(spec, u0, &cfg.solver, cfg.radii)?;
    let a_0 = saddle_value(&v0);
    let lipschitz_u = lipschitz_in_u(spec, cfg.radii, 9)?;
    let t = spec.t() as f64;
    let tol_value = 2.0 * cfg.solver.tol_grad.max(cfg.solver.tol_res);
    let rows: Vec<SequenceRow> = seq
        .schedule()
        .into_par_iter()
        .map(|n| -> Result<SequenceRow, SolverError> {
            let (un, projected) = seq.member(n)?;
            let u_distance = un.sup_distance(u0);
            let mut row = SequenceRow {
                n,
                projected,
                u_distance,
                a_n: f64::NAN,
                dist_n: f64::NAN,
                gap_n: f64::NAN,
                value_gap: f64::NAN,
                gap_bound: lipschitz_u * u_distance * t,
                points: Vec::new(),
                failure: None,
            };
            let set = match saddle_set(spec, &un, &cfg.solver, cfg.radii) {
                Ok(s) if !s.is_empty() => s,
                Ok(_) => {
                    row.failure = Some("no start converged".into());
                    return Ok(row);
                }
                Err(e) => {
                    row.failure = Some(e.to_string());
                    return Ok(row);
                }
            };
            row.a_n = saddle_value(&set);
            row.dist_n = set.points.iter().map(|p| v0.distance_to(&p.x, &p.y)).fold(0.0, f64::max);
            let mut cross = Vec::new();
            for p in &set.points {
                for q in &v0.points {
                    cross.push((q.x.clone(), p.y.clone()));
                    cross.push((p.x.clone(), q.y.clone()));
                }
            }
            row.gap_n = uniform_gap(spec, &un, u0, cfg.radii, cfg.gap_samples, cfg.solver.seed, &cross)?;
            row.value_gap = (row.a_n - a_0).abs();
            row.points = set.points;
            Ok(row)
        })
        .collect::<Result<_, _>>()?;

    let all_nonempty = !v0.is_empty() && rows.iter().all(|r| !r.points.is_empty());
    let last = rows.last().expect("schedule is nonempty");
    let final_dist = last.dist_n;
    let final_value_gap = last.value_gap;
    let nonincreasing = rows
        .windows(2)
        .all(|w| w[1].value_gap <= w[0].value_gap + tol_value);
    let value_converged = nonincreasing && final_value_gap <= cfg.tol_dep;
    let values_within_gap = rows.iter().all(|r| r.value_gap <= r.gap_n + tol_value);
    let gaps_within_bound = rows.iter().all(|r| r.gap_n <= r.gap_bound * (1.0 + 1e-12) + 1e-12);
    Ok(DependenceReport {
        a_0,
        rows,
        lipschitz_u,
        all_nonempty,
        final_dist,
        final_value_gap,
        dist_converged: final_dist <= cfg.tol_dep,
        value_converged,
        values_within_gap,
        gaps_within_bound,
        v0,
    })
}

/// One accumulation cluster of the tail candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitCluster {
    /// The tail levels contributing to this cluster.
    pub levels: Vec<usize>,
    pub estimate_x: GridFunction,
    pub estimate_y: GridFunction,
    /// Distance of the last-level candidate to `V̂_0`.
    pub raw_distance: f64,
    /// Distance of the extrapolated limit estimate to `V̂_0`.
    pub estimate_distance: f64,
    /// Distance of the polished limit to `V̂_0`.
    pub polished_distance: f64,
    pub polished: Option<SaddleCandidate>,
    pub verification: Option<SaddleReport>,
    pub passed: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpperLimitReport {
    pub passed: bool,
    pub tol: f64,
    pub clusters: Vec<LimitCluster>,
}

/// Checks that every accumulation cluster of the tail `n ≥ N/2` lies in
/// `V̂_0`: the limit of each cluster is estimated by Richardson extrapolation
/// in `1/n` over its two largest levels (or taken as its last candidate when
/// only one level exists), must lie within `tol` of `V̂_0`, and after a
/// polishing solve for `u_0` must pass [`verify_saddle`] and still lie within
/// `tol` of `V̂_0`.
pub fn upper_limit_check(
    spec: &ProblemSpec,
    seq: &ParameterSequence,
    report: &DependenceReport,
    v0: &SaddleSet,
    cfg: &DependenceConfig,
    tol: f64,
) -> UpperLimitReport {
    let u0 = seq.limit();
    let n_max = report.rows.last().map_or(1, |r| r.n);
    let tail: Vec<&SequenceRow> = report.rows.iter().filter(|r| 2 * r.n >= n_max).collect();
    let mut clusters = Vec::new();
    if let Some(last) = tail.last() {
        if last.points.is_empty() {
            clusters.push(LimitCluster {
                levels: vec![last.n],
                estimate_x: GridFunction::zeros(spec.t()).expect("t >= 1"),
                estimate_y: GridFunction::zeros(spec.t()).expect("t >= 1"),
                raw_distance: f64::INFINITY,
                estimate_distance: f64::INFINITY,
                polished_distance: f64::INFINITY,
                polished: None,
                verification: None,
                passed: false,
                failure: Some(last.failure.clone().unwrap_or_else(|| "empty saddle set".into())),
            });
        }
        for leader in &last.points {
            // earlier tail levels join the final-level representative nearest to them
            let mut members: Vec<(usize, &SaddleCandidate)> = vec![(last.n, leader)];
            for row in tail.iter().rev().skip(1) {
                let nearest = row.points.iter().min_by(|a, b| {
                    let da = leader.distance(a);
                    let db = leader.distance(b);
                    da.total_cmp(&db)
                });
                if let Some(p) = nearest {
                    let owner = last
                        .points
                        .iter()
                        .min_by(|a, b| a.distance(p).total_cmp(&b.distance(p)))
                        .expect("nonempty");
                    if std::ptr::eq(owner, leader) {
                        members.push((row.n, p));
                    }
                }
            }
            clusters.push(check_cluster(spec, u0, v0, cfg, tol, leader, &members));
        }
    }
    let passed = !clusters.is_empty() && clusters.iter().all(|c| c.passed);
    UpperLimitReport { passed, tol, clusters }
}

fn check_cluster(
    spec: &ProblemSpec,
    u0: &ParameterFunction,
    v0: &SaddleSet,
    cfg: &DependenceConfig,
    tol: f64,
    leader: &SaddleCandidate,
    members: &[(usize, &SaddleCandidate)],
) -> LimitCluster {
    let levels: Vec<usize> = members.iter().map(|m| m.0).collect();
    let (estimate_x, estimate_y) = match members {
        [(n2, p2), (n1, p1), ..] => {
            let (a, b) = (*n2 as f64, *n1 as f64);
            let w2 = a / (a - b);
            let w1 = -b / (a - b);
            (p2.x.scale(w2).axpy(w1, &p1.x), p2.y.scale(w2).axpy(w1, &p1.y))
        }
        _ => (leader.x.clone(), leader.y.clone()),
    };
    let raw_distance = v0.distance_to(&leader.x, &leader.y);
    let estimate_distance = v0.distance_to(&estimate_x, &estimate_y);
    let mut cluster = LimitCluster {
        levels,
        estimate_x,
        estimate_y,
        raw_distance,
        estimate_distance,
        polished_distance: f64::INFINITY,
        polished: None,
        verification: None,
        passed: false,
        failure: None,
    };
    match solve(spec, u0, (&cluster.estimate_x, &cluster.estimate_y), &cfg.solver) {
        Ok(out) => {
            let c = out.candidate;
            let probes = ProbeConfig::from_solver(&cfg.solver, Some(cfg.radii));
            let rep = verify_saddle(spec, u0, &c, &probes);
            cluster.polished_distance = v0.distance_to(&c.x, &c.y);
            cluster.passed = c.converged
                && rep.passed
                && cluster.polished_distance <= tol
                && cluster.estimate_distance <= tol;
            if !cluster.passed {
                cluster.failure = Some(if !c.converged {
                    "polishing solve did not converge".into()
                } else if !rep.passed {
                    rep.failures.join("; ")
                } else {
                    format!(
                        "limit estimate at distance {:e} (polished {:e}) from the saddle set for u0",
                        cluster.estimate_distance, cluster.polished_distance
                    )
                });
            }
            cluster.polished = Some(c);
            cluster.verification = Some(rep);
        }
        Err(e) => cluster.failure = Some(e.to_string()),
    }
    cluster
}
