//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines are always printed.

mod common;

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saddlebvp::dependence::{run_sequence, upper_limit_check, DependenceConfig, ParameterSequence};
use saddlebvp::expr::{self, BinOp, Expr, Func, ScalarField, Var};
use saddlebvp::grid::{self, embedding_constant, GridFunction};
use saddlebvp::hypotheses::{ball_radii, check_concavity_y, check_convexity_x};
use saddlebvp::problem::{Method, ParameterFunction, ProblemSpec};
use saddlebvp::solvers::{
    fan_gap, saddle_set, solve, start_point, verify_saddle, ProbeConfig, SolverConfig,
};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Smallest eigenvalue of `L` by inverse iteration, i.e. maximization of the
/// Rayleigh quotient `Σx² / Σ|Δx|²`, with its own Thomas solve.
fn rayleigh_max(t: usize) -> f64 {
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; t];
        let mut d = vec![0.0; t];
        for i in 0..t {
            let prev_c = if i > 0 { c[i - 1] } else { 0.0 };
            let prev_d = if i > 0 { d[i - 1] } else { 0.0 };
            let denom = 2.0 + prev_c;
            c[i] = -1.0 / denom;
            d[i] = (rhs[i] + prev_d) / denom;
        }
        let mut x = d;
        for i in (0..t.saturating_sub(1)).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    };
    let mut v: Vec<f64> = (1..=t).map(|k| 1.0 + 0.1 * (k as f64).sin()).collect();
    let mut q = 0.0;
    for _ in 0..400 {
        let w = solve(&v);
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        let next = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            / v.iter().map(|a| a * a).sum::<f64>();
        v = w.into_iter().map(|a| a / norm).collect();
        if (next - q).abs() <= 1e-15 * next {
            q = next;
            break;
        }
        q = next;
    }
    q
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_closed = 0.0_f64;
    let mut worst_brute = 0.0_f64;
    for t in 1..=200 {
        let c = embedding_constant(2, t).map_err(|e| e.to_string())?;
        let s = (std::f64::consts::PI / (2.0 * (t as f64 + 1.0))).sin();
        let closed = 1.0 / (4.0 * s * s);
        worst_closed = worst_closed.max((c.value - closed).abs());
        worst_brute = worst_brute.max((c.value - rayleigh_max(t)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst_closed <= 1e-10, || format!("closed form error {worst_closed:e}"))?;
    ensure(worst_brute <= 1e-7, || format!("Rayleigh error {worst_brute:e}"))?;
    ensure(secs < 5.0, || format!("runtime {secs:.2} s"))?;
    Ok(format!("max error {worst_closed:.1e} vs closed form, {worst_brute:.1e} vs Rayleigh, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let t = rng.random_range(1..=20);
        let inst = nonlinear_instance(&mut rng, t);
        ensure(certified(&inst), || format!("instance not certified: {}", inst.f))?;
        let x = grid::sample_in_ball(t, 2.0, &mut rng);
        let y = grid::sample_in_ball(t, 2.0, &mut rng);
        let (gx, gy) = inst.spec.grad(&inst.u, &x, &y).unwrap();
        let h = 1e-5;
        let mut fd = Vec::with_capacity(2 * t);
        for which in 0..2 {
            for i in 0..t {
                let shift = |s: f64| {
                    let mut vx = x.interior().to_vec();
                    let mut vy = y.interior().to_vec();
                    if which == 0 {
                        vx[i] += s;
                    } else {
                        vy[i] += s;
                    }
                    inst.spec.action(&inst.u, &grid(&vx), &grid(&vy)).unwrap()
                };
                fd.push((shift(h) - shift(-h)) / (2.0 * h));
            }
        }
        let g: Vec<f64> = gx.iter().chain(&gy).copied().collect();
        let scale = g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_diff(&g, &fd) / scale);
    }
    ensure(worst <= 1e-6, || format!("relative error {worst:e}"))?;
    Ok(format!("100 instances, max relative error {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut verified = 0;
    let mut fine = 0;
    let mut worst_ratio = 0.0_f64;
    for i in 0..6 {
        let t = rng.random_range(1..=12);
        let inst = nonlinear_instance(&mut rng, t);
        let c2 = grid::c2(t).unwrap();
        let r = ball_radii(&inst.cert, c2, t).unwrap();
        let method = [Method::Newton, Method::Extragradient, Method::Nested][i % 3];
        let cfg = SolverConfig { multistart: 4, seed: i as u64, ..SolverConfig::with_method(method) };
        let set = saddle_set(&inst.spec, &inst.u, &cfg, (r.r1, r.r2)).unwrap();
        let bound = 1e-8 * (1.0 + inst.spec.lap().inf_norm());
        for p in &set.points {
            let rep = verify_saddle(&inst.spec, &inst.u, p, &ProbeConfig::from_solver(&cfg, Some((r.r1, r.r2))));
            if rep.passed {
                verified += 1;
                let res = inst.spec.residual(&inst.u, &p.x, &p.y).unwrap();
                ensure(res <= bound, || format!("verified candidate with residual {res:e}"))?;
            }
        }
        // residual ≤ 1e-12 forces a small gradient
        let tight = SolverConfig { tol_res: 1e-13, tol_grad: 1e-13, ..SolverConfig::default() };
        let (x0, y0) = start_point(t, (1.0, 1.0), i as u64, 0);
        let c = solve(&inst.spec, &inst.u, (&x0, &y0), &tight).unwrap().candidate;
        if c.residual_norm <= 1e-12 {
            fine += 1;
            ensure(c.grad_norm <= 1e-10, || format!("residual {:e} but gradient {:e}", c.residual_norm, c.grad_norm))?;
        }
        for _ in 0..20 {
            let x = grid::sample_in_ball(t, 3.0, &mut rng);
            let y = grid::sample_in_ball(t, 3.0, &mut rng);
            let res = inst.spec.residual(&inst.u, &x, &y).unwrap();
            let (gx, gy) = inst.spec.grad(&inst.u, &x, &y).unwrap();
            let g = gx.iter().chain(&gy).fold(0.0_f64, |m, v| m.max(v.abs()));
            worst_ratio = worst_ratio.max((res - g).abs() / (1.0 + g));
        }
    }
    ensure(verified > 0 && fine > 0, || "no candidates examined".into())?;
    ensure(worst_ratio <= 1e-12, || format!("residual and gradient differ by {worst_ratio:e}"))?;
    Ok(format!("{verified} verified saddles solve the system; {fine} tight solutions have small gradients"))
}

fn criterion_4() -> Outcome {
    let spec = ProblemSpec::parse(1, 2.0, "x*y + u*(x - y)").unwrap();
    let u = ParameterFunction::constant(1, 1.0, 2.0).unwrap();
    let (x0, y0) = (grid(&[1.3]), grid(&[-0.4]));
    let mut worst = (0.0_f64, 0.0_f64);
    for m in [Method::Extragradient, Method::Newton, Method::Nested] {
        let c = solve(&spec, &u, (&x0, &y0), &SolverConfig::with_method(m)).unwrap().candidate;
        let dz = (c.x.at(1) + 0.2).abs().max((c.y.at(1) + 0.6).abs());
        let dv = (c.value - 0.2).abs();
        ensure(dz <= 1e-8 && dv <= 1e-10, || format!("{m}: point error {dz:e}, value error {dv:e}"))?;
        worst = (worst.0.max(dz), worst.1.max(dv));
    }
    Ok(format!("three solvers at (-0.2, -0.6), point error {:.1e}, value error {:.1e}", worst.0, worst.1))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_newton = 0.0_f64;
    let mut worst_other = 0.0_f64;
    for i in 0..20 {
        let t = rng.random_range(1..=15);
        let qd = quadratic_instance(&mut rng, t);
        let zero = GridFunction::zeros(t).unwrap();
        let cx = check_convexity_x(&qd.spec, &qd.u, &zero, 3.0, 10, i).unwrap();
        let cy = check_concavity_y(&qd.spec, &qd.u, &zero, 3.0, 10, i).unwrap();
        ensure(cx.passed && cy.passed && cx.exact && cy.exact, || format!("not certified: {}", qd.f))?;
        let (ox, oy) = quadratic_oracle(&qd);
        let (x0, y0) = start_point(t, (2.0, 2.0), i, 0);
        for m in [Method::Newton, Method::Extragradient, Method::Nested] {
            let c = solve(&qd.spec, &qd.u, (&x0, &y0), &SolverConfig::with_method(m)).unwrap().candidate;
            let err = max_diff(c.x.interior(), &ox).max(max_diff(c.y.interior(), &oy));
            if m == Method::Newton {
                worst_newton = worst_newton.max(err);
            } else {
                worst_other = worst_other.max(err);
            }
        }
    }
    ensure(worst_newton <= 1e-8, || format!("Newton error {worst_newton:e}"))?;
    ensure(worst_other <= 1e-6, || format!("extragradient/nested error {worst_other:e}"))?;
    Ok(format!("20 instances, Newton error {worst_newton:.1e}, others {worst_other:.1e}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0_f64;
    for i in 0..10 {
        let t = rng.random_range(1..=10);
        let inst = nonlinear_instance(&mut rng, t);
        ensure(certified(&inst), || format!("instance not certified: {}", inst.f))?;
        let (x0, y0) = start_point(t, (2.0, 2.0), i, 0);
        let fan = fan_gap(&inst.spec, &inst.u, (&x0, &y0), &SolverConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max(fan.gap);
    }
    ensure(worst <= 1e-8, || format!("gap {worst:e}"))?;
    Ok(format!("10 instances, max |min max - max min| = {worst:.1e}"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    let mut count = 0;
    for i in 0..10 {
        let t = rng.random_range(1..=10);
        let inst = nonlinear_instance(&mut rng, t);
        ensure(certified(&inst), || format!("instance not certified: {}", inst.f))?;
        let r = ball_radii(&inst.cert, grid::c2(t).unwrap(), t).unwrap();
        let cfg = SolverConfig { multistart: 4, seed: i, ..SolverConfig::default() };
        let set = saddle_set(&inst.spec, &inst.u, &cfg, (r.r1, r.r2)).unwrap();
        for p in &set.points {
            let rep = verify_saddle(&inst.spec, &inst.u, p, &ProbeConfig::from_solver(&cfg, Some((r.r1, r.r2))));
            if rep.passed {
                count += 1;
                let escape = (p.x.h_norm() / r.r1).max(p.y.h_norm() / r.r2);
                worst = worst.max(escape);
                ensure(escape <= 1.0 + 1e-6, || format!("saddle escapes its ball by ratio {escape}"))?;
            }
        }
    }
    ensure(count > 0, || "no verified saddles".into())?;
    Ok(format!("{count} verified saddles, largest ‖z‖/r = {worst:.3}"))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    // closed-form family u_n = 1 + 1/n
    let spec = ProblemSpec::parse(1, 2.0, "x*y + u*(x - y)").unwrap();
    let u0 = ParameterFunction::constant(1, 1.0, 2.0).unwrap();
    let seq = ParameterSequence::with_direction(u0, vec![1.0], 64).unwrap();
    let solver = SolverConfig { multistart: 2, ..SolverConfig::default() };
    let cfg = DependenceConfig::new(solver.clone(), (3.0, 3.0));
    let rep = run_sequence(&spec, &seq, &cfg).map_err(|e| e.to_string())?;
    for row in &rep.rows {
        let n = row.n as f64;
        let dist = (0.8f64).sqrt() / n;
        let gap = (2.0 / n + 1.0 / (n * n)) / 5.0;
        ensure((row.dist_n - dist).abs() <= 1e-6 + solver.tol_grad, || format!("n={}: dist {} vs {dist}", row.n, row.dist_n))?;
        ensure((row.value_gap - gap).abs() <= 1e-8, || format!("n={}: value gap {} vs {gap}", row.n, row.value_gap))?;
    }

    // random nonlinear instances, u_n = u_0 + v/n with ‖v‖_C = 1e-3
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_dist = 0.0_f64;
    for i in 0..5 {
        let t = rng.random_range(1..=8);
        let inst = nonlinear_instance(&mut rng, t);
        ensure(certified(&inst), || format!("instance not certified: {}", inst.f))?;
        let r = ball_radii(&inst.cert, grid::c2(t).unwrap(), t).unwrap();
        let u0 = random_u(&mut rng, t, 0.5);
        let mut v: Vec<f64> = (0..t).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let vmax = v.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        v.iter_mut().for_each(|a| *a *= 1e-3 / vmax);
        let seq = ParameterSequence::with_direction(u0, v, 64).unwrap();
        let solver = SolverConfig { multistart: 2, seed: i, ..SolverConfig::default() };
        let cfg = DependenceConfig { gap_samples: 64, ..DependenceConfig::new(solver, (r.r1, r.r2)) };
        let rep = run_sequence(&inst.spec, &seq, &cfg).map_err(|e| e.to_string())?;
        ensure(rep.all_nonempty, || "empty saddle set".into())?;
        ensure(rep.final_dist <= 1e-4, || format!("dist_64 = {:e}", rep.final_dist))?;
        ensure(rep.values_within_gap, || "value gap exceeds uniform gap + 2 tol".into())?;
        let a_last = rep.rows.last().unwrap().a_n;
        let cauchy: Vec<f64> = rep.rows.iter().map(|r| (r.a_n - a_last).abs()).collect();
        ensure(cauchy.windows(2).all(|w| w[1] <= w[0] + 1e-12), || format!("|a_n - a_N| not decreasing: {cauchy:?}"))?;
        let check = upper_limit_check(&inst.spec, &seq, &rep, &rep.v0, &cfg, 1e-4);
        ensure(check.passed, || format!("upper limit check failed: {:?}", check.clusters.first().and_then(|c| c.failure.clone())))?;
        worst_dist = worst_dist.max(rep.final_dist);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("runtime {secs:.1} s"))?;
    Ok(format!("closed-form family matches; random instances dist_64 <= {worst_dist:.1e}; {secs:.2} s"))
}

fn random_expr(rng: &mut ChaCha8Rng, depth: u32) -> Expr {
    let leaf = depth == 0 || rng.random_bool(0.3);
    if leaf {
        return if rng.random_bool(0.5) {
            let v = [Var::K, Var::X, Var::Y, Var::U][rng.random_range(0..4)];
            Expr::Var(v)
        } else {
            let mag = [0.0, 1.0, 2.0, 0.5, 3.25, 1e-7, 12345.678][rng.random_range(0..7)];
            Expr::Num(if rng.random_bool(0.3) { -mag } else { mag })
        };
    }
    match rng.random_range(0..3) {
        0 => {
            let a = random_expr(rng, depth - 1);
            if matches!(a, Expr::Num(_)) {
                a
            } else {
                Expr::Neg(Box::new(a))
            }
        }
        1 => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow][rng.random_range(0..5)];
            Expr::Bin(op, Box::new(random_expr(rng, depth - 1)), Box::new(random_expr(rng, depth - 1)))
        }
        _ => {
            let f = Func::ALL[rng.random_range(0..Func::ALL.len())];
            Expr::Call(f, Box::new(random_expr(rng, depth - 1)))
        }
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // derivatives over every differentiable function
    let bodies = [
        "sin(x*y + u)", "cos(2*x - y)", "exp(0.3*x*y)", "log(2 + x^2 + y^2)",
        "sqrt(1 + x^2 + k*y^2)", "tanh(x - 0.5*y + u)", "x^3*y - y^2/(1 + x^2)",
        "abs(u - k)*x*y", "x^y", "2^(x*y)",
    ];
    let mut worst = 0.0_f64;
    for body in bodies {
        let field = ScalarField::parse(body).map_err(|e| format!("{body}: {e}"))?;
        let second = field.second.as_ref().ok_or_else(|| format!("{body}: no second partials"))?;
        for _ in 0..40 {
            let env = expr::Env::new(
                rng.random_range(1..=5) as f64,
                rng.random_range(0.2..1.5),
                rng.random_range(0.2..1.5),
                rng.random_range(-1.0..1.0),
            );
            let h = 1e-5;
            let at = |e: &Expr, dx: f64, dy: f64| e.eval(&expr::Env::new(env.k, env.x + dx, env.y + dy, env.u)).unwrap();
            let pairs = [
                (&field.fx, (at(&field.f, h, 0.0) - at(&field.f, -h, 0.0)) / (2.0 * h)),
                (&field.fy, (at(&field.f, 0.0, h) - at(&field.f, 0.0, -h)) / (2.0 * h)),
                (&second.fxx, (at(&field.fx, h, 0.0) - at(&field.fx, -h, 0.0)) / (2.0 * h)),
                (&second.fxy, (at(&field.fx, 0.0, h) - at(&field.fx, 0.0, -h)) / (2.0 * h)),
                (&second.fyy, (at(&field.fy, 0.0, h) - at(&field.fy, 0.0, -h)) / (2.0 * h)),
            ];
            for (d, fd) in pairs {
                let sym = at(d, 0.0, 0.0);
                worst = worst.max((sym - fd).abs() / (1.0 + sym.abs()));
            }
        }
    }
    ensure(worst <= 1e-6, || format!("derivative error {worst:e}"))?;
    ensure(ScalarField::parse("abs(x)*y").is_err(), || "abs(x) was differentiated".into())?;

    // parse-print round trip
    for i in 0..1000 {
        let e = random_expr(&mut rng, 5);
        let text = e.to_string();
        let back = expr::parse(&text).map_err(|err| format!("#{i} '{text}': {err}"))?;
        ensure(back == e, || format!("#{i} '{text}' reparsed as '{back}'"))?;
    }
    Ok(format!("derivatives of {} fields within {worst:.1e}; 1000 ASTs round-trip", bodies.len()))
}

fn run_cli(args: &[&str]) -> Result<i32, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_saddlebvp"))
        .args(args)
        .env("SADDLEBVP_THREADS", "3")
        .stderr(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    Ok(status.code().unwrap_or(-1))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(
        p("problem.json"),
        r#"{"T": 6, "D": 1, "F": "0.4*x^2 - 0.3*y^2 + x*y + 0.2*sin(x + y + k) + u*(x - y)", "u": "0.5*sin(k)"}"#,
    )
    .unwrap();
    std::fs::write(p("seq.json"), r#"{"u0": "0.5*sin(k)", "direction": [0.1, 0, 0, 0, 0, -0.1], "N": 16}"#).unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = p(run);
        for method in ["extragradient", "nested"] {
            let code = run_cli(&["solve", &p("problem.json"), "--method", method, "--seed", "11", "--multistart", "6", "--out", &format!("{out}/{method}")])?;
            ensure(code == 0, || format!("solve exited {code}"))?;
        }
        let code = run_cli(&["sweep", &p("problem.json"), "--sequence", &p("seq.json"), "--seed", "11", "--multistart", "3", "--out", &out])?;
        ensure(code == 0, || format!("sweep exited {code}"))?;
        files.push(out);
    }
    let names = [
        "extragradient/saddle_set.json",
        "extragradient/trace.csv",
        "nested/saddle_set.json",
        "nested/trace.csv",
        "sweep.csv",
        "sweep_summary.json",
    ];
    for name in names {
        let a = std::fs::read(format!("{}/{name}", files[0])).map_err(|e| e.to_string())?;
        let b = std::fs::read(format!("{}/{name}", files[1])).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} result files byte-identical across two runs", names.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("embedding constant", criterion_1),
        ("gradient check", criterion_2),
        ("critical point <=> solution", criterion_3),
        ("closed-form instance", criterion_4),
        ("linear-quadratic oracle", criterion_5),
        ("Fan equality", criterion_6),
        ("ball containment", criterion_7),
        ("parameter dependence", criterion_8),
        ("expression DSL", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
