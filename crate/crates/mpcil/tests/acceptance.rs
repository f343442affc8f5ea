//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line on
//! stderr (uncaptured) and then asserts. Tests share a lock so timings are not
//! disturbed by one another.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use mpcil::bench::{bench_dataset, bench_gradients, evaluate_expert, evaluate_policies, linspace};
use mpcil::config::RunConfig;
use mpcil::io::{write_sweep, SweepPoint};
use mpcil_core::dynamics::{solve_dare, CartPole, CartPoleParams, DiscreteDynamics};
use mpcil_core::eval::test_states;
use mpcil_core::imitation::{control_bounds, sample_initial_state, train, LossKind};
use mpcil_core::ocp::{sqp_solve, OcpSolution, OcpSpec, SqpSettings, SqpStatus};
use mpcil_core::policy::MlpPolicy;
use mpcil_core::qloss::{q_exact, q_gn, GnQTemplate};
use mpcil_core::qp::{solve_qp, DenseQp, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let line = format!("ACCEPTANCE {id} {} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}

fn spec() -> OcpSpec {
    RunConfig::default().spec().unwrap()
}

fn artifact_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// States drawn like training states: uniform in 0.3 of the box, kept only
/// when the expert needs no slack.
fn filtered_states(spec: &OcpSpec, n: usize, seed: u64) -> Vec<(Vec<f64>, OcpSolution)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SqpSettings::tight();
    (0..n)
        .map(|_| {
            let (x, sol) = sample_initial_state(&mut rng, 0.3, spec, &settings, 1e-6, 10_000).unwrap();
            (x.as_slice().to_vec(), sol)
        })
        .collect()
}

fn tight_qp() -> QpSettings {
    QpSettings {
        tol: 1e-12,
        max_iter: 200,
        ..QpSettings::default()
    }
}

#[test]
fn c1_exact_q_gradient_is_the_pin_multiplier() {
    let _g = serial();
    let start = Instant::now();
    let spec = spec();
    let settings = SqpSettings::tight();
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let states = filtered_states(&spec, 120, 11);
    let (mut checked, mut kinks, mut unconverged) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    for (x, sol) in &states {
        let u = rng.random_range(-25.0..25.0);
        let q = |v: f64| q_exact(&spec, x, &[v], Some(sol), &settings).unwrap();
        let at = q(u);
        let evals = [q(u - 2.0 * h), q(u - h), q(u + h), q(u + 2.0 * h)];
        if !at.converged || evals.iter().any(|e| !e.converged) {
            unconverged += 1;
            continue;
        }
        let [m2, m1, p1, p2] = evals.map(|e| e.value);
        // Second differences at h and 2h agree on a smooth piece; a kink
        // inside the stencil makes the narrow one blow up like 1/h.
        let d2_h = (p1 - 2.0 * at.value + m1) / (h * h);
        let d2_2h = (p2 - 2.0 * at.value + m2) / (4.0 * h * h);
        if (d2_h - d2_2h).abs() > 1.0 + 0.1 * d2_2h.abs() {
            kinks += 1;
            continue;
        }
        let fd = (p1 - m1) / (2.0 * h);
        let g = at.grad_u[0];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let rejected = kinks + unconverged;
    let rate = rejected as f64 / states.len() as f64;
    let passed = checked >= 100 && worst <= 1e-4 && rate < 0.2 && secs <= 600.0;
    report(
        1,
        "exact Q gradient vs central differences",
        passed,
        &format!("{checked} checked, worst rel err {worst:.2e} (tol 1e-4), rejected {rejected} ({kinks} kinks, {unconverged} unconverged, rate {rate:.3}), {secs:.1} s"),
    );
    assert!(passed);
}

/// Q and Q_a on the control grid, plus the values at the expert control.
struct StateGrid {
    q: Vec<f64>,
    qa: Vec<f64>,
    q_star: f64,
    qa_star: f64,
    all_converged: bool,
}

fn state_grids() -> &'static Vec<StateGrid> {
    static GRIDS: std::sync::OnceLock<Vec<StateGrid>> = std::sync::OnceLock::new();
    GRIDS.get_or_init(|| {
        let spec = spec();
        let settings = SqpSettings::tight();
        let controls = linspace(-25.0, 25.0, 41);
        filtered_states(&spec, 20, 22)
            .into_iter()
            .map(|(x, sol)| {
                let template = GnQTemplate::from_trajectory(&spec, &x, sol.traj.clone()).unwrap();
                let ustar = sol.u0()[0];
                let mut all_converged = true;
                let mut exact = |u: f64| {
                    let e = q_exact(&spec, &x, &[u], Some(&sol), &settings).unwrap();
                    all_converged &= e.converged;
                    e.value
                };
                let q: Vec<f64> = controls.iter().map(|&u| exact(u)).collect();
                let q_star = exact(ustar);
                let qa: Vec<f64> = controls.iter().map(|&u| q_gn(&template, &[u], &tight_qp()).unwrap().value).collect();
                let qa_star = q_gn(&template, &[ustar], &tight_qp()).unwrap().value;
                StateGrid {
                    q,
                    qa,
                    q_star,
                    qa_star,
                    all_converged,
                }
            })
            .collect()
    })
}

#[test]
fn c2_q_and_gn_q_are_minimized_at_the_expert_and_gn_q_is_convex() {
    let _g = serial();
    let start = Instant::now();
    let grids = state_grids();
    let mut worst_q = f64::NEG_INFINITY;
    let mut worst_qa = f64::NEG_INFINITY;
    let mut worst_convex = f64::NEG_INFINITY;
    for s in grids {
        // How far the expert value sits above the best grid value.
        worst_q = worst_q.max(s.q_star - s.q.iter().cloned().fold(f64::INFINITY, f64::min));
        worst_qa = worst_qa.max(s.qa_star - s.qa.iter().cloned().fold(f64::INFINITY, f64::min));
        for i in 0..s.qa.len() {
            for j in (i + 2..s.qa.len()).step_by(2) {
                let mid = (i + j) / 2;
                worst_convex = worst_convex.max(s.qa[mid] - 0.5 * (s.qa[i] + s.qa[j]));
            }
        }
    }
    let converged = grids.iter().all(|s| s.all_converged);
    let secs = start.elapsed().as_secs_f64();
    let passed = worst_q <= 1e-8 && worst_qa <= 1e-8 && worst_convex <= 1e-8 && converged && secs <= 900.0;
    report(
        2,
        "Q and Q_a minimized at the expert control, Q_a midpoint convex",
        passed,
        &format!(
            "20 states x 41 controls: max Q(u*) - min Q {worst_q:.2e}, max Q_a(u*) - min Q_a {worst_qa:.2e}, worst midpoint excess {worst_convex:.2e} (tol 1e-8), all exact solves converged: {converged}, {secs:.1} s"
        ),
    );
    assert!(passed);
}

#[test]
fn c3_gn_q_touches_exact_q_at_the_expert_control() {
    let _g = serial();
    let grids = state_grids();
    let worst = grids.iter().map(|s| (s.qa_star - s.q_star).abs()).fold(0.0, f64::max);
    let passed = worst <= 1e-6;
    report(3, "Q_a touches Q at u*", passed, &format!("20 states, max |Q_a - Q| at u* {worst:.2e} (tol 1e-6)"));
    assert!(passed);
}

#[test]
fn c4_tilted_pole_q_sweep() {
    let _g = serial();
    let spec = spec();
    let settings = SqpSettings::tight();
    let x = [0.8, 0.0, std::f64::consts::FRAC_PI_4, 0.0];
    let expert = sqp_solve(&spec, &x, None, &settings).unwrap();
    let ustar = expert.u0()[0];
    let controls = linspace(-25.0, 25.0, 41);
    let template = GnQTemplate::from_trajectory(&spec, &x, expert.traj.clone()).unwrap();
    let points: Vec<SweepPoint> = controls
        .iter()
        .map(|&u| {
            let e = q_exact(&spec, &x, &[u], Some(&expert), &settings).unwrap();
            let a = q_gn(&template, &[u], &tight_qp()).unwrap();
            SweepPoint {
                u,
                q: e.value,
                dq: e.grad_u[0],
                q_converged: e.converged,
                qa: a.value,
                dqa: a.grad_u[0],
            }
        })
        .collect();
    let csv = artifact_dir().join("tilted_pole_q_sweep.csv");
    write_sweep(&points, &csv).unwrap();

    let h = 1e-4;
    let q = |u: f64| q_exact(&spec, &x, &[u], Some(&expert), &settings).unwrap();
    let at15 = q(15.0);
    let fd15 = (q(15.0 + h).value - q(15.0 - h).value) / (2.0 * h);
    let min_d2 = points
        .windows(3)
        .map(|w| w[0].q - 2.0 * w[1].q + w[2].q)
        .fold(f64::INFINITY, f64::min);
    let converged = points.iter().all(|p| p.q_converged) && expert.status == SqpStatus::Optimal;
    let passed = (ustar + 25.0).abs() <= 1e-6 && at15.grad_u[0] > 0.0 && fd15 > 0.0 && min_d2 < 0.0 && converged;
    report(
        4,
        "tilted-pole Q sweep",
        passed,
        &format!(
            "u* = {ustar:.9}, dQ/du at 15 = {:.4e} (fd {fd15:.4e}), most negative second difference {min_d2:.4e}, converged {converged}, csv {}",
            at15.grad_u[0],
            csv.display()
        ),
    );
    assert!(passed);
}

fn best_config() -> Option<RunConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/best.toml");
    RunConfig::load(&path).ok()
}

#[test]
fn c5_scaled_loss_comparison() {
    let _g = serial();
    let start = Instant::now();
    let Some(config) = best_config() else {
        report(5, "scaled loss comparison", false, "configs/best.toml missing or invalid");
        panic!("configs/best.toml missing or invalid");
    };
    let spec = config.spec().unwrap();
    let grid = &config.grid;
    let expert_settings = config.solver.expert.to_core();
    let states = test_states(&spec, grid.alpha, grid.n_states, config.eval.seed, &expert_settings).unwrap();
    let mut reports = Vec::new();
    for loss in LossKind::ALL {
        let seeds: Vec<u64> = if loss == LossKind::QExact { grid.seeds[..1].to_vec() } else { grid.seeds.clone() };
        let policies: Vec<(u64, MlpPolicy)> = seeds
            .iter()
            .map(|&seed| (seed, train(&spec, config.train_config_for(loss, seed).unwrap()).unwrap().0))
            .collect();
        reports.push(evaluate_policies(&spec, loss.name(), grid.alpha, grid.quantile, &policies, &states, config.eval.steps).unwrap());
    }
    let expert = evaluate_expert(&spec, &expert_settings, grid.alpha, grid.quantile, &states, config.eval.steps).unwrap();
    let [l2, q, qgn] = [&reports[0], &reports[1], &reports[2]];
    let vr = |r: &mpcil_core::eval::MetricsReport| r.violation_ratio.mean;
    let costs = [l2.avg_cost.mean, q.avg_cost.mean, qgn.avg_cost.mean];
    let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let violations_ok = vr(q) <= 0.6 * vr(l2) && vr(qgn) <= 0.6 * vr(l2);
    let costs_close = hi <= 1.25 * lo;
    let above_expert = costs.iter().all(|&c| c >= expert.avg_cost.mean);
    let passed = violations_ok && costs_close && above_expert;
    let row = |r: &mpcil_core::eval::MetricsReport| {
        format!(
            "{} cost {:.3}±{:.3} viol {:.3}±{:.3} ({} seeds)",
            r.label,
            r.avg_cost.mean,
            r.avg_cost.std,
            r.violation_ratio.mean,
            r.violation_ratio.std,
            r.per_seed.len()
        )
    };
    report(
        5,
        "scaled loss comparison",
        passed,
        &format!(
            "{}; {}; {}; expert cost {:.3}; violations ok {violations_ok}, costs within 25% {costs_close}, all >= expert {above_expert}, {:.0} s",
            row(l2),
            row(q),
            row(qgn),
            expert.avg_cost.mean,
            start.elapsed().as_secs_f64()
        ),
    );
    mpcil::io::write_metrics(&[reports, vec![expert]].concat(), &artifact_dir().join("scaled_comparison.csv")).unwrap();
    assert!(passed);
}

#[test]
fn c6_gradient_speed_ordering() {
    let _g = serial();
    let config = RunConfig::default();
    let spec = config.spec().unwrap();
    let train_cfg = config.train_config().unwrap();
    let b = &config.bench;
    let (samples, templates) = bench_dataset(&spec, &train_cfg, b.rollouts, b.seed).unwrap();
    let (lb, ub) = control_bounds(&spec).unwrap();
    let policy = MlpPolicy::init(&train_cfg.widths(&spec), &lb, &ub, &mut ChaCha8Rng::seed_from_u64(b.seed)).unwrap();
    let table = bench_gradients(&spec, &policy, &samples, &templates, &train_cfg, b.batch_size, b.iterations, b.seed).unwrap();
    let speed = |l: LossKind| table.iter().find(|e| e.loss == l).unwrap().batches_per_second;
    let (l2, q, qgn) = (speed(LossKind::L2), speed(LossKind::QExact), speed(LossKind::QGn));
    let passed = l2 > qgn && qgn > q && l2 / qgn >= 3.0 && qgn / q >= 2.0;
    report(
        6,
        "gradient speed ordering",
        passed,
        &format!(
            "batches/s l2 {l2:.2}, qgn {qgn:.2}, q {q:.2}; l2/qgn {:.2} (>= 3), qgn/q {:.2} (>= 2); {} samples, batch {}, {} iterations",
            l2 / qgn,
            qgn / q,
            samples.len(),
            b.batch_size,
            b.iterations
        ),
    );
    assert!(passed);
}

/// Cart-pole accelerations from the 2x2 mass-matrix form of the equations of
/// motion.
fn cartpole_rhs(p: &CartPoleParams, x: &[f64; 4], f: f64) -> [f64; 4] {
    let (l, m, big_m, g) = (p.length, p.pole_mass, p.cart_mass, p.gravity);
    let (s, c) = x[2].sin_cos();
    let mass = Matrix2::new(big_m + m, -m * l * c, -m * l * c, m * l * l);
    let rhs = Vector2::new(f - m * l * s * x[3] * x[3], m * g * l * s);
    let acc = mass.lu().solve(&rhs).unwrap();
    [x[1], acc[0], x[3], acc[1]]
}

fn reference_flow(p: &CartPoleParams, x: &[f64; 4], f: f64, t: f64, n: usize) -> [f64; 4] {
    let h = t / n as f64;
    let mut x = *x;
    let add = |a: &[f64; 4], b: &[f64; 4], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]];
    for _ in 0..n {
        let k1 = cartpole_rhs(p, &x, f);
        let k2 = cartpole_rhs(p, &add(&x, &k1, h / 2.0), f);
        let k3 = cartpole_rhs(p, &add(&x, &k2, h / 2.0), f);
        let k4 = cartpole_rhs(p, &add(&x, &k3, h), f);
        for i in 0..4 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

fn library_step(p: &CartPoleParams, dt: f64, substeps: usize) -> DiscreteDynamics {
    DiscreteDynamics::new(Arc::new(CartPole::new(*p).unwrap()), dt, substeps).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c7_numerics() {
    let _g = serial();
    let start = Instant::now();
    let p = CartPoleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut lines = Vec::new();
    let mut ok = true;

    // Integrator order over a 0.2 s interval, the library's RK4 at 4 and 8
    // substeps against a 4096-step reference of an independent model.
    let x = [0.3, -0.2, 0.6, 0.4];
    let reference = reference_flow(&p, &x, 3.0, 0.2, 4096);
    let err = |n: usize| max_diff(&library_step(&p, 0.2, n).step(&x, &[3.0]).unwrap(), &reference);
    let order = (err(4) / err(8)).log2();
    ok &= order >= 3.8;
    lines.push(format!("rk4 order {order:.3} (>= 3.8)"));

    // Step Jacobians against central differences of the step.
    let dynamics = library_step(&p, 0.05, 1);
    let mut worst_jac = 0.0f64;
    for _ in 0..50 {
        let x: Vec<f64> = [2.0, 4.0, 1.0, 2.0].iter().map(|b| rng.random_range(-b..*b)).collect();
        let u = rng.random_range(-25.0..25.0);
        let lin = dynamics.linearize(&x, &[u]).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let shift = |s: f64| {
                let mut xp = x.clone();
                let mut up = u;
                if j < 4 {
                    xp[j] += s;
                } else {
                    up += s;
                }
                dynamics.step(&xp, &[up]).unwrap()
            };
            let (a, b) = (shift(h), shift(-h));
            for i in 0..4 {
                let fd = (a[i] - b[i]) / (2.0 * h);
                let an = if j < 4 { lin.a[(i, j)] } else { lin.b[(i, 0)] };
                worst_jac = worst_jac.max((an - fd).abs());
            }
        }
    }
    ok &= worst_jac <= 1e-5;
    lines.push(format!("jacobian vs fd {worst_jac:.2e} (<= 1e-5)"));

    // Riccati residual evaluated here, at the origin linearization.
    let lin = dynamics.linearize(&[0.0; 4], &[0.0]).unwrap();
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.25, 0.025, 0.25, 0.025]));
    let r = DMatrix::from_element(1, 1, 0.0025);
    let pm = solve_dare(&lin.a, &lin.b, &s, &r, 1e-12, 100_000).unwrap();
    let (a, b) = (&lin.a, &lin.b);
    let gain = (&r + b.transpose() * &pm * b).try_inverse().unwrap();
    let rhs = a.transpose() * &pm * a - a.transpose() * &pm * b * gain * b.transpose() * &pm * a + &s;
    let dare_res = (&pm - rhs).abs().max();
    let one = DMatrix::from_element(1, 1, 1.0);
    let golden = solve_dare(&one, &one, &one, &one, 1e-14, 10_000).unwrap()[(0, 0)];
    let golden_err = (golden - (1.0 + 5f64.sqrt()) / 2.0).abs();
    ok &= dare_res <= 1e-8 && golden_err <= 1e-9;
    lines.push(format!("dare residual {dare_res:.2e} (<= 1e-8), golden ratio err {golden_err:.2e} (<= 1e-9)"));

    // KKT conditions of random strictly convex QPs, computed here.
    let mut worst_kkt = 0.0f64;
    let mut all_optimal = true;
    for _ in 0..50 {
        let n = rng.random_range(3..=12);
        let m_eq = rng.random_range(0..=n / 2);
        let m_in = rng.random_range(1..=2 * n);
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let l = mat(n, n);
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = mat(n, 1).column(0) * 3.0;
        let a = mat(m_eq, n);
        let c = mat(m_in, n);
        let feasible = mat(n, 1).column(0).into_owned();
        let slack = mat(m_in, 1).column(0).map(|v: f64| v.abs());
        let (b, d) = (&a * &feasible, &c * &feasible + slack);
        let qp = DenseQp::new(h.clone(), g.clone()).with_eq(a.clone(), b.clone()).with_in(c.clone(), d.clone());
        let sol = solve_qp(&qp, &QpSettings { tol: 1e-10, ..Default::default() }, None).unwrap();
        all_optimal &= sol.status == QpStatus::Optimal;
        let v = &sol.primal;
        let stat = (&h * v + &g + a.transpose() * &sol.lambda_eq + c.transpose() * &sol.mu_in).abs().max();
        let peq = if m_eq > 0 { (&a * v - &b).abs().max() } else { 0.0 };
        let cv = &c * v - &d;
        let pin = cv.max().max(0.0);
        let comp = cv.iter().zip(sol.mu_in.iter()).map(|(r, mu)| (r * mu).abs()).fold(0.0, f64::max);
        let dual = sol.mu_in.iter().map(|mu| -mu).fold(0.0, f64::max);
        worst_kkt = worst_kkt.max(stat).max(peq).max(pin).max(comp).max(dual);
    }
    ok &= worst_kkt <= 1e-8 && all_optimal;
    lines.push(format!("qp kkt {worst_kkt:.2e} over 50 problems (<= 1e-8), all optimal {all_optimal}"));

    // Policy weight gradient against central differences of g . pi(x; w).
    let mut worst_pol = 0.0f64;
    let mut rejected = 0;
    for (depth, width) in [(1, 64), (2, 128), (3, 256), (2, 32)] {
        let widths: Vec<usize> = std::iter::once(4).chain(std::iter::repeat_n(width, depth)).chain(std::iter::once(1)).collect();
        let policy = MlpPolicy::init(&widths, &[-25.0], &[25.0], &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = rng.random_range(-2.0..2.0);
        let grad = policy.backward(&[(x.clone(), vec![up])]).unwrap();
        for _ in 0..20 {
            let k = rng.random_range(0..policy.params.layers.len());
            let (rows, cols) = policy.params.layers[k].weight.shape();
            let (i, j) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let value = |h: f64| {
                let mut p = policy.clone();
                p.params.layers[k].weight[(i, j)] += h;
                up * p.forward(&x).unwrap()[0]
            };
            let fd = |h: f64| (value(h) - value(-h)) / (2.0 * h);
            let (f1, f2) = (fd(1e-5), fd(5e-6));
            let analytic = grad.layers[k].weight[(i, j)];
            let scale = analytic.abs().max(f1.abs()).max(1e-6);
            if (f1 - f2).abs() > 1e-7 * scale.max(1.0) {
                // A ReLU switches inside the stencil.
                rejected += 1;
                continue;
            }
            worst_pol = worst_pol.max((analytic - f1).abs() / scale);
        }
    }
    ok &= worst_pol <= 1e-6;
    lines.push(format!("policy gradient rel err {worst_pol:.2e} (<= 1e-6), {rejected} kink rejections"));

    let secs = start.elapsed().as_secs_f64();
    ok &= secs <= 120.0;
    lines.push(format!("{secs:.1} s (<= 120)"));
    report(7, "numerics", ok, &lines.join("; "));
    assert!(ok);
}

#[test]
fn c8_training_is_bit_reproducible() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, RunConfig::default().to_toml()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mpcil"))
            .args(["train", "--loss", "l2", "--seed", "3", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out.join("weights.txt")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let passed = a == b && !a.is_empty();
    report(8, "bit-identical training", passed, &format!("two runs, {} bytes each, identical: {}", a.len(), a == b));
    assert!(passed);
}
