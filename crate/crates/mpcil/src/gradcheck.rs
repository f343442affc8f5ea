//! Runtime self-checks of gradients and numerics, backing `mpcil gradcheck`.

use std::fmt;
use std::sync::Arc;

use mpcil_core::dynamics::{solve_dare, dare_residual, CartPole, CartPoleParams, DiscreteDynamics};
use mpcil_core::imitation::{batch_gradient, dagger_rollout, sample_initial_state, LossKind, Sample, TrainConfig};
use mpcil_core::ocp::{OcpSpec, SqpSettings};
use mpcil_core::policy::MlpPolicy;
use mpcil_core::qloss::{q_exact, q_gn, GnQTemplate};
use mpcil_core::qp::{kkt_residuals, solve_qp, DenseQp, QpSettings};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Policy,
    Qloss,
    Imitation,
    Numerics,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Numerics, Suite::Policy, Suite::Qloss, Suite::Imitation];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Policy => "policy",
            Suite::Qloss => "qloss",
            Suite::Imitation => "imitation",
            Suite::Numerics => "numerics",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub checked: usize,
    pub rejected: usize,
    /// Worst error observed, relative unless the name ends in `_abs`. For
    /// `_min` checks it is a measured value that must reach `tol`.
    pub worst: f64,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: worst {:.3e} (tol {:e}), {} checked, {} rejected",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.worst,
            self.tol,
            self.checked,
            self.rejected
        )
    }
}

fn check(suite: &'static str, name: &'static str, errs: &[f64], rejected: usize, tol: f64, min_checked: usize) -> Check {
    let worst = errs.iter().fold(0.0f64, |m, e| if e.is_nan() { f64::INFINITY } else { m.max(*e) });
    Check {
        suite,
        name,
        checked: errs.len(),
        rejected,
        worst,
        tol,
        passed: errs.len() >= min_checked && worst <= tol,
    }
}

/// Richardson-extrapolated central difference; `None` when the two step
/// sizes disagree by more than 1% (a kink between them).
pub fn richardson(f: &mut dyn FnMut(f64) -> Result<f64>, h: f64) -> Result<Option<f64>> {
    let c1 = (f(h)? - f(-h)?) / (2.0 * h);
    let c2 = (f(h / 2.0)? - f(-h / 2.0)?) / h;
    let scale = c2.abs().max(1e-6);
    Ok(((c1 - c2).abs() <= 1e-2 * scale).then(|| (4.0 * c2 - c1) / 3.0))
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn run(suite: Suite, spec: &OcpSpec, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Policy => policy_checks(seed),
        Suite::Qloss => qloss_checks(spec, seed),
        Suite::Imitation => imitation_checks(spec, seed),
        Suite::Numerics => numerics_checks(seed),
    }
}

fn policy_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut errs, mut rejected) = (Vec::new(), 0);
    for depth in 1..=3 {
        for width in [64, 128, 256] {
            let mut widths = vec![4];
            widths.extend(std::iter::repeat_n(width, depth));
            widths.push(1);
            let policy = MlpPolicy::init(&widths, &[-25.0], &[25.0], &mut rng)?;
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream = rng.random_range(-2.0..2.0);
            let grad: Vec<f64> = policy.backward(&[(x.clone(), vec![upstream])])?.iter().copied().collect();
            let floor = 1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for _ in 0..10 {
                let i = rng.random_range(0..grad.len());
                let mut f = |d: f64| -> Result<f64> {
                    let mut p = policy.clone();
                    *p.params.iter_mut().nth(i).expect("index in range") += d;
                    Ok(upstream * p.forward(&x)?[0])
                };
                match richardson(&mut f, 1e-3)? {
                    Some(fd) => errs.push(rel(grad[i], fd, floor)),
                    None => rejected += 1,
                }
            }
        }
    }
    Ok(vec![check("policy", "backward_vs_fd", &errs, rejected, 1e-6, 60)])
}

fn filtered_state(spec: &OcpSpec, rng: &mut ChaCha8Rng, settings: &SqpSettings) -> Result<(DVector<f64>, mpcil_core::ocp::OcpSolution)> {
    Ok(sample_initial_state(rng, 0.3, spec, settings, 1e-6, 10_000)?)
}

fn qloss_checks(spec: &OcpSpec, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SqpSettings::tight();
    let (mut exact, mut exact_rej) = (Vec::new(), 0);
    let (mut gn, mut gn_rej) = (Vec::new(), 0);
    for _ in 0..10 {
        let (x, expert) = filtered_state(spec, &mut rng, &settings)?;
        let template = GnQTemplate::from_trajectory(spec, x.as_slice(), expert.traj.clone())?;
        for _ in 0..2 {
            let u = rng.random_range(-24.0..24.0);
            let e = q_exact(spec, x.as_slice(), &[u], Some(&expert), &settings)?;
            let mut fq = |d: f64| -> Result<f64> {
                let q = q_exact(spec, x.as_slice(), &[u + d], Some(&expert), &settings)?;
                if !q.converged {
                    return Err(Error::Failed("unconverged solve".into()));
                }
                Ok(q.value)
            };
            match (e.converged, richardson(&mut fq, 1e-4)) {
                (true, Ok(Some(fd))) => exact.push(rel(e.grad_u[0], fd, 1e-3)),
                _ => exact_rej += 1,
            }
            let a = q_gn(&template, &[u], &settings.qp)?;
            let mut fa = |d: f64| -> Result<f64> { Ok(q_gn(&template, &[u + d], &settings.qp)?.value) };
            match richardson(&mut fa, 1e-4)? {
                Some(fd) => gn.push(rel(a.grad_u[0], fd, 1e-3)),
                None => gn_rej += 1,
            }
        }
    }
    Ok(vec![
        check("qloss", "exact_multiplier_vs_fd", &exact, exact_rej, 1e-4, 16),
        check("qloss", "gn_multiplier_vs_fd", &gn, gn_rej, 1e-4, 16),
    ])
}

fn imitation_checks(spec: &OcpSpec, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = TrainConfig {
        q_exact: SqpSettings::tight(),
        q_gn: SqpSettings::tight().qp,
        ..TrainConfig::default()
    };
    let policy = MlpPolicy::init(&[4, 16, 1], &[-25.0], &[25.0], &mut rng)?;
    let (x0, sol) = filtered_state(spec, &mut rng, &config.expert)?;
    let data = dagger_rollout(spec, &policy, x0.as_slice(), Some(&sol), 4, 0.5, &mut rng, &config.expert, 0)?;
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let templates = data
        .samples
        .iter()
        .map(|s| GnQTemplate::from_trajectory(spec, s.x.as_slice(), s.zeta.clone()))
        .collect::<mpcil_core::Result<Vec<_>>>()?;
    let trefs: Vec<Option<&GnQTemplate>> = templates.iter().map(Some).collect();
    let mut out = Vec::new();
    for (loss, name) in [(LossKind::L2, "l2_vs_fd"), (LossKind::QExact, "q_vs_fd"), (LossKind::QGn, "qgn_vs_fd")] {
        let (_, grad, _) = batch_gradient(loss, spec, &policy, &samples, &trefs, &config)?;
        let grad: Vec<f64> = grad.iter().copied().collect();
        let floor = 1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let (mut errs, mut rejected) = (Vec::new(), 0);
        for _ in 0..10 {
            let i = rng.random_range(0..grad.len());
            let mut f = |d: f64| -> Result<f64> {
                let mut p = policy.clone();
                *p.params.iter_mut().nth(i).expect("index in range") += d;
                Ok(batch_gradient(loss, spec, &p, &samples, &trefs, &config)?.0)
            };
            match richardson(&mut f, 1e-4)? {
                Some(fd) => errs.push(rel(grad[i], fd, floor)),
                None => rejected += 1,
            }
        }
        out.push(check("imitation", name, &errs, rejected, 1e-3, 7));
    }
    Ok(out)
}

fn cartpole(dt: f64, substeps: usize) -> Result<DiscreteDynamics> {
    Ok(DiscreteDynamics::new(Arc::new(CartPole::new(CartPoleParams::default())?), dt, substeps)?)
}

fn numerics_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Empirical order from the error at dt and dt/2 against a fine reference.
    let x = [0.3, -0.2, 0.6, 0.4];
    let u = [3.0];
    let reference = cartpole(0.2, 4096)?.step(&x, &u)?;
    let err = |n: usize| -> Result<f64> {
        let y = cartpole(0.2, n)?.step(&x, &u)?;
        Ok(y.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };
    let order = (err(4)? / err(8)?).log2();
    out.push(Check {
        suite: "numerics",
        name: "rk4_order_min",
        checked: 1,
        rejected: 0,
        worst: order,
        tol: 3.8,
        passed: order >= 3.8,
    });

    let dynamics = cartpole(0.05, 1)?;
    let mut errs = Vec::new();
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = [rng.random_range(-25.0..25.0)];
        let lin = dynamics.linearize(&x, &u)?;
        let h = 1e-6;
        for j in 0..5 {
            let shifted = |d: f64| -> Result<Vec<f64>> {
                let (mut xp, mut up) = (x.clone(), u.to_vec());
                if j < 4 {
                    xp[j] += d;
                } else {
                    up[0] += d;
                }
                Ok(dynamics.step(&xp, &up)?)
            };
            let (p, m) = (shifted(h)?, shifted(-h)?);
            for i in 0..4 {
                let fd = (p[i] - m[i]) / (2.0 * h);
                let an = if j < 4 { lin.a[(i, j)] } else { lin.b[(i, 0)] };
                errs.push((an - fd).abs());
            }
        }
    }
    out.push(check("numerics", "jacobian_vs_fd_abs", &errs, 0, 1e-5, 400));

    let lin = dynamics.linearize(&[0.0; 4], &[0.0])?;
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.25, 0.025, 0.25, 0.025]));
    let r = DMatrix::from_element(1, 1, 0.0025);
    let p = solve_dare(&lin.a, &lin.b, &s, &r, 1e-12, 100_000)?;
    out.push(check("numerics", "dare_residual_abs", &[dare_residual(&lin.a, &lin.b, &s, &r, &p)], 0, 1e-8, 1));
    let one = DMatrix::from_element(1, 1, 1.0);
    let golden = solve_dare(&one, &one, &one, &one, 1e-14, 10_000)?[(0, 0)];
    out.push(check("numerics", "dare_golden_ratio_abs", &[(golden - (1.0 + 5f64.sqrt()) / 2.0).abs()], 0, 1e-9, 1));

    let mut kkt = Vec::new();
    for _ in 0..50 {
        let qp = random_qp(&mut rng);
        let sol = solve_qp(&qp, &QpSettings { tol: 1e-10, ..Default::default() }, None)?;
        kkt.push(kkt_residuals(&qp, &sol).max());
    }
    out.push(check("numerics", "qp_kkt_abs", &kkt, 0, 1e-8, 50));
    Ok(out)
}

/// Strictly convex QP with a known feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> DenseQp {
    let n = rng.random_range(3..=12);
    let p = rng.random_range(0..n / 2 + 1);
    let m = rng.random_range(1..=2 * n);
    let mut rand_mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let l = rand_mat(n, n);
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let g = rand_mat(n, 1).column(0).into_owned() * 3.0;
    let a = rand_mat(p, n);
    let c = rand_mat(m, n);
    let x0 = rand_mat(n, 1).column(0).into_owned();
    let margin = rand_mat(m, 1).column(0).map(|v: f64| v.abs());
    let b = &a * &x0;
    let d = &c * &x0 + margin;
    DenseQp::new(h, g).with_eq(a, b).with_in(c, d)
}
