use mpcil_core::eval::{closed_loop_rollout, compute_metrics, test_states, RolloutRecord};
use mpcil_core::imitation::{control_bounds, loss_and_upstream, LossKind, Sample, TrainConfig};
use mpcil_core::ocp::{build_cartpole_ocp, sqp_solve, CartPoleOcpConfig, MpcController, OcpSpec, SqpSettings};
use mpcil_core::policy::MlpPolicy;
use mpcil_core::qloss::{q_exact, q_gn, GnQTemplate};
use mpcil_core::qp::QpSettings;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec() -> OcpSpec {
    build_cartpole_ocp(&CartPoleOcpConfig::default()).unwrap()
}

#[test]
fn expert_never_violates_from_filtered_states() {
    let spec = spec();
    let settings = SqpSettings::default();
    let states = test_states(&spec, 0.3, 100, 5, &settings).unwrap();
    let records: Vec<RolloutRecord> = states
        .iter()
        .map(|x| closed_loop_rollout(&spec, &mut MpcController::new(&spec, settings), x.as_slice(), 50).unwrap())
        .collect();
    assert!(records.iter().all(|r| !r.failed));
    let report = compute_metrics("expert", 0.3, 1.0, &[(0, records.iter().map(RolloutRecord::outcome).collect())]).unwrap();
    assert_eq!(report.violation_ratio.mean, 0.0);
    assert_eq!(report.violation_ratio_all.mean, 0.0);
    // The expert drives every state towards the origin.
    for r in &records {
        assert!(r.states.last().unwrap().norm() < r.states[0].norm());
    }
}

#[test]
fn origin_is_a_fixed_point_of_the_closed_loop() {
    let spec = spec();
    let mut mpc = MpcController::new(&spec, SqpSettings::default());
    let r = closed_loop_rollout(&spec, &mut mpc, &[0.0; 4], 20).unwrap();
    assert!(r.total_cost.abs() < 1e-12);
    assert!(!r.violated);
}

#[test]
fn losses_agree_on_their_common_minimizer() {
    let spec = spec();
    let settings = SqpSettings::tight();
    let x = [0.3, -0.5, 0.2, 0.1];
    let sol = sqp_solve(&spec, &x, None, &settings).unwrap();
    let sample = Sample::from_solution(&spec, &x, &sol, 0).unwrap();
    let template = GnQTemplate::from_trajectory(&spec, &x, sample.zeta.clone()).unwrap();
    let config = TrainConfig {
        q_exact: settings,
        ..TrainConfig::default()
    };
    for loss in LossKind::ALL {
        let (value, upstream) = loss_and_upstream(loss, &spec, &sample, Some(&template), sol.u0().as_slice(), &config).unwrap();
        // Q-losses sit at the optimal value there; only their slope vanishes.
        let floor = if loss == LossKind::L2 { 0.0 } else { sol.objective };
        assert!((value - floor).abs() < 1e-8, "{loss:?}: {value}");
        assert!(upstream.iter().all(|g| g.abs() < 1e-6), "{loss:?}: {upstream:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // Both Q and Q_a are minimized at the expert control and coincide there.
    #[test]
    fn expert_control_minimizes_both_q_functions(
        p in -0.5f64..0.5, v in -1.0f64..1.0, th in -0.3f64..0.3, om in -0.5f64..0.5, u in -25.0f64..25.0,
    ) {
        let spec = spec();
        let settings = SqpSettings::tight();
        let x = [p, v, th, om];
        let sol = sqp_solve(&spec, &x, None, &settings).unwrap();
        let template = GnQTemplate::from_trajectory(&spec, &x, sol.traj.clone()).unwrap();
        let qp = QpSettings { tol: 1e-12, ..QpSettings::default() };
        let star = sol.u0().as_slice().to_vec();
        let qa_star = q_gn(&template, &star, &qp).unwrap().value;
        let q_star = q_exact(&spec, &x, &star, Some(&sol), &settings).unwrap().value;
        prop_assert!((qa_star - q_star).abs() <= 1e-6);
        prop_assert!(q_gn(&template, &[u], &qp).unwrap().value >= qa_star - 1e-8);
        let e = q_exact(&spec, &x, &[u], Some(&sol), &settings).unwrap();
        prop_assert!(!e.converged || e.value >= q_star - 1e-8);
    }

    #[test]
    fn policy_outputs_stay_inside_the_control_box(seed in any::<u64>(), x in prop::array::uniform4(-10.0f64..10.0)) {
        let spec = spec();
        let (lb, ub) = control_bounds(&spec).unwrap();
        let p = MlpPolicy::init(&[4, 32, 32, 1], &lb, &ub, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let u = p.forward(&x).unwrap()[0];
        prop_assert!((lb[0]..=ub[0]).contains(&u));
    }
}
