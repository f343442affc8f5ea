use std::fs;
use std::path::Path;

use mpcil::config::RunConfig;
use mpcil::io;
use mpcil::Error;
use mpcil_core::eval::{closed_loop_rollout, compute_metrics, RolloutOutcome};
use mpcil_core::imitation::{control_bounds, LossKind, Trainer};
use mpcil_core::ocp::OcpSpec;
use mpcil_core::policy::MlpPolicy;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.train.updates = 30;
    c.train.collect_every = 10;
    c.train.rollout_len = 6;
    c.train.width = 16;
    c.train.checkpoint_every = 10;
    c
}

fn trained<'a>(spec: &'a OcpSpec, c: &RunConfig, steps: usize) -> Trainer<'a> {
    let mut t = Trainer::new(spec, c.train_config().unwrap()).unwrap();
    for _ in 0..steps {
        t.step().unwrap();
    }
    t
}

fn random_policy(seed: u64, widths: &[usize]) -> MlpPolicy {
    MlpPolicy::init(widths, &[-25.0], &[25.0], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_round_trip_bit_exact(seed in any::<u64>(), depth in 1usize..4, width in 1usize..40) {
        let dir = tempfile::tempdir().unwrap();
        let mut widths = vec![4];
        widths.extend(std::iter::repeat_n(width, depth));
        widths.push(1);
        let p = random_policy(seed, &widths);
        let path = dir.path().join("w.txt");
        io::save_weights(&p, &path).unwrap();
        let back = io::load_weights(&path).unwrap();
        prop_assert_eq!(&back, &p);
        io::save_weights(&back, &dir.path().join("w2.txt")).unwrap();
        prop_assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("w2.txt")).unwrap());
    }

    #[test]
    fn metrics_round_trip(
        costs in prop::collection::vec(prop::collection::vec((0.0f64..1e3, any::<bool>()), 1..30), 1..4),
        q in 0.5f64..=1.0,
    ) {
        let groups: Vec<(u64, Vec<RolloutOutcome>)> = costs
            .iter()
            .enumerate()
            .map(|(s, g)| (s as u64, g.iter().map(|&(c, v)| RolloutOutcome { cost: c, raw_cost: 20.0 * c, violated: v }).collect()))
            .collect();
        let reports = vec![
            compute_metrics("l2", 0.3, q, &groups).unwrap(),
            compute_metrics("qgn", 0.3, q, &groups[..1]).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        io::write_metrics(&reports, &path).unwrap();
        prop_assert_eq!(io::read_metrics(&path).unwrap(), reports);
    }
}

#[test]
fn dataset_and_log_round_trip() {
    let c = small_config();
    let spec = c.spec().unwrap();
    let t = trained(&spec, &c, 25);
    assert!(t.dataset().len() > 10);
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("d.csv");
    io::write_dataset(&spec, t.dataset(), &ds).unwrap();
    assert_eq!(io::read_dataset(&spec, &ds).unwrap(), t.dataset());
    let log = dir.path().join("log.csv");
    io::write_log(t.log(), &log).unwrap();
    assert_eq!(io::read_log(&log).unwrap(), t.log());
}

#[test]
fn checkpoint_round_trips_and_resumes_exactly() {
    let c = small_config();
    let spec = c.spec().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let straight = trained(&spec, &c, 30);

    let half = trained(&spec, &c, 13);
    let ckpt = half.checkpoint();
    io::save_checkpoint(&spec, &ckpt, dir.path()).unwrap();
    let loaded = io::load_checkpoint(&spec, dir.path()).unwrap();
    assert_eq!(loaded, ckpt);

    let mut resumed = Trainer::resume(&spec, c.train_config().unwrap(), loaded).unwrap();
    while !resumed.finished() {
        resumed.step().unwrap();
    }
    assert_eq!(resumed.policy(), straight.policy());
    assert_eq!(resumed.log(), straight.log());
}

#[test]
fn checkpoint_overwrite_replaces_previous() {
    let c = small_config();
    let spec = c.spec().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trained(&spec, &c, 5);
    io::save_checkpoint(&spec, &t.checkpoint(), dir.path()).unwrap();
    for _ in 0..5 {
        t.step().unwrap();
    }
    io::save_checkpoint(&spec, &t.checkpoint(), dir.path()).unwrap();
    assert_eq!(io::load_checkpoint(&spec, dir.path()).unwrap().update, 10);
}

fn expect_format(err: Error, line: Option<usize>) {
    match err {
        Error::Format { line: l, .. } => {
            if let Some(want) = line {
                assert_eq!(l, want);
            }
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn malformed_files_are_rejected_with_locations() {
    let c = small_config();
    let spec = c.spec().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = trained(&spec, &c, 12);

    let ds = dir.path().join("d.csv");
    io::write_dataset(&spec, t.dataset(), &ds).unwrap();
    let text = fs::read_to_string(&ds).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = lines[3].replacen(',', ",nope,", 1);
    fs::write(&ds, lines.join("\n")).unwrap();
    expect_format(io::read_dataset(&spec, &ds).unwrap_err(), Some(4));

    fs::write(&ds, text.replace("v1", "v9")).unwrap();
    expect_format(io::read_dataset(&spec, &ds).unwrap_err(), Some(1));

    let w = dir.path().join("w.txt");
    io::save_weights(t.policy(), &w).unwrap();
    let wt = fs::read_to_string(&w).unwrap();
    fs::write(&w, &wt[..wt.len() / 2]).unwrap();
    expect_format(io::load_weights(&w).unwrap_err(), None);

    let m = dir.path().join("m.csv");
    fs::write(&m, "loss,alpha\nl2,0.3\n").unwrap();
    expect_format(io::read_metrics(&m).unwrap_err(), None);

    match io::load_weights(&dir.path().join("missing.txt")).unwrap_err() {
        Error::Io { .. } => {}
        other => panic!("expected an io error, got {other:?}"),
    }
    assert!(io::load_checkpoint(&spec, &dir.path().join("nothing")).is_err());
}

#[test]
fn sweep_and_rollout_dumps_are_plot_ready() {
    let c = RunConfig::default();
    let spec = c.spec().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (lb, ub) = control_bounds(&spec).unwrap();
    let p = MlpPolicy::init(&[4, 8, 1], &lb, &ub, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let rec = closed_loop_rollout(&spec, &mut &p, &[0.1, 0.0, 0.2, 0.0], 7).unwrap();
    let path = dir.path().join("r.csv");
    io::write_rollouts(&[("l2-0".into(), 0, &rec)], &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    // header plus one row per state
    assert_eq!(text.lines().count(), 1 + 8);

    let points = mpcil::bench::sweep_q(&spec, &[0.1, 0.0, 0.1, 0.0], &[-5.0, 0.0, 5.0], &Default::default(), &Default::default()).unwrap();
    let sweep = dir.path().join("s.csv");
    io::write_sweep(&points, &sweep).unwrap();
    assert_eq!(fs::read_to_string(&sweep).unwrap().lines().count(), 4);
}

#[test]
fn training_run_directory_and_resume() {
    let c = small_config();
    let spec = c.spec().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let train = c.train_config_for(LossKind::L2, 5).unwrap();
    let full = mpcil::run::run_training(&spec, &c, train.clone(), &dir.path().join("a"), false, &mut |_| {}).unwrap();
    // A leftover checkpoint from an interrupted run resumes to the same weights.
    let b = dir.path().join("b");
    let mut t = Trainer::new(&spec, train.clone()).unwrap();
    for _ in 0..17 {
        t.step().unwrap();
    }
    io::save_checkpoint(&spec, &t.checkpoint(), &b.join("checkpoint")).unwrap();
    let resumed = mpcil::run::run_training(&spec, &c, train, &b, true, &mut |_| {}).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(fs::read(dir.path().join("a/weights.txt")).unwrap(), fs::read(b.join("weights.txt")).unwrap());

    let runs = mpcil::run::find_runs(dir.path()).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].config.train.seed, 5);
    assert!(Path::new(&runs[0].dir).ends_with("a"));
}
