//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mpcil_core::eval::{test_states, MetricsReport};
use mpcil_core::imitation::{control_bounds, LossKind};
use mpcil_core::ocp::sqp_solve;
use mpcil_core::policy::MlpPolicy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, EXPERT_LABEL};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{self, Suite};
use crate::io;
use crate::run::{find_runs, run_training};

#[derive(Debug, Parser)]
#[command(name = "mpcil", version, about = "Imitation learning of MPC policies with Q-function losses")]
pub struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    L2,
    Q,
    Qgn,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::L2 => LossKind::L2,
            LossArg::Q => LossKind::QExact,
            LossArg::Qgn => LossKind::QGn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModuleArg {
    All,
    Policy,
    Qloss,
    Imitation,
    Numerics,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy with DAgger.
    Train {
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate every trained run below a directory.
    Eval {
        #[arg(long)]
        policies: PathBuf,
        #[arg(long)]
        alpha: f64,
        /// Defaults to the quantile paired with ALPHA in the config.
        #[arg(long)]
        quantile: Option<f64>,
        #[arg(long)]
        states: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Leave out the expert row.
        #[arg(long)]
        skip_expert: bool,
        /// Per-step CSV of every rollout.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Grid search over depth, width and learning rate.
    Gridsearch {
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient and numerics self-checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Gradient computation speed per loss.
    BenchGrad {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the expert problem at one state.
    ExpertSolve {
        /// Comma-separated state "p,v,theta,omega".
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Exact and Gauss-Newton Q over a range of first controls.
    Sweep {
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        #[arg(long, default_value_t = -25.0, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, default_value_t = 25.0, allow_hyphen_values = true)]
        to: f64,
        #[arg(long, default_value_t = 41)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn parse_state(text: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Input(format!("bad state component '{s}'"))))
        .collect::<Result<_>>()?;
    if v.len() != 4 {
        return Err(Error::Input(format!("state needs 4 components, got {}", v.len())));
    }
    Ok(v)
}

/// Rounds away solver noise below 1e-9 for display.
fn tidy(v: f64) -> f64 {
    let r = (v * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn print_reports(reports: &[MetricsReport]) {
    println!("{:<8} {:>5} {:>5} {:>20} {:>20}", "loss", "alpha", "q", "avg cost", "violation ratio");
    for r in reports {
        let viol = if r.label == EXPERT_LABEL {
            "-".to_string()
        } else {
            format!("{:.3} ± {:.3}", r.violation_ratio.mean, r.violation_ratio.std)
        };
        println!(
            "{:<8} {:>5} {:>5} {:>20} {:>20}",
            r.label,
            r.alpha,
            r.quantile,
            format!("{:.3} ± {:.3}", r.avg_cost.mean, r.avg_cost.std),
            viol
        );
    }
}

fn aggregate_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("metrics".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_aggregate.csv"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            loss,
            config,
            seed,
            out,
            resume,
        } => {
            let config = load_config(config.as_deref())?;
            let spec = config.spec()?;
            let train = config.train_config_for(loss.into(), seed)?;
            log::info!("{}", mpcil_core::imitation::describe(&train));
            run_training(&spec, &config, train, &out, resume, &mut |e| {
                if e.update % 100 == 0 {
                    log::info!("update {}: loss {:.4e}, dataset {}, beta {:.3}", e.update, e.loss, e.dataset_size, e.beta);
                }
            })?;
            println!("weights={}", out.join("weights.txt").display());
        }
        Command::Eval {
            policies,
            alpha,
            quantile,
            states,
            out,
            config,
            skip_expert,
            dump,
        } => {
            let config = load_config(config.as_deref())?;
            let spec = config.spec()?;
            let q = quantile
                .or_else(|| config.eval.quantile_for(alpha))
                .ok_or_else(|| Error::Config(format!("no quantile configured for alpha {alpha}; pass --quantile")))?;
            let runs = find_runs(&policies)?;
            if runs.is_empty() {
                return Err(Error::Config(format!("no trained runs found in {}", policies.display())));
            }
            let expert = config.solver.expert.to_core();
            let xs = test_states(&spec, alpha, states, config.eval.seed, &expert)?;
            let mut reports = Vec::new();
            let mut dumped = Vec::new();
            for loss in LossKind::ALL {
                let group: Vec<_> = runs.iter().filter(|r| r.config.loss().ok() == Some(loss)).collect();
                if group.is_empty() {
                    continue;
                }
                let pols: Vec<(u64, MlpPolicy)> = group.iter().map(|r| (r.config.train.seed, r.policy.clone())).collect();
                reports.push(bench::evaluate_policies(&spec, loss.name(), alpha, q, &pols, &xs, config.eval.steps)?);
                if dump.is_some() {
                    for (seed, p) in &pols {
                        for (i, rec) in bench::rollout_policy(&spec, p, &xs, config.eval.steps)?.into_iter().enumerate() {
                            dumped.push((format!("{}-{seed}", loss.name()), i, rec));
                        }
                    }
                }
            }
            if !skip_expert {
                reports.push(bench::evaluate_expert(&spec, &expert, alpha, q, &xs, config.eval.steps)?);
            }
            io::write_metrics(&reports, &out)?;
            io::write_aggregate(&reports, &aggregate_path(&out))?;
            if let Some(path) = dump {
                let refs: Vec<_> = dumped.iter().map(|(l, i, r)| (l.clone(), *i, r)).collect();
                io::write_rollouts(&refs, &path)?;
            }
            print_reports(&reports);
        }
        Command::Gridsearch { loss, config, out } => {
            let mut config = load_config(config.as_deref())?;
            let spec = config.spec()?;
            let loss: LossKind = loss.into();
            let mut rows = Vec::new();
            let outcome = bench::grid_search(&spec, &config, loss, &mut |row| {
                eprintln!("cell depth={} width={} lr={:e}: {:?}", row.cell.depth, row.cell.width, row.cell.lr, row.objective);
                rows.push(row.clone());
            })?;
            let header = ["depth", "width", "lr", "objective", "per_seed", "error"].map(String::from);
            let table: Vec<Vec<String>> = outcome
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.cell.depth.to_string(),
                        r.cell.width.to_string(),
                        io::fmt(r.cell.lr),
                        r.objective.map(io::fmt).unwrap_or_default(),
                        r.per_seed.iter().map(|v| io::fmt(*v)).collect::<Vec<_>>().join(";"),
                        r.error.clone().unwrap_or_default(),
                    ]
                })
                .collect();
            io::write_text(&out.join(format!("grid_{}.csv", loss.name())), &io::csv_text(None, &header, &table)?)?;
            let (cell, obj) = outcome
                .best
                .ok_or_else(|| Error::Failed("every grid cell failed".into()))?;
            config.best.set(loss, cell);
            if loss == LossKind::QGn {
                // The exact Q-loss reuses the Gauss-Newton hyperparameters.
                config.best.set(LossKind::QExact, cell);
            }
            io::write_text(&out.join("best.toml"), &config.to_toml())?;
            println!("best depth={} width={} lr={:e} objective={obj}", cell.depth, cell.width, cell.lr);
        }
        Command::Gradcheck { module, seed } => {
            let spec = RunConfig::default().spec()?;
            let suites: Vec<Suite> = match module {
                ModuleArg::All => Suite::ALL.to_vec(),
                ModuleArg::Policy => vec![Suite::Policy],
                ModuleArg::Qloss => vec![Suite::Qloss],
                ModuleArg::Imitation => vec![Suite::Imitation],
                ModuleArg::Numerics => vec![Suite::Numerics],
            };
            let mut ok = true;
            for s in suites {
                for c in gradcheck::run(s, &spec, seed)? {
                    println!("{c}");
                    ok &= c.passed;
                }
            }
            if !ok {
                return Err(Error::Failed("gradient checks failed".into()));
            }
        }
        Command::BenchGrad { config, out } => {
            let config = load_config(config.as_deref())?;
            let spec = config.spec()?;
            let train = config.train_config()?;
            let b = &config.bench;
            let (samples, templates) = bench::bench_dataset(&spec, &train, b.rollouts, b.seed)?;
            let (lb, ub) = control_bounds(&spec)?;
            let policy = MlpPolicy::init(&train.widths(&spec), &lb, &ub, &mut ChaCha8Rng::seed_from_u64(b.seed))?;
            let table = bench::bench_gradients(&spec, &policy, &samples, &templates, &train, b.batch_size, b.iterations, b.seed)?;
            for e in &table {
                println!("{:<4} {:>12.3} batches/s ({:.2} s, {} skipped)", e.loss.name(), e.batches_per_second, e.seconds, e.skipped);
            }
            if let Some(path) = out {
                let header = ["loss", "batches_per_second", "seconds", "skipped"].map(String::from);
                let rows: Vec<Vec<String>> = table
                    .iter()
                    .map(|e| vec![e.loss.name().into(), io::fmt(e.batches_per_second), io::fmt(e.seconds), e.skipped.to_string()])
                    .collect();
                io::write_text(&path, &io::csv_text(None, &header, &rows)?)?;
            }
        }
        Command::ExpertSolve { state, config } => {
            let config = load_config(config.as_deref())?;
            let spec = config.spec()?;
            let x = parse_state(&state)?;
            let sol = sqp_solve(&spec, &x, None, &config.solver.expert.to_core())?;
            println!("u0*={}", tidy(sol.u0()[0]));
            println!("objective={:e}", sol.objective);
            let lam: Vec<String> = sol.lambda_x0.iter().map(|v| format!("{:e}", v)).collect();
            println!("lambda_x0=[{}]", lam.join(","));
            println!("max_slack={:e}", sol.traj.max_slack());
            println!("status={:?} iterations={} kkt={:e}", sol.status, sol.sqp_iters, sol.kkt_inf);
        }
        Command::Sweep {
            state,
            from,
            to,
            points,
            out,
            config,
        } => {
            let config = load_config(config.as_deref())?;
            let spec = config.spec()?;
            let x = parse_state(&state)?;
            let sqp = mpcil_core::ocp::SqpSettings::tight();
            let pts = bench::sweep_q(&spec, &x, &bench::linspace(from, to, points), &sqp, &sqp.qp)?;
            io::write_sweep(&pts, &out)?;
            println!("points={} out={}", pts.len(), out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn states_parse_with_spaces_and_signs() {
        assert_eq!(parse_state(" 0.8, -0, 0.785 ,1e-3").unwrap(), vec![0.8, 0.0, 0.785, 1e-3]);
        assert!(matches!(parse_state("1,2,3"), Err(Error::Input(_))));
        assert!(matches!(parse_state("1,2,x,4"), Err(Error::Input(_))));
    }

    #[test]
    fn display_rounding_drops_solver_noise() {
        assert_eq!(tidy(-3e-12).to_string(), "0");
        assert_eq!(tidy(-24.9999999999).to_string(), "-25");
        assert_eq!(tidy(1.5).to_string(), "1.5");
    }

    #[test]
    fn aggregate_sits_next_to_the_metrics_file() {
        assert_eq!(aggregate_path(Path::new("out/m.csv")), PathBuf::from("out/m_aggregate.csv"));
    }

    #[test]
    fn loss_flags_map_to_kinds() {
        assert_eq!(LossKind::from(LossArg::Q), LossKind::QExact);
        assert_eq!(LossKind::from(LossArg::Qgn), LossKind::QGn);
        assert_eq!(LossKind::from(LossArg::L2), LossKind::L2);
    }
}
