//! Imitation losses, DAgger data collection and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::ocp::{shift_solution, sqp_solve, OcpSolution, OcpSpec, PrimalTrajectory, SqpSettings, SqpStatus};
use crate::policy::{AdamState, MlpPolicy, Params};
use crate::qloss::{q_exact, q_gn, GnQTemplate};
use crate::qp::QpSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    /// `(π(x) − π*(x))²`
    L2,
    /// Exact Q-loss.
    QExact,
    /// Gauss-Newton Q-loss.
    QGn,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::L2, LossKind::QExact, LossKind::QGn];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::QExact => "q",
            LossKind::QGn => "qgn",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "q" | "q_exact" => Ok(LossKind::QExact),
            "qgn" | "q_gn" => Ok(LossKind::QGn),
            other => Err(Error::Config(format!("unknown loss '{other}' (expected l2, q or qgn)"))),
        }
    }
}

/// One labeled state. Only states and controls of the expert trajectory are
/// kept; slacks are rebuilt from the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub u_star: DVector<f64>,
    pub objective: f64,
    pub zeta: PrimalTrajectory,
    /// Update index at which the sample was collected.
    pub step: usize,
}

impl Sample {
    /// Builds a sample from raw trajectory data, reconstructing the slacks.
    pub fn new(
        spec: &OcpSpec,
        x: DVector<f64>,
        u_star: DVector<f64>,
        objective: f64,
        xs: Vec<DVector<f64>>,
        us: Vec<DVector<f64>>,
        step: usize,
    ) -> Result<Self> {
        let n = spec.horizon;
        if x.len() != spec.nx() || u_star.len() != spec.nu() || xs.len() != n + 1 || us.len() != n {
            return Err(Error::Dimension("sample does not match the problem dimensions".into()));
        }
        if xs.iter().any(|v| v.len() != spec.nx()) || us.iter().any(|v| v.len() != spec.nu()) {
            return Err(Error::Dimension("sample trajectory entries have wrong sizes".into()));
        }
        let mut slacks = Vec::with_capacity(n + 1);
        for k in 0..n {
            let w: Vec<f64> = xs[k].iter().chain(us[k].iter()).copied().collect();
            slacks.push(spec.path_bounds.violation(&w));
        }
        slacks.push(spec.terminal_bounds.violation(xs[n].as_slice()));
        Ok(Self {
            x,
            u_star,
            objective,
            zeta: PrimalTrajectory { xs, us, slacks },
            step,
        })
    }

    pub fn from_solution(spec: &OcpSpec, x: &[f64], sol: &OcpSolution, step: usize) -> Result<Self> {
        Self::new(
            spec,
            DVector::from_column_slice(x),
            sol.u0().clone(),
            sol.objective,
            sol.traj.xs.clone(),
            sol.traj.us.clone(),
            step,
        )
    }

    /// Primal-only solution used to warm-start solves at this state.
    pub fn warm_start(&self, spec: &OcpSpec) -> OcpSolution {
        let n = spec.horizon;
        let zeros = |d: usize, count: usize| alloc::vec![DVector::zeros(d); count];
        let mut mu_path = zeros(3 * spec.path_bounds.num_slacks(), n);
        mu_path.push(DVector::zeros(3 * spec.terminal_bounds.num_slacks()));
        OcpSolution {
            traj: self.zeta.clone(),
            lambda_x0: DVector::zeros(spec.nx()),
            lambda_pin: None,
            lambda_dyn: zeros(spec.nx(), n),
            mu_path,
            objective: self.objective,
            kkt_inf: f64::NAN,
            sqp_iters: 0,
            status: SqpStatus::Optimal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub updates: usize,
    pub collect_every: usize,
    pub rollout_len: usize,
    pub batch_size: usize,
    /// Initial states are drawn from `[−α·x̄, α·x̄]`.
    pub alpha: f64,
    pub lr: f64,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    /// Expert solves during collection and for the initial-state filter.
    pub expert: SqpSettings,
    /// Pinned solves of the exact Q-loss.
    pub q_exact: SqpSettings,
    /// QP solves of the Gauss-Newton Q-loss.
    pub q_gn: QpSettings,
    /// Largest slack an accepted initial state may need.
    pub max_slack: f64,
    pub max_draws: usize,
    /// Exact Q evaluations that end above this KKT residual are skipped.
    pub q_accept_kkt: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L2,
            updates: 2000,
            collect_every: 20,
            rollout_len: 50,
            batch_size: 32,
            alpha: 0.3,
            lr: 1e-3,
            depth: 2,
            width: 128,
            seed: 0,
            expert: SqpSettings::default(),
            q_exact: SqpSettings::default(),
            q_gn: QpSettings {
                tol: 1e-9,
                ..QpSettings::default()
            },
            max_slack: 1e-6,
            max_draws: 10_000,
            q_accept_kkt: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.updates == 0 || self.collect_every == 0 || self.rollout_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("updates, collect_every, rollout_len and batch_size must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.depth == 0 || self.width == 0 {
            return Err(Error::Config("lr, depth and width must be positive".into()));
        }
        if self.max_draws == 0 {
            return Err(Error::Config("max_draws must be positive".into()));
        }
        Ok(())
    }

    /// `[n_x, width × depth, n_u]`
    pub fn widths(&self, spec: &OcpSpec) -> Vec<usize> {
        let mut w = alloc::vec![spec.nx()];
        w.extend(core::iter::repeat_n(self.width, self.depth));
        w.push(spec.nu());
        w
    }
}

/// Upper state bound `x̄` of the path constraints.
fn state_bound(spec: &OcpSpec) -> Result<Vec<f64>> {
    let ub = spec.path_bounds.ub();
    let lb = spec.path_bounds.lb();
    (0..spec.nx())
        .map(|i| {
            let b = ub[i].min(-lb[i]);
            if b.is_finite() && b > 0.0 {
                Ok(b)
            } else {
                Err(Error::Config(format!("state component {i} needs a finite symmetric bound to sample from")))
            }
        })
        .collect()
}

/// Draws `x ~ U(−α·x̄, α·x̄)` until the expert solution at `x` needs no slack.
/// Returns the state and its expert solution.
pub fn sample_initial_state<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: f64,
    spec: &OcpSpec,
    settings: &SqpSettings,
    max_slack: f64,
    max_draws: usize,
) -> Result<(DVector<f64>, OcpSolution)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let bound = state_bound(spec)?;
    for _ in 0..max_draws {
        let x: Vec<f64> = bound.iter().map(|b| rng.random_range(-alpha * b..=alpha * b)).collect();
        match sqp_solve(spec, &x, None, settings) {
            Ok(sol) if sol.status == SqpStatus::Optimal && sol.traj.max_slack() <= max_slack => {
                return Ok((DVector::from_vec(x), sol));
            }
            Ok(_) => {}
            Err(e) => log::debug!("initial state rejected: {e}"),
        }
    }
    Err(Error::SamplingFailure { draws: max_draws, alpha })
}

/// `β = 1 − index/total`
pub fn mixture_beta(index: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1.0 - index as f64 / total as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutData {
    pub samples: Vec<Sample>,
    /// Controls actually applied, one per sample.
    pub applied: Vec<DVector<f64>>,
    /// Whether each applied control came from the expert.
    pub from_expert: Vec<bool>,
    /// Set when a solve failed and the rollout stopped early.
    pub failure: Option<Error>,
}

/// DAgger rollout: label every visited state with the expert, apply the
/// expert control with probability `β` and the policy control otherwise.
#[allow(clippy::too_many_arguments)]
pub fn dagger_rollout<R: Rng + ?Sized>(
    spec: &OcpSpec,
    policy: &MlpPolicy,
    x0: &[f64],
    first: Option<&OcpSolution>,
    steps: usize,
    beta: f64,
    rng: &mut R,
    settings: &SqpSettings,
    step_index: usize,
) -> Result<RolloutData> {
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut out = RolloutData {
        samples: Vec::with_capacity(steps),
        applied: Vec::with_capacity(steps),
        from_expert: Vec::with_capacity(steps),
        failure: None,
    };
    let mut x = DVector::from_column_slice(x0);
    let mut previous: Option<OcpSolution> = None;
    for k in 0..steps {
        let solved = match (k, first) {
            (0, Some(sol)) => Ok(sol.clone()),
            _ => {
                let warm = previous.as_ref().map(|p| shift_solution(spec, p));
                sqp_solve(spec, x.as_slice(), warm.as_ref(), settings)
            }
        };
        let sol = match solved {
            Ok(s) => s,
            Err(e) => {
                log::warn!("dagger rollout stopped at step {k}: {e}");
                out.failure = Some(e);
                break;
            }
        };
        out.samples.push(Sample::from_solution(spec, x.as_slice(), &sol, step_index)?);
        let expert = rng.random::<f64>() < beta;
        let u = if expert { sol.u0().clone() } else { policy.forward(x.as_slice())? };
        let next = spec.dynamics.step(x.as_slice(), u.as_slice())?;
        out.applied.push(u);
        out.from_expert.push(expert);
        previous = Some(sol);
        if !all_finite(&next) {
            out.failure = Some(Error::SolverFailure(format!("rollout state diverged at step {k}")));
            break;
        }
        x = DVector::from_vec(next);
    }
    Ok(out)
}

/// Loss value and `∂ℓ/∂u` for one sample. `template` is required for the
/// Gauss-Newton loss.
pub fn loss_and_upstream(
    kind: LossKind,
    spec: &OcpSpec,
    sample: &Sample,
    template: Option<&GnQTemplate>,
    u: &[f64],
    config: &TrainConfig,
) -> Result<(f64, DVector<f64>)> {
    if u.len() != sample.u_star.len() {
        return Err(Error::Dimension(format!("loss: control has {} entries, expected {}", u.len(), sample.u_star.len())));
    }
    match kind {
        LossKind::L2 => {
            let d = DVector::from_column_slice(u) - &sample.u_star;
            Ok((d.norm_squared(), d * 2.0))
        }
        LossKind::QExact => {
            let warm = sample.warm_start(spec);
            let q = q_exact(spec, sample.x.as_slice(), u, Some(&warm), &config.q_exact)?;
            let kkt = match &q.solution {
                crate::qloss::QSolution::Exact(s) => s.kkt_inf,
                _ => 0.0,
            };
            if !q.converged && !(kkt <= config.q_accept_kkt) {
                return Err(Error::SolverFailure(format!("exact Q did not converge (kkt {kkt:e})")));
            }
            Ok((q.value, q.grad_u))
        }
        LossKind::QGn => {
            let t = template.ok_or_else(|| Error::Config("Gauss-Newton loss needs a template".into()))?;
            let q = q_gn(t, u, &config.q_gn)?;
            Ok((q.value, q.grad_u))
        }
    }
}

/// Mean loss over the samples whose evaluation succeeded, its weight gradient
/// and the number of skipped samples.
pub fn batch_gradient(
    kind: LossKind,
    spec: &OcpSpec,
    policy: &MlpPolicy,
    samples: &[&Sample],
    templates: &[Option<&GnQTemplate>],
    config: &TrainConfig,
) -> Result<(f64, Params, usize)> {
    let mut pairs: Vec<(&[f64], DVector<f64>)> = Vec::with_capacity(samples.len());
    let mut total = 0.0;
    let mut skipped = 0;
    for (i, s) in samples.iter().enumerate() {
        let u = policy.forward(s.x.as_slice())?;
        match loss_and_upstream(kind, spec, s, templates.get(i).copied().flatten(), u.as_slice(), config) {
            Ok((l, g)) => {
                total += l;
                pairs.push((s.x.as_slice(), g));
            }
            Err(e) => {
                log::warn!("loss evaluation skipped: {e}");
                skipped += 1;
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::SolverFailure("every loss evaluation in the batch failed".into()));
    }
    let grad = policy.backward(&pairs)?;
    Ok((total / pairs.len() as f64, grad, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// 1-based update count.
    pub update: usize,
    pub loss: f64,
    pub dataset_size: usize,
    pub beta: f64,
    pub skipped: usize,
}

/// Serializable snapshot of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub update: usize,
    pub policy: MlpPolicy,
    pub adam: AdamState,
    pub dataset: Vec<Sample>,
    pub log: Vec<LogEntry>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

/// Step-able DAgger trainer.
pub struct Trainer<'a> {
    spec: &'a OcpSpec,
    config: TrainConfig,
    policy: MlpPolicy,
    adam: AdamState,
    dataset: Vec<Sample>,
    templates: Vec<Option<GnQTemplate>>,
    rng: ChaCha8Rng,
    update: usize,
    log: Vec<LogEntry>,
}

impl<'a> Trainer<'a> {
    /// Initializes the policy from the seed and collects the first rollout
    /// with the expert in control.
    pub fn new(spec: &'a OcpSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (lb, ub) = control_bounds(spec)?;
        let policy = MlpPolicy::init(&config.widths(spec), &lb, &ub, &mut rng)?;
        let adam = AdamState::new(&policy, config.lr);
        let mut t = Self {
            spec,
            config,
            policy,
            adam,
            dataset: Vec::new(),
            templates: Vec::new(),
            rng,
            update: 0,
            log: Vec::new(),
        };
        t.collect(1.0)?;
        Ok(t)
    }

    pub fn resume(spec: &'a OcpSpec, config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.policy.widths() != config.widths(spec) {
            return Err(Error::Config("checkpoint policy does not match the configured architecture".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_stream(ckpt.rng_stream);
        rng.set_word_pos(ckpt.rng_word_pos);
        let mut t = Self {
            spec,
            config,
            policy: ckpt.policy,
            adam: ckpt.adam,
            dataset: Vec::new(),
            templates: Vec::new(),
            rng,
            update: ckpt.update,
            log: ckpt.log,
        };
        t.extend(ckpt.dataset)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            update: self.update,
            policy: self.policy.clone(),
            adam: self.adam.clone(),
            dataset: self.dataset.clone(),
            log: self.log.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    fn extend(&mut self, samples: Vec<Sample>) -> Result<()> {
        for s in samples {
            let t = match self.config.loss {
                LossKind::QGn => Some(GnQTemplate::from_trajectory(self.spec, s.x.as_slice(), s.zeta.clone())?),
                _ => None,
            };
            self.templates.push(t);
            self.dataset.push(s);
        }
        Ok(())
    }

    fn collect(&mut self, beta: f64) -> Result<()> {
        let (x0, sol) = sample_initial_state(
            &mut self.rng,
            self.config.alpha,
            self.spec,
            &self.config.expert,
            self.config.max_slack,
            self.config.max_draws,
        )?;
        let data = dagger_rollout(
            self.spec,
            &self.policy,
            x0.as_slice(),
            Some(&sol),
            self.config.rollout_len,
            beta,
            &mut self.rng,
            &self.config.expert,
            self.update,
        )?;
        if let Some(e) = &data.failure {
            log::warn!("collection at update {} kept {} samples after: {e}", self.update, data.samples.len());
        }
        self.extend(data.samples)
    }

    /// One minibatch update, followed by a collection when it is due.
    pub fn step(&mut self) -> Result<LogEntry> {
        if self.finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let n = self.dataset.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.dataset[i]).collect();
        let templates: Vec<Option<&GnQTemplate>> = idx.iter().map(|&i| self.templates[i].as_ref()).collect();
        let (loss, grad, skipped) = batch_gradient(self.config.loss, self.spec, &self.policy, &samples, &templates, &self.config)?;
        self.adam.update(&mut self.policy, &grad)?;
        self.update += 1;
        let beta = mixture_beta(self.update, self.config.updates);
        if self.update.is_multiple_of(self.config.collect_every) {
            self.collect(beta)?;
        }
        let entry = LogEntry {
            update: self.update,
            loss,
            dataset_size: self.dataset.len(),
            beta,
            skipped,
        };
        log::debug!("update {}: loss {loss:e}, dataset {}, beta {beta}", self.update, self.dataset.len());
        self.log.push(entry);
        Ok(entry)
    }

    pub fn finished(&self) -> bool {
        self.update >= self.config.updates
    }

    pub fn update_count(&self) -> usize {
        self.update
    }

    pub fn policy(&self) -> &MlpPolicy {
        &self.policy
    }

    pub fn dataset(&self) -> &[Sample] {
        &self.dataset
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (MlpPolicy, Vec<LogEntry>, Vec<Sample>) {
        (self.policy, self.log, self.dataset)
    }
}

/// Runs the full schedule.
pub fn train(spec: &OcpSpec, config: TrainConfig) -> Result<(MlpPolicy, Vec<LogEntry>)> {
    let mut t = Trainer::new(spec, config)?;
    while !t.finished() {
        t.step()?;
    }
    let (p, log, _) = t.into_parts();
    Ok((p, log))
}

/// Control box of the path constraints.
pub fn control_bounds(spec: &OcpSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let nx = spec.nx();
    let lb: Vec<f64> = spec.path_bounds.lb().iter().skip(nx).copied().collect();
    let ub: Vec<f64> = spec.path_bounds.ub().iter().skip(nx).copied().collect();
    if lb.len() != spec.nu() || !all_finite(&lb) || !all_finite(&ub) {
        return Err(Error::Config("the policy needs finite control bounds".into()));
    }
    Ok((lb, ub))
}

/// Human-readable one-line summary of a configuration.
pub fn describe(config: &TrainConfig) -> String {
    format!(
        "loss={} depth={} width={} lr={:e} seed={} updates={}",
        config.loss, config.depth, config.width, config.lr, config.seed, config.updates
    )
}
