//! Experiment runner.
//!
//! Loads a flat TOML config describing one experiment (environment, learner,
//! step-size grid, seeds), runs every grid cell across independent RNG
//! streams in parallel, and emits one CSV per metric plus an aggregate CSV.
//! Outputs are byte-identical for identical (config, seed): cell streams are
//! keyed by index, results are merged in index order, and floats print in
//! shortest round-trip form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Deserialize;

use crate::analysis::{operator_norm, stepsize_gate, SampledModel};
use crate::envs::{
    self, make_baird, make_mountain_car, make_two_state, make_two_state_rewarded, McState,
    MountainCar, TabularDomain,
};
use crate::error::{Error, Result};
use crate::fa::{
    compute_model, tile_code_sa, tiles_to_vector, EligibilityTrace, FeatureMap, LinearModel,
    ModelOptions, TileCodingConfig,
};
use crate::learners::{
    ges_step, run_ges, sarsa_control_fa, tabular_escv_learn, GesRunConfig, LearnerKind,
    LearnerState, McControl, MetricContext, Schedule, StepSizes,
};
use crate::mdp::{Policy, StartState, TabularMdp};
use crate::rng;

/// One experiment, loaded from a flat key-value TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    /// two-state | two-state-rewarded | baird | windy-gridworld | mountain-car
    pub env: String,
    /// ges | naive | tabular-escv | tabular-es
    pub learner: String,
    pub lambda: f64,
    /// Discount override; each environment carries a default.
    pub gamma: Option<f64>,
    /// Single grid point.
    pub alpha: Option<f64>,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Explicit grid axes; both must be set together.
    pub alphas: Option<Vec<f64>>,
    pub ratios: Option<Vec<f64>>,
    /// Full 11x11 grid (alpha, beta/alpha) in {0.1 * 2^j, j = -10..0}^2.
    #[serde(default)]
    pub paper_grid: bool,
    /// constant | inv-sqrt | inv-t
    #[serde(default = "default_schedule")]
    pub schedule: String,
    /// Also run the inv-sqrt decay at the same base step sizes.
    #[serde(default)]
    pub compare_schedules: bool,
    pub n_runs: usize,
    pub n_episodes: usize,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    pub seed: u64,
    /// Subset of metrics to log; defaults per learner.
    #[serde(default)]
    pub metrics: Vec<String>,
    pub out_dir: Option<PathBuf>,
    /// Initial primal parameters (zeros when empty).
    #[serde(default)]
    pub theta0: Vec<f64>,
    /// Convergence level used by sweeps and the schedule comparison.
    pub target_mspbe: Option<f64>,
    /// Episodes for the Monte-Carlo value estimate behind the MSE metric.
    #[serde(default = "default_mse_episodes")]
    pub mse_episodes: usize,
    /// Mountain car: episodes of control training and of model sampling.
    #[serde(default = "default_mc_control_episodes")]
    pub mc_control_episodes: usize,
    #[serde(default = "default_mc_model_episodes")]
    pub mc_model_episodes: usize,
    #[serde(default = "default_mc_epsilon")]
    pub mc_epsilon: f64,
}

fn default_ratio() -> f64 {
    1.0
}
fn default_schedule() -> String {
    "constant".into()
}
fn default_episode_len() -> usize {
    100
}
fn default_mse_episodes() -> usize {
    5000
}
fn default_mc_control_episodes() -> usize {
    400
}
fn default_mc_model_episodes() -> usize {
    200
}
fn default_mc_epsilon() -> f64 {
    0.1
}

const ENVS: [&str; 5] = [
    "two-state",
    "two-state-rewarded",
    "baird",
    "windy-gridworld",
    "mountain-car",
];
const LEARNERS: [&str; 4] = ["ges", "naive", "tabular-escv", "tabular-es"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Validation error listing every offending field.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !ENVS.contains(&self.env.as_str()) {
            problems.push(format!("env: unknown environment '{}'", self.env));
        }
        if !LEARNERS.contains(&self.learner.as_str()) {
            problems.push(format!("learner: unknown learner '{}'", self.learner));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda: {} outside [0, 1]", self.lambda));
        }
        if let Some(gamma) = self.gamma {
            if !(gamma > 0.0 && gamma <= 1.0) {
                problems.push(format!("gamma: {gamma} outside (0, 1]"));
            }
        }
        if self.n_runs == 0 {
            problems.push("n_runs: must be at least 1".into());
        }
        if self.alphas.is_some() != self.ratios.is_some() {
            problems.push("alphas/ratios: must be provided together".into());
        }
        if !self.paper_grid && self.alpha.is_none() && self.alphas.is_none() {
            problems.push("alpha: no grid specified (alpha, alphas+ratios, or paper_grid)".into());
        }
        if let Some(alpha) = self.alpha {
            if alpha <= 0.0 {
                problems.push(format!("alpha: {alpha} must be positive"));
            }
        }
        if self.ratio <= 0.0 {
            problems.push(format!("ratio: {} must be positive", self.ratio));
        }
        if !["constant", "inv-sqrt", "inv-t"].contains(&self.schedule.as_str()) {
            problems.push(format!("schedule: unknown schedule '{}'", self.schedule));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The grid points this experiment covers.
    pub fn grid(&self) -> Vec<GridPoint> {
        if self.paper_grid {
            return paper_grid();
        }
        if let (Some(alphas), Some(ratios)) = (&self.alphas, &self.ratios) {
            let mut points = Vec::new();
            for &alpha in alphas {
                for &ratio in ratios {
                    points.push(GridPoint { alpha, ratio });
                }
            }
            return points;
        }
        vec![GridPoint {
            alpha: self.alpha.unwrap_or(0.05),
            ratio: self.ratio,
        }]
    }

    fn schedules(&self) -> Vec<String> {
        if self.compare_schedules {
            vec!["constant".into(), "inv-sqrt".into()]
        } else {
            vec![self.schedule.clone()]
        }
    }

    fn metric_names(&self) -> Vec<String> {
        if !self.metrics.is_empty() {
            return self.metrics.clone();
        }
        match self.learner.as_str() {
            "tabular-escv" | "tabular-es" => vec!["start_value".into()],
            _ => vec!["mspbe".into(), "mse".into(), "theta_norm".into()],
        }
    }
}

/// One (alpha, beta/alpha) cell of the step-size grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub ratio: f64,
}

impl GridPoint {
    pub fn beta(&self) -> f64 {
        self.alpha * self.ratio
    }
}

/// The printed step-size grid: both axes run over `0.1 * 2^j, j = -10..=0`.
pub fn paper_grid() -> Vec<GridPoint> {
    let axis: Vec<f64> = (-10..=0).map(|j| 0.1 * 2f64.powi(j)).collect();
    let mut points = Vec::with_capacity(axis.len() * axis.len());
    for &alpha in &axis {
        for &ratio in &axis {
            points.push(GridPoint { alpha, ratio });
        }
    }
    points
}

fn schedule_from(name: &str, base: f64) -> Schedule {
    match name {
        "inv-sqrt" => Schedule::InvSqrt(base),
        "inv-t" => Schedule::InvT(base),
        _ => Schedule::Constant(base),
    }
}

/// One raw data row of a metric CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub grid_alpha: f64,
    pub grid_ratio: f64,
    pub run: usize,
    pub episode: usize,
    pub value: f64,
}

/// One row of the aggregate CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub schedule: String,
    pub grid_alpha: f64,
    pub grid_ratio: f64,
    pub episode: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub diverged_runs: usize,
}

/// Per grid point summary.
#[derive(Debug, Clone)]
pub struct GridPointResult {
    pub schedule: String,
    pub point: GridPoint,
    /// None when no exact model is available for the gate.
    pub gate_passed: Option<bool>,
    pub diverged_runs: usize,
    /// Final-episode mean per metric (NaN when nothing was logged).
    pub final_means: BTreeMap<String, f64>,
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct AggregateResult {
    /// Raw rows per (metric, schedule).
    pub raw: BTreeMap<(String, String), Vec<RawRow>>,
    pub aggregate: Vec<AggregateRow>,
    pub points: Vec<GridPointResult>,
    pub files: Vec<PathBuf>,
}

impl AggregateResult {
    /// First episode at which the across-run mean of `metric` under
    /// `schedule` is at or below `level` (single-grid-point experiments).
    pub fn first_episode_reaching(
        &self,
        metric: &str,
        schedule: &str,
        level: f64,
    ) -> Option<usize> {
        self.aggregate
            .iter()
            .filter(|row| row.metric == metric && row.schedule == schedule)
            .find(|row| row.mean <= level)
            .map(|row| row.episode)
    }
}

enum EnvBundle {
    Tabular(Box<TabularContext>),
    MountainCar(Box<McContext>),
}

/// (phi, q_hat, xi) for the MSE metric.
type MseContext = (DMatrix<f64>, DVector<f64>, DVector<f64>);

struct TabularContext {
    domain: TabularDomain,
    model: Option<LinearModel>,
    mse: Option<MseContext>,
}

struct McContext {
    env: MountainCar,
    tiles: TileCodingConfig,
    control: McControl,
    epsilon: f64,
    sampled: SampledModel,
    mse: Option<MseContext>,
}

const POLICY_STREAM: u64 = u64::MAX - 1;
const VALUE_STREAM: u64 = u64::MAX - 2;
const MODEL_STREAM: u64 = u64::MAX - 3;

/// Windy-gridworld protocol constants: the target policy is the greedy
/// policy of a Q-learning run with the decaying exploration schedule; the
/// behavior policy is 0.2-greedy of the same table. The training episode
/// cap is part of the fixture: it keeps the manufactured target mildly
/// suboptimal (a path of about 20 steps rather than the optimal 15), which
/// is the value scale the evaluation experiment is calibrated to.
pub mod windy_protocol {
    pub const EPSILON0: f64 = 0.2;
    pub const DECAY: f64 = 0.95;
    pub const EPISODES: usize = 150;
    pub const ALPHA: f64 = 0.5;
    pub const BEHAVIOR_EPSILON: f64 = 0.2;
    pub const TRAIN_MAX_STEPS: usize = 60;
}

/// Build the windy-gridworld evaluation domain: MDP, Q-learning target,
/// epsilon-greedy behavior. Deterministic given the seed.
pub fn windy_evaluation_domain(gamma: f64, seed: u64) -> (TabularMdp, Policy, Policy, StartState) {
    use windy_protocol::*;
    let (mdp, start) = envs::make_windy_gridworld(gamma);
    let mut rng = rng::stream(seed, POLICY_STREAM);
    let (target, q) = crate::learners::q_learning_control(
        &mdp,
        EPSILON0,
        DECAY,
        EPISODES,
        ALPHA,
        &start,
        TRAIN_MAX_STEPS,
        &mut rng,
    );
    let behavior = Policy::epsilon_greedy(&q, BEHAVIOR_EPSILON);
    (mdp, target, behavior, start)
}

/// Undiscounted start value of a deterministic policy in a deterministic
/// MDP by a single rollout; `None` when the policy fails to reach a
/// terminal state within `cap` steps (its value is unbounded below).
pub fn deterministic_start_value(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    cap: usize,
) -> Option<f64> {
    let mut s = start;
    let mut total = 0.0;
    for _ in 0..cap {
        if mdp.is_terminal(s) {
            return Some(total);
        }
        let a = (0..mdp.n_actions()).find(|&a| policy.prob(s, a) == 1.0)?;
        total += mdp.reward(s, a);
        s = (0..mdp.n_states()).find(|&n| mdp.transition_prob(s, a, n) == 1.0)?;
    }
    None
}

fn build_env(config: &ExperimentConfig) -> Result<EnvBundle> {
    match config.env.as_str() {
        "two-state" | "two-state-rewarded" | "baird" => {
            let domain = match config.env.as_str() {
                "two-state" => make_two_state(config.gamma.unwrap_or(0.99)),
                "two-state-rewarded" => make_two_state_rewarded(config.gamma.unwrap_or(0.99)),
                _ => {
                    let dom = make_baird();
                    match config.gamma {
                        Some(gamma) => TabularDomain {
                            mdp: dom.mdp.with_gamma(gamma)?,
                            ..dom
                        },
                        None => dom,
                    }
                }
            };
            let model = compute_model(
                &domain.mdp,
                &domain.target,
                &domain.behavior,
                &domain.features,
                config.lambda,
                &domain.indexer,
                &ModelOptions::default(),
            )?;
            let mse = monte_carlo_mse_context(config, &domain, &model)?;
            Ok(EnvBundle::Tabular(Box::new(TabularContext {
                domain,
                model: Some(model),
                mse,
            })))
        }
        "windy-gridworld" => {
            let gamma = config.gamma.unwrap_or(1.0);
            let (mdp, target, behavior, start) = windy_evaluation_domain(gamma, config.seed);
            let features = FeatureMap::tabular(mdp.n_states(), mdp.n_actions());
            let indexer = mdp.indexer();
            let domain = TabularDomain {
                name: "windy-gridworld",
                mdp,
                features,
                target,
                behavior,
                indexer,
                start,
            };
            Ok(EnvBundle::Tabular(Box::new(TabularContext {
                domain,
                model: None,
                mse: None,
            })))
        }
        "mountain-car" => {
            let (env, tiles) = make_mountain_car();
            let mut rng = rng::stream(config.seed, POLICY_STREAM);
            // Control training runs greedy with optimistic zero init;
            // mc_epsilon only randomizes the evaluation behavior policy.
            let control = sarsa_control_fa(
                &env,
                &tiles,
                0.5,
                0.0,
                config.mc_control_episodes,
                2000,
                &mut rng,
            );
            let sampled = mountain_car_sampled_model(config, &env, &tiles, &control)?;
            let mse = if config.metric_names().iter().any(|m| m == "mse") {
                Some(mountain_car_mse_context(config, &env, &tiles, &control))
            } else {
                None
            };
            Ok(EnvBundle::MountainCar(Box::new(McContext {
                env,
                tiles,
                control,
                epsilon: config.mc_epsilon,
                sampled,
                mse,
            })))
        }
        other => Err(Error::Config(vec![format!(
            "env: unknown environment '{other}'"
        )])),
    }
}

fn monte_carlo_mse_context(
    config: &ExperimentConfig,
    domain: &TabularDomain,
    model: &LinearModel,
) -> Result<Option<MseContext>> {
    if !config.metric_names().iter().any(|m| m == "mse") {
        return Ok(None);
    }
    let q_hat = monte_carlo_q(
        &domain.mdp,
        &domain.target,
        &domain.indexer,
        config.mse_episodes,
        config.seed,
    );
    Ok(Some((model.phi_matrix.clone(), q_hat, model.xi.clone())))
}

/// Monte-Carlo per-pair value estimate: roll out the target policy from
/// every pair and average discounted reward sums.
pub fn monte_carlo_q(
    mdp: &TabularMdp,
    pi: &Policy,
    idx: &crate::mdp::PairIndexer,
    episodes: usize,
    seed: u64,
) -> DVector<f64> {
    let gamma = mdp.gamma();
    // Horizon where the discounted tail drops below 1e-8 (capped).
    let horizon = if gamma < 1.0 {
        ((1e-8f64.ln() / gamma.ln()).ceil() as usize).clamp(10, 2000)
    } else {
        2000
    };
    let per_pair = (episodes / idx.len()).max(1);
    let mut rng = rng::stream(seed, VALUE_STREAM);
    let mut q_hat = DVector::zeros(idx.len());
    for (i, (s, a)) in idx.pairs().enumerate() {
        let mut total = 0.0;
        for _ in 0..per_pair {
            total += rollout_from_pair(mdp, pi, s, a, horizon, gamma, &mut rng);
        }
        q_hat[i] = total / per_pair as f64;
    }
    q_hat
}

fn rollout_from_pair(
    mdp: &TabularMdp,
    pi: &Policy,
    s0: usize,
    a0: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut rng::Rng,
) -> f64 {
    use rand::Rng as _;
    let mut total = 0.0;
    let mut discount = 1.0;
    let mut s = s0;
    let mut a = a0;
    for _ in 0..horizon {
        if mdp.is_terminal(s) {
            break;
        }
        total += discount * mdp.reward(s, a);
        discount *= gamma;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = mdp.n_states() - 1;
        for candidate in 0..mdp.n_states() {
            acc += mdp.transition_prob(s, a, candidate);
            if u < acc {
                next = candidate;
                break;
            }
        }
        s = next;
        if mdp.is_terminal(s) {
            break;
        }
        a = pi.sample(s, rng);
    }
    total
}

/// Average the single-sample model estimates over behavior episodes of the
/// tile-coded mountain-car domain (on-policy evaluation of the learned
/// controller).
fn mountain_car_sampled_model(
    config: &ExperimentConfig,
    env: &MountainCar,
    tiles: &TileCodingConfig,
    control: &McControl,
) -> Result<SampledModel> {
    use rand::Rng as _;
    let dim = crate::fa::sa_feature_dim(tiles, envs::mountain_car::N_ACTIONS);
    let gamma = config.gamma.unwrap_or(0.99);
    let mut rng = rng::stream(config.seed, MODEL_STREAM);
    let mut a_sum = DMatrix::zeros(dim, dim);
    let mut b_sum = DVector::zeros(dim);
    let mut m_sum = DMatrix::zeros(dim, dim);
    let mut steps = 0usize;
    for _ in 0..config.mc_model_episodes {
        let mut trace = EligibilityTrace::zeros(dim);
        let mut s = env.reset(&mut rng);
        for _ in 0..config.episode_len {
            let a = if rng.gen::<f64>() < config.mc_epsilon {
                rng.gen_range(0..envs::mountain_car::N_ACTIONS)
            } else {
                control.greedy_action(tiles, s)
            };
            let active = tile_code_sa(&[s.pos, s.vel], a, tiles);
            let phi = tiles_to_vector(&active, dim);
            let (next, reward, done) = env.step(s, a);
            let expected = mc_expected_phi(tiles, control, config.mc_epsilon, next, done, dim);
            trace.advance(1.0, &phi, config.lambda, gamma);
            let e = trace.vector();
            // The difference vector gamma E[phi'] - phi has few nonzeros, so
            // accumulate rank-one terms column by column.
            let g = &expected * gamma - &phi;
            for (j, &gj) in g.iter().enumerate() {
                if gj != 0.0 {
                    a_sum.column_mut(j).axpy(gj, e, 1.0);
                }
            }
            b_sum.axpy(reward, e, 1.0);
            for &i in &active {
                for &j in &active {
                    m_sum[(i, j)] += 1.0;
                }
            }
            steps += 1;
            if done {
                break;
            }
            s = next;
        }
    }
    let n = steps.max(1) as f64;
    Ok(SampledModel::new(
        a_sum / n,
        b_sum / n,
        m_sum / n,
        config.mc_model_episodes,
    ))
}

/// Value-error context for the continuous domain: support pairs collected
/// from behavior episodes, their tile features, Monte-Carlo values of the
/// evaluated policy from each support pair, and uniform weights.
fn mountain_car_mse_context(
    config: &ExperimentConfig,
    env: &MountainCar,
    tiles: &TileCodingConfig,
    control: &McControl,
) -> MseContext {
    use rand::Rng as _;
    let dim = crate::fa::sa_feature_dim(tiles, envs::mountain_car::N_ACTIONS);
    let gamma = config.gamma.unwrap_or(0.99);
    let epsilon = config.mc_epsilon;
    let mut rng = rng::stream(config.seed, VALUE_STREAM);
    let pick = |s: McState, rng: &mut rng::Rng| -> usize {
        if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..envs::mountain_car::N_ACTIONS)
        } else {
            control.greedy_action(tiles, s)
        }
    };

    // Support: every 10th visited pair from behavior episodes, capped.
    let n_support = 64;
    let mut support: Vec<(McState, usize)> = Vec::with_capacity(n_support);
    'collect: loop {
        let mut s = env.reset(&mut rng);
        for step in 0..400 {
            let a = pick(s, &mut rng);
            if step % 10 == 0 {
                support.push((s, a));
                if support.len() == n_support {
                    break 'collect;
                }
            }
            let (next, _, done) = env.step(s, a);
            if done {
                break;
            }
            s = next;
        }
    }

    let rollouts = 8;
    let horizon = 1000;
    let mut phi = DMatrix::zeros(n_support, dim);
    let mut q_hat = DVector::zeros(n_support);
    for (i, &(state, action)) in support.iter().enumerate() {
        let row = tiles_to_vector(&tile_code_sa(&[state.pos, state.vel], action, tiles), dim);
        phi.row_mut(i).copy_from(&row.transpose());
        let mut total = 0.0;
        for _ in 0..rollouts {
            let mut discount = 1.0;
            let mut value = 0.0;
            let mut s = state;
            let mut a = action;
            for _ in 0..horizon {
                let (next, reward, done) = env.step(s, a);
                value += discount * reward;
                discount *= gamma;
                if done {
                    break;
                }
                s = next;
                a = pick(s, &mut rng);
            }
            total += value;
        }
        q_hat[i] = total / rollouts as f64;
    }
    let xi = DVector::from_element(n_support, 1.0 / n_support as f64);
    (phi, q_hat, xi)
}

fn mc_expected_phi(
    tiles: &TileCodingConfig,
    control: &McControl,
    epsilon: f64,
    state: McState,
    done: bool,
    dim: usize,
) -> DVector<f64> {
    if done {
        return DVector::zeros(dim);
    }
    let n_actions = envs::mountain_car::N_ACTIONS;
    let greedy = control.greedy_action(tiles, state);
    let mut out = DVector::zeros(dim);
    for a in 0..n_actions {
        let mut p = epsilon / n_actions as f64;
        if a == greedy {
            p += 1.0 - epsilon;
        }
        out += tiles_to_vector(&tile_code_sa(&[state.pos, state.vel], a, tiles), dim) * p;
    }
    out
}

/// Run the configured experiment; write CSVs when an output directory is
/// set (in the config or the override).
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<AggregateResult> {
    config.validate()?;
    let bundle = build_env(config)?;
    let schedules = config.schedules();
    let grid = config.grid();
    let metrics = config.metric_names();

    let mut points = Vec::new();
    let mut raw: BTreeMap<(String, String), Vec<RawRow>> = BTreeMap::new();
    let mut aggregate = Vec::new();

    for (sched_idx, schedule) in schedules.iter().enumerate() {
        for (point_idx, point) in grid.iter().enumerate() {
            let gate_passed = gate_for_point(&bundle, config, point, schedule);
            let cell_results: Vec<CellResult> = if gate_passed == Some(false) {
                Vec::new()
            } else {
                let global = sched_idx * grid.len() + point_idx;
                (0..config.n_runs)
                    .into_par_iter()
                    .map(|run| run_cell(&bundle, config, schedule, point, global, run, &metrics))
                    .collect::<Result<Vec<_>>>()?
            };

            let diverged_runs = cell_results.iter().filter(|c| c.diverged).count();
            let mut final_means = BTreeMap::new();
            for metric in &metrics {
                // Raw rows in (run, episode) order.
                let rows = raw.entry((metric.clone(), schedule.clone())).or_default();
                for (run, cell) in cell_results.iter().enumerate() {
                    if let Some(values) = cell.metrics.get(metric) {
                        for (episode, &value) in values.iter().enumerate() {
                            rows.push(RawRow {
                                grid_alpha: point.alpha,
                                grid_ratio: point.ratio,
                                run,
                                episode,
                                value,
                            });
                        }
                    }
                }
                // Aggregate across runs, episode by episode.
                for episode in 0..config.n_episodes {
                    let values: Vec<f64> = cell_results
                        .iter()
                        .filter_map(|c| c.metrics.get(metric).and_then(|v| v.get(episode)))
                        .copied()
                        .collect();
                    if values.is_empty() {
                        continue;
                    }
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    let std = if values.len() > 1 {
                        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                            / (values.len() - 1) as f64)
                            .sqrt()
                    } else {
                        0.0
                    };
                    aggregate.push(AggregateRow {
                        schedule: schedule.clone(),
                        grid_alpha: point.alpha,
                        grid_ratio: point.ratio,
                        episode,
                        metric: metric.clone(),
                        mean,
                        std,
                        diverged_runs,
                    });
                    if episode + 1 == config.n_episodes {
                        final_means.insert(metric.clone(), mean);
                    }
                }
            }
            points.push(GridPointResult {
                schedule: schedule.clone(),
                point: *point,
                gate_passed,
                diverged_runs,
                final_means,
            });
        }
    }

    let mut result = AggregateResult {
        raw,
        aggregate,
        points,
        files: Vec::new(),
    };
    let target_dir = out_dir.or(config.out_dir.as_deref());
    if let Some(dir) = target_dir {
        write_outputs(&mut result, dir, config)?;
    }
    Ok(result)
}

/// The constant-step admissibility gate for one grid point; `None` when no
/// exact model is available or the schedule decays.
fn gate_for_point(
    bundle: &EnvBundle,
    _config: &ExperimentConfig,
    point: &GridPoint,
    schedule: &str,
) -> Option<bool> {
    if schedule != "constant" {
        return None;
    }
    match bundle {
        EnvBundle::Tabular(ctx) => ctx
            .model
            .as_ref()
            .map(|m| stepsize_gate(point.alpha, point.beta(), operator_norm(&m.a))),
        EnvBundle::MountainCar(_) => None,
    }
}

struct CellResult {
    metrics: BTreeMap<String, Vec<f64>>,
    diverged: bool,
}

fn run_cell(
    bundle: &EnvBundle,
    config: &ExperimentConfig,
    schedule: &str,
    point: &GridPoint,
    global_grid_index: usize,
    run: usize,
    metrics: &[String],
) -> Result<CellResult> {
    let mut rng = rng::stream(config.seed, rng::cell_stream(global_grid_index, run));
    match bundle {
        EnvBundle::Tabular(ctx) => match config.learner.as_str() {
            "tabular-escv" | "tabular-es" => {
                let use_cv = config.learner == "tabular-escv";
                let ensemble = tabular_escv_learn(
                    &ctx.domain.mdp,
                    &ctx.domain.target,
                    &ctx.domain.behavior,
                    config.lambda,
                    point.alpha,
                    config.n_episodes,
                    1,
                    config.seed ^ rng::cell_stream(global_grid_index, run),
                    &ctx.domain.start,
                    config.episode_len,
                    use_cv,
                )?;
                let mut out = BTreeMap::new();
                out.insert("start_value".to_string(), ensemble.start_values[0].clone());
                Ok(CellResult {
                    metrics: out,
                    diverged: false,
                })
            }
            _ => {
                let learner = if config.learner == "naive" {
                    LearnerKind::Naive
                } else {
                    LearnerKind::Ges
                };
                let theta0 = if config.theta0.is_empty() {
                    None
                } else {
                    Some(DVector::from_vec(config.theta0.clone()))
                };
                let run_config = GesRunConfig {
                    learner,
                    lambda: config.lambda,
                    step_sizes: StepSizes {
                        alpha: schedule_from(schedule, point.alpha),
                        beta: schedule_from(schedule, point.beta()),
                    },
                    n_episodes: config.n_episodes,
                    episode_len: config.episode_len,
                    theta0,
                    log_params: false,
                };
                let metric_ctx = MetricContext {
                    model: ctx.model.as_ref(),
                    sampled: None,
                    mse: ctx.mse.as_ref().map(|(phi, q, xi)| (phi, q, xi)),
                };
                let record = run_ges(
                    &ctx.domain.mdp,
                    &ctx.domain.target,
                    &ctx.domain.behavior,
                    &ctx.domain.features,
                    &ctx.domain.start,
                    &run_config,
                    &metric_ctx,
                    &mut rng,
                )?;
                let mut out = BTreeMap::new();
                for metric in metrics {
                    let values: Vec<f64> = record
                        .episodes
                        .iter()
                        .map(|e| match metric.as_str() {
                            "mspbe" => e.mspbe,
                            "mse" => e.mse,
                            "theta_norm" => e.theta_norm,
                            _ => f64::NAN,
                        })
                        .collect();
                    out.insert(metric.clone(), values);
                }
                Ok(CellResult {
                    metrics: out,
                    diverged: record.diverged,
                })
            }
        },
        EnvBundle::MountainCar(ctx) => {
            run_mountain_car_cell(ctx, config, schedule, point, &mut rng, metrics)
        }
    }
}

/// On-policy evaluation of the learned mountain-car controller with the
/// primal-dual learner over tile features.
fn run_mountain_car_cell(
    ctx: &McContext,
    config: &ExperimentConfig,
    schedule: &str,
    point: &GridPoint,
    rng: &mut rng::Rng,
    metrics: &[String],
) -> Result<CellResult> {
    use rand::Rng as _;
    let dim = crate::fa::sa_feature_dim(&ctx.tiles, envs::mountain_car::N_ACTIONS);
    let gamma = config.gamma.unwrap_or(0.99);
    let alpha = schedule_from(schedule, point.alpha);
    let beta = schedule_from(schedule, point.beta());
    let mut state = LearnerState::new(dim);
    let mut logs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..config.n_episodes {
        state.begin_episode();
        let mut s = ctx.env.reset(rng);
        for _ in 0..config.episode_len {
            if state.diverged {
                break;
            }
            let a = if rng.gen::<f64>() < ctx.epsilon {
                rng.gen_range(0..envs::mountain_car::N_ACTIONS)
            } else {
                ctx.control.greedy_action(&ctx.tiles, s)
            };
            let phi = tiles_to_vector(&tile_code_sa(&[s.pos, s.vel], a, &ctx.tiles), dim);
            let (next, reward, done) = ctx.env.step(s, a);
            let expected = mc_expected_phi(&ctx.tiles, &ctx.control, ctx.epsilon, next, done, dim);
            let input = crate::learners::GesStepInput {
                phi,
                expected_next_phi: expected,
                reward,
                rho: 1.0,
            };
            let t = state.t + 1;
            ges_step(
                &mut state,
                &input,
                config.lambda,
                gamma,
                alpha.value(t),
                beta.value(t),
            );
            if done {
                break;
            }
            s = next;
        }
        for metric in metrics {
            let value = match metric.as_str() {
                "mspbe" => ctx.sampled.mspbe(&state.theta).0,
                "mse" => match &ctx.mse {
                    Some((phi, q_hat, xi)) => {
                        crate::analysis::empirical_mse(&state.theta, phi, q_hat, xi)
                    }
                    None => f64::NAN,
                },
                "theta_norm" => state.theta.norm(),
                _ => f64::NAN,
            };
            logs.entry(metric.clone()).or_default().push(value);
        }
        if state.diverged {
            break;
        }
    }
    Ok(CellResult {
        metrics: logs,
        diverged: state.diverged,
    })
}

fn sanitize(name: &str) -> String {
    name.replace(['/', ' '], "_")
}

fn write_outputs(
    result: &mut AggregateResult,
    dir: &Path,
    config: &ExperimentConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for ((metric, schedule), rows) in &result.raw {
        let path = dir.join(format!(
            "metric_{}_{}.csv",
            sanitize(metric),
            sanitize(schedule)
        ));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["grid_alpha", "grid_ratio", "run", "episode", "value"])?;
        for row in rows {
            w.write_record(&[
                row.grid_alpha.to_string(),
                row.grid_ratio.to_string(),
                row.run.to_string(),
                row.episode.to_string(),
                row.value.to_string(),
            ])?;
        }
        w.flush()?;
        result.files.push(path);
    }
    let path = dir.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "schedule",
        "grid_alpha",
        "grid_ratio",
        "episode",
        "metric",
        "mean",
        "std",
        "diverged_runs",
    ])?;
    for row in &result.aggregate {
        w.write_record(&[
            row.schedule.clone(),
            row.grid_alpha.to_string(),
            row.grid_ratio.to_string(),
            row.episode.to_string(),
            row.metric.clone(),
            row.mean.to_string(),
            row.std.to_string(),
            row.diverged_runs.to_string(),
        ])?;
    }
    w.flush()?;
    result.files.push(path);
    let _ = config;
    Ok(())
}

/// Load a raw metric CSV back into rows.
pub fn load_metric_csv(path: impl AsRef<Path>) -> Result<Vec<RawRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(RawRow {
            grid_alpha: parse_field(&record, 0)?,
            grid_ratio: parse_field(&record, 1)?,
            run: parse_field::<usize>(&record, 2)?,
            episode: parse_field::<usize>(&record, 3)?,
            value: parse_field(&record, 4)?,
        });
    }
    Ok(rows)
}

/// Load the aggregate CSV back into rows.
pub fn load_aggregate_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(AggregateRow {
            schedule: record.get(0).unwrap_or_default().to_string(),
            grid_alpha: parse_field(&record, 1)?,
            grid_ratio: parse_field(&record, 2)?,
            episode: parse_field::<usize>(&record, 3)?,
            metric: record.get(4).unwrap_or_default().to_string(),
            mean: parse_field(&record, 5)?,
            std: parse_field(&record, 6)?,
            diverged_runs: parse_field::<usize>(&record, 7)?,
        });
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, index: usize) -> Result<T> {
    record
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("missing CSV field {index}")))?
        .parse()
        .map_err(|_| Error::Invalid(format!("unparseable CSV field {index}")))
}

/// Best grid point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// None when every grid point diverged in every run.
    pub best: Option<GridPointResult>,
    pub all_diverged: bool,
    pub points: Vec<GridPointResult>,
}

/// Run the grid and pick the point with the lowest final-episode mean of the
/// first configured metric; ties break toward smaller alpha, then ratio.
pub fn sweep_grid(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<SweepResult> {
    let result = run_experiment(config, out_dir)?;
    let metric = config.metric_names()[0].clone();
    let mut candidates: Vec<&GridPointResult> = result
        .points
        .iter()
        .filter(|p| p.diverged_runs < config.n_runs && !p.final_means.is_empty())
        .filter(|p| {
            p.final_means
                .get(&metric)
                .map(|m| m.is_finite())
                .unwrap_or(false)
        })
        .collect();
    candidates.sort_by(|a, b| {
        let ma = a.final_means[&metric];
        let mb = b.final_means[&metric];
        ma.partial_cmp(&mb)
            .unwrap()
            .then(a.point.alpha.partial_cmp(&b.point.alpha).unwrap())
            .then(a.point.ratio.partial_cmp(&b.point.ratio).unwrap())
    });
    let best = candidates.first().map(|p| (*p).clone());
    let all_diverged = result
        .points
        .iter()
        .all(|p| p.diverged_runs == config.n_runs || p.gate_passed == Some(false));
    Ok(SweepResult {
        best,
        all_diverged,
        points: result.points,
    })
}

/// Gate verdict per grid point.
#[derive(Debug, Clone)]
pub struct GateVerdict {
    pub point: GridPoint,
    pub passed: bool,
    pub a_norm: f64,
}

/// Evaluate the constant-step gate on every grid point against an exact
/// model; only tabular environments have one.
pub fn verify_stepsize_gate(config: &ExperimentConfig, model: &LinearModel) -> Vec<GateVerdict> {
    let a_norm = operator_norm(&model.a);
    config
        .grid()
        .iter()
        .map(|point| GateVerdict {
            point: *point,
            passed: stepsize_gate(point.alpha, point.beta(), a_norm),
            a_norm,
        })
        .collect()
}

/// Exact model of a tabular experiment config (for `verify` and tests).
pub fn exact_model_for(config: &ExperimentConfig) -> Result<LinearModel> {
    match build_env(config)? {
        EnvBundle::Tabular(ctx) => ctx
            .model
            .ok_or_else(|| Error::Invalid(format!("no exact model for env '{}'", config.env))),
        EnvBundle::MountainCar(_) => Err(Error::Invalid(
            "no exact model for the continuous domain".into(),
        )),
    }
}
