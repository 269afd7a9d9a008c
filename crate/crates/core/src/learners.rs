//! Parameter-update procedures.
//!
//! The naive trace-based gradient update (which diverges off-policy), its
//! deterministic expected iteration, the convergent stochastic primal-dual
//! learner with per-episode trace resets and uniform parameter averaging,
//! TD-fixed-point and saddle solvers, and the tabular utilities: off-line
//! expected-value evaluation with or without the control variate, Q-learning
//! to manufacture target policies, and semi-gradient Sarsa with tile coding
//! for the continuous domain.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::analysis::SampledModel;
use crate::envs::{McState, MountainCar};
use crate::error::{Error, Result};
use crate::fa::{tile_code_sa, EligibilityTrace, FeatureMap, LinearModel, TileCodingConfig};
use crate::linalg;
use crate::mdp::{
    importance_ratio, sample_trajectory, Policy, QTable, StartState, StopRule, TabularMdp,
};
use crate::returns::{offline_episode_update, ReturnConfig};
use crate::rng::Rng;

/// Divergence detector threshold on the parameter norm.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Step-size schedule; `t` starts at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Schedule {
    Constant(f64),
    /// `c / sqrt(t)`.
    InvSqrt(f64),
    /// `c / t`.
    InvT(f64),
}

impl Schedule {
    pub fn value(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        match self {
            Schedule::Constant(c) => *c,
            Schedule::InvSqrt(c) => c / (t as f64).sqrt(),
            Schedule::InvT(c) => c / t as f64,
        }
    }

    pub fn base(&self) -> f64 {
        match self {
            Schedule::Constant(c) | Schedule::InvSqrt(c) | Schedule::InvT(c) => *c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base() > 0.0 {
            Ok(())
        } else {
            Err(Error::Invalid(
                "step-size constants must be positive".into(),
            ))
        }
    }
}

/// Primal and dual step-size schedules.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepSizes {
    pub alpha: Schedule,
    pub beta: Schedule,
}

impl StepSizes {
    pub fn constant(alpha: f64, beta: f64) -> Self {
        Self {
            alpha: Schedule::Constant(alpha),
            beta: Schedule::Constant(beta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        self.beta.validate()
    }
}

/// Learner parameters plus trace and counters.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub theta: DVector<f64>,
    pub omega: DVector<f64>,
    pub trace: EligibilityTrace,
    pub t: usize,
    pub episode: usize,
    pub diverged: bool,
}

impl LearnerState {
    pub fn new(dim: usize) -> Self {
        Self {
            theta: DVector::zeros(dim),
            omega: DVector::zeros(dim),
            trace: EligibilityTrace::zeros(dim),
            t: 0,
            episode: 0,
            diverged: false,
        }
    }

    pub fn with_theta(dim: usize, theta: DVector<f64>) -> Self {
        let mut state = Self::new(dim);
        state.theta = theta;
        state
    }

    pub fn begin_episode(&mut self) {
        self.trace.reset();
        self.episode += 1;
    }

    fn check_divergence(&mut self) {
        let norm = self.theta.norm();
        if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
            self.diverged = true;
        }
    }
}

/// One observed step in feature space: the current feature, the exact
/// policy-expected next feature (zero past a terminal), the reward and the
/// importance ratio of the taken action.
#[derive(Debug, Clone)]
pub struct GesStepInput {
    pub phi: DVector<f64>,
    pub expected_next_phi: DVector<f64>,
    pub reward: f64,
    pub rho: f64,
}

/// Build a [`GesStepInput`] from a tabular transition.
pub fn tabular_step_input(
    mdp: &TabularMdp,
    features: &FeatureMap,
    pi: &Policy,
    mu: &Policy,
    state: usize,
    action: usize,
    next_state: usize,
) -> Result<GesStepInput> {
    let rho = importance_ratio(pi, mu, state, action)?;
    let expected_next_phi = if mdp.is_terminal(next_state) {
        DVector::zeros(features.dim())
    } else {
        features.expected_phi(pi, next_state)
    };
    Ok(GesStepInput {
        phi: features.phi(state, action).clone(),
        expected_next_phi,
        reward: mdp.reward(state, action),
        rho,
    })
}

/// Naive trace-form update `theta += alpha delta e`. Divergence trips the
/// state flag instead of panicking.
pub fn naive_step(
    state: &mut LearnerState,
    input: &GesStepInput,
    lambda: f64,
    gamma: f64,
    alpha: f64,
) {
    if state.diverged {
        return;
    }
    state.trace.advance(input.rho, &input.phi, lambda, gamma);
    state.t += 1;
    let delta = input.reward + gamma * state.theta.dot(&input.expected_next_phi)
        - state.theta.dot(&input.phi);
    state.theta += state.trace.vector() * (alpha * delta);
    state.check_divergence();
}

/// One stochastic primal-dual step. Both updates read the pre-step dual
/// parameters; the trace is advanced first so it includes `phi_t`.
pub fn ges_step(
    state: &mut LearnerState,
    input: &GesStepInput,
    lambda: f64,
    gamma: f64,
    alpha_t: f64,
    beta_t: f64,
) {
    if state.diverged {
        return;
    }
    state.trace.advance(input.rho, &input.phi, lambda, gamma);
    state.t += 1;
    let e = state.trace.vector().clone();
    let delta = input.reward + gamma * state.theta.dot(&input.expected_next_phi)
        - state.theta.dot(&input.phi);
    let e_dot_omega = e.dot(&state.omega);
    let phi_dot_omega = input.phi.dot(&state.omega);
    // omega += beta (e delta - phi phi^T omega)
    state.omega += &e * (beta_t * delta) - &input.phi * (beta_t * phi_dot_omega);
    // theta -= alpha (gamma E_pi[phi'] - phi) e^T omega
    let g = &input.expected_next_phi * gamma - &input.phi;
    state.theta -= g * (alpha_t * e_dot_omega);
    state.check_divergence();
}

/// Deterministic expected iteration `theta_{t+1} = theta_t + alpha (A theta_t + b)`;
/// divergence is allowed and visible in the returned path.
pub fn expected_iterate(
    theta0: &DVector<f64>,
    model: &LinearModel,
    alpha: f64,
    steps: usize,
) -> Vec<DVector<f64>> {
    let mut path = Vec::with_capacity(steps + 1);
    path.push(theta0.clone());
    let mut theta = theta0.clone();
    for _ in 0..steps {
        theta = &theta + (&model.a * &theta + &model.b) * alpha;
        path.push(theta.clone());
    }
    path
}

/// Deterministic saddle path of the expected updates
/// `omega += beta (A theta + b - M omega)`, `theta -= alpha A^T omega`,
/// both reading the pre-step parameters.
pub struct SaddlePath {
    pub thetas: Vec<DVector<f64>>,
    pub omegas: Vec<DVector<f64>>,
}

impl SaddlePath {
    /// Uniform averages over iterates `1..=t`.
    pub fn averages(&self, t: usize) -> (DVector<f64>, DVector<f64>) {
        assert!(t >= 1 && t < self.thetas.len() + 1);
        let dim = self.thetas[0].len();
        let mut theta_bar = DVector::zeros(dim);
        let mut omega_bar = DVector::zeros(dim);
        for i in 1..=t {
            theta_bar += &self.thetas[i];
            omega_bar += &self.omegas[i];
        }
        (theta_bar / t as f64, omega_bar / t as f64)
    }
}

pub fn expected_saddle_iterate(
    theta0: &DVector<f64>,
    omega0: &DVector<f64>,
    model: &LinearModel,
    alpha: f64,
    beta: f64,
    steps: usize,
) -> SaddlePath {
    let mut thetas = Vec::with_capacity(steps + 1);
    let mut omegas = Vec::with_capacity(steps + 1);
    thetas.push(theta0.clone());
    omegas.push(omega0.clone());
    let mut theta = theta0.clone();
    let mut omega = omega0.clone();
    for _ in 0..steps {
        let residual = &model.a * &theta + &model.b - &model.m * &omega;
        let new_omega = &omega + residual * beta;
        let new_theta = &theta - model.a.transpose() * &omega * alpha;
        theta = new_theta;
        omega = new_omega;
        thetas.push(theta.clone());
        omegas.push(omega.clone());
    }
    SaddlePath { thetas, omegas }
}

/// TD fixed point `A theta + b = 0`.
#[derive(Debug, Clone)]
pub struct TdSolution {
    pub theta: DVector<f64>,
    /// True when A was singular and the minimum-norm least-squares solution
    /// was returned instead.
    pub least_squares: bool,
}

pub fn td_fixed_point(model: &LinearModel) -> Result<TdSolution> {
    let rhs = -&model.b;
    // LU runs to completion on rank-deficient matrices with tiny pivots, so
    // rank is decided by the singular values.
    let svs = model.a.clone().svd(false, false).singular_values;
    let rank_deficient = svs.min() <= svs.max().max(1.0) * 1e-10;
    if !rank_deficient {
        let theta = linalg::solve(&model.a, &rhs)?;
        return Ok(TdSolution {
            theta,
            least_squares: false,
        });
    }
    let theta = linalg::least_squares(&model.a, &rhs)?;
    Ok(TdSolution {
        theta,
        least_squares: true,
    })
}

/// Per-episode log line of a learner run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mspbe: f64,
    pub mse: f64,
    pub theta_norm: f64,
    pub diverged: bool,
}

/// Metrics evaluated per episode. Absent pieces log NaN.
#[derive(Default)]
pub struct MetricContext<'a> {
    /// Exact model: logs the exact-model MSPBE.
    pub model: Option<&'a LinearModel>,
    /// Monte-Carlo model: logs the empirical MSPBE instead when no exact
    /// model is available.
    pub sampled: Option<&'a SampledModel>,
    /// `(phi_matrix, q_hat, xi)` for the weighted value error.
    pub mse: Option<(&'a DMatrix<f64>, &'a DVector<f64>, &'a DVector<f64>)>,
}

impl MetricContext<'_> {
    fn mspbe(&self, theta: &DVector<f64>) -> f64 {
        if let Some(model) = self.model {
            crate::fa::mspbe_quadratic(theta, model)
        } else if let Some(sampled) = self.sampled {
            sampled.mspbe(theta).0
        } else {
            f64::NAN
        }
    }

    fn mse(&self, theta: &DVector<f64>) -> f64 {
        match self.mse {
            Some((phi, q_hat, xi)) => crate::analysis::empirical_mse(theta, phi, q_hat, xi),
            None => f64::NAN,
        }
    }
}

/// Full log of one learner run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub episodes: Vec<EpisodeLog>,
    /// Uniform averages of the post-update iterates over all steps; equal to
    /// the initial parameters when no step ran.
    pub theta_bar: DVector<f64>,
    pub omega_bar: DVector<f64>,
    pub theta_final: DVector<f64>,
    pub omega_final: DVector<f64>,
    pub steps: usize,
    pub diverged: bool,
    /// Post-update iterates, kept only when parameter logging is on.
    pub theta_log: Option<Vec<DVector<f64>>>,
    pub omega_log: Option<Vec<DVector<f64>>>,
}

impl RunRecord {
    /// CSV with one row per episode.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["episode", "mspbe", "mse", "theta_norm", "diverged"])?;
        for log in &self.episodes {
            w.write_record(&[
                log.episode.to_string(),
                log.mspbe.to_string(),
                log.mse.to_string(),
                log.theta_norm.to_string(),
                log.diverged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which update rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LearnerKind {
    Ges,
    Naive,
}

/// Configuration of a single stochastic learner run on a tabular domain.
#[derive(Debug, Clone)]
pub struct GesRunConfig {
    pub learner: LearnerKind,
    pub lambda: f64,
    pub step_sizes: StepSizes,
    pub n_episodes: usize,
    pub episode_len: usize,
    pub theta0: Option<DVector<f64>>,
    pub log_params: bool,
}

/// Run a stochastic learner episode by episode on a tabular domain,
/// resetting the trace at each episode start and averaging parameters
/// uniformly over steps.
#[allow(clippy::too_many_arguments)]
pub fn run_ges(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    features: &FeatureMap,
    start: &StartState,
    config: &GesRunConfig,
    metrics: &MetricContext<'_>,
    rng: &mut Rng,
) -> Result<RunRecord> {
    config.step_sizes.validate()?;
    let dim = features.dim();
    let mut state = match &config.theta0 {
        Some(theta0) => LearnerState::with_theta(dim, theta0.clone()),
        None => LearnerState::new(dim),
    };
    let mut theta_sum = DVector::zeros(dim);
    let mut omega_sum = DVector::zeros(dim);
    let mut averaged = 0usize;
    let mut theta_log = config.log_params.then(Vec::new);
    let mut omega_log = config.log_params.then(Vec::new);
    let mut episodes = Vec::with_capacity(config.n_episodes);

    for episode in 0..config.n_episodes {
        state.begin_episode();
        let mut s = start.sample(mdp.n_states(), rng);
        for _ in 0..config.episode_len {
            if mdp.is_terminal(s) || state.diverged {
                break;
            }
            let a = mu.sample(s, rng);
            let next = sample_next(mdp, s, a, rng);
            let input = tabular_step_input(mdp, features, pi, mu, s, a, next)?;
            let t = state.t + 1;
            match config.learner {
                LearnerKind::Ges => ges_step(
                    &mut state,
                    &input,
                    config.lambda,
                    mdp.gamma(),
                    config.step_sizes.alpha.value(t),
                    config.step_sizes.beta.value(t),
                ),
                LearnerKind::Naive => naive_step(
                    &mut state,
                    &input,
                    config.lambda,
                    mdp.gamma(),
                    config.step_sizes.alpha.value(t),
                ),
            }
            if !state.diverged {
                theta_sum += &state.theta;
                omega_sum += &state.omega;
                averaged += 1;
                if let Some(log) = theta_log.as_mut() {
                    log.push(state.theta.clone());
                }
                if let Some(log) = omega_log.as_mut() {
                    log.push(state.omega.clone());
                }
            }
            s = next;
        }
        episodes.push(EpisodeLog {
            episode,
            mspbe: metrics.mspbe(&state.theta),
            mse: metrics.mse(&state.theta),
            theta_norm: state.theta.norm(),
            diverged: state.diverged,
        });
        if state.diverged {
            break;
        }
    }

    let (theta_bar, omega_bar) = if averaged == 0 {
        (state.theta.clone(), state.omega.clone())
    } else {
        (theta_sum / averaged as f64, omega_sum / averaged as f64)
    };
    Ok(RunRecord {
        episodes,
        theta_bar,
        omega_bar,
        theta_final: state.theta,
        omega_final: state.omega,
        steps: averaged,
        diverged: state.diverged,
        theta_log,
        omega_log,
    })
}

fn sample_next(mdp: &TabularMdp, state: usize, action: usize, rng: &mut Rng) -> usize {
    use rand::Rng as _;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for next in 0..mdp.n_states() {
        acc += mdp.transition_prob(state, action, next);
        if u < acc {
            return next;
        }
    }
    mdp.n_states() - 1
}

/// Mean and sample standard deviation (n-1 denominator) per episode across
/// runs of the tabular evaluator.
#[derive(Debug, Clone)]
pub struct EscvEnsemble {
    /// Start-state value estimate per run and episode.
    pub start_values: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Off-line expected-value evaluation on an episodic MDP: one update per
/// episode from a behavior trajectory, with the control variate toggled by
/// `use_cv`; `n_runs` independent streams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn tabular_escv_learn(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    lambda: f64,
    alpha: f64,
    n_episodes: usize,
    n_runs: usize,
    seed: u64,
    start: &StartState,
    max_steps: usize,
    use_cv: bool,
) -> Result<EscvEnsemble> {
    let config = ReturnConfig::new(lambda, mdp.gamma())?;
    let mut start_values = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let mut rng = crate::rng::stream(seed, run as u64);
        let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
        let mut values = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            let s0 = start.sample(mdp.n_states(), &mut rng);
            let trajectory =
                sample_trajectory(mdp, mu, s0, &mut rng, max_steps, StopRule::TerminalOrCap);
            if !trajectory.is_empty() {
                q = offline_episode_update(&trajectory, &q, &config, pi, mu, alpha, use_cv)?;
            }
            values.push(q.expected_under(pi, start.sample(mdp.n_states(), &mut rng)));
        }
        start_values.push(values);
    }
    let (mean, std) = ensemble_stats(&start_values, n_episodes);
    Ok(EscvEnsemble {
        start_values,
        mean,
        std,
    })
}

fn ensemble_stats(values: &[Vec<f64>], n_episodes: usize) -> (Vec<f64>, Vec<f64>) {
    let n_runs = values.len();
    let mut mean = vec![0.0; n_episodes];
    let mut std = vec![0.0; n_episodes];
    for e in 0..n_episodes {
        let m: f64 = values.iter().map(|run| run[e]).sum::<f64>() / n_runs as f64;
        mean[e] = m;
        if n_runs > 1 {
            let ss: f64 = values.iter().map(|run| (run[e] - m).powi(2)).sum();
            std[e] = (ss / (n_runs - 1) as f64).sqrt();
        }
    }
    (mean, std)
}

/// Q-learning with a decaying epsilon-greedy exploration schedule
/// (`eps_{k+1} = decay * eps_k`); returns the greedy policy of the learned
/// table along with the table itself.
#[allow(clippy::too_many_arguments)]
pub fn q_learning_control(
    mdp: &TabularMdp,
    epsilon0: f64,
    decay: f64,
    n_episodes: usize,
    alpha: f64,
    start: &StartState,
    max_steps: usize,
    rng: &mut Rng,
) -> (Policy, QTable) {
    use rand::Rng as _;
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let mut epsilon = epsilon0;
    for _ in 0..n_episodes {
        let mut s = start.sample(mdp.n_states(), rng);
        for _ in 0..max_steps {
            if mdp.is_terminal(s) {
                break;
            }
            let a = if rng.gen::<f64>() < epsilon {
                rng.gen_range(0..mdp.n_actions())
            } else {
                q.argmax(s)
            };
            let next = sample_next(mdp, s, a, rng);
            let max_next = if mdp.is_terminal(next) {
                0.0
            } else {
                q.get(next, q.argmax(next))
            };
            let target = mdp.reward(s, a) + mdp.gamma() * max_next;
            let old = q.get(s, a);
            q.set(s, a, old + alpha * (target - old));
            s = next;
        }
        epsilon *= decay;
    }
    (Policy::greedy(&q), q)
}

/// Result of semi-gradient Sarsa control on the continuous domain.
#[derive(Debug, Clone)]
pub struct McControl {
    pub weights: DVector<f64>,
    pub training_lengths: Vec<usize>,
}

impl McControl {
    pub fn q(&self, config: &TileCodingConfig, state: McState, action: usize) -> f64 {
        tile_code_sa(&[state.pos, state.vel], action, config)
            .iter()
            .map(|&i| self.weights[i])
            .sum()
    }

    pub fn greedy_action(&self, config: &TileCodingConfig, state: McState) -> usize {
        let mut best = 0;
        let mut best_q = self.q(config, state, 0);
        for a in 1..crate::envs::mountain_car::N_ACTIONS {
            let q = self.q(config, state, a);
            if q > best_q {
                best_q = q;
                best = a;
            }
        }
        best
    }

    /// Length of one greedy episode from `start`, capped.
    pub fn greedy_episode_len(
        &self,
        env: &MountainCar,
        config: &TileCodingConfig,
        start: McState,
        cap: usize,
    ) -> usize {
        let mut s = start;
        for step in 0..cap {
            let (next, _, done) = env.step(s, self.greedy_action(config, s));
            if done {
                return step + 1;
            }
            s = next;
        }
        cap
    }
}

/// Semi-gradient Sarsa with tile coding on mountain car (undiscounted
/// episodes). Each active tile moves by `alpha / n_tilings` per update.
#[allow(clippy::too_many_arguments)]
pub fn sarsa_control_fa(
    env: &MountainCar,
    config: &TileCodingConfig,
    alpha: f64,
    epsilon: f64,
    n_episodes: usize,
    max_steps: usize,
    rng: &mut Rng,
) -> McControl {
    use rand::Rng as _;
    let dim = crate::fa::sa_feature_dim(config, crate::envs::mountain_car::N_ACTIONS);
    let step_size = alpha / config.n_tilings as f64;
    let mut w = DVector::zeros(dim);
    let q = |w: &DVector<f64>, s: McState, a: usize| -> f64 {
        tile_code_sa(&[s.pos, s.vel], a, config)
            .iter()
            .map(|&i| w[i])
            .sum()
    };
    let pick = |w: &DVector<f64>, s: McState, rng: &mut Rng| -> usize {
        if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..crate::envs::mountain_car::N_ACTIONS)
        } else {
            let mut best = 0;
            let mut best_q = q(w, s, 0);
            for a in 1..crate::envs::mountain_car::N_ACTIONS {
                let value = q(w, s, a);
                if value > best_q {
                    best_q = value;
                    best = a;
                }
            }
            best
        }
    };

    let mut lengths = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut s = env.reset(rng);
        let mut a = pick(&w, s, rng);
        let mut length = max_steps;
        for step in 0..max_steps {
            let (next, reward, done) = env.step(s, a);
            let q_sa = q(&w, s, a);
            let target = if done {
                reward
            } else {
                let next_a = pick(&w, next, rng);
                let t = reward + q(&w, next, next_a);
                // Commit the action chosen for the next step.
                let update = step_size * (t - q_sa);
                for &i in &tile_code_sa(&[s.pos, s.vel], a, config) {
                    w[i] += update;
                }
                s = next;
                a = next_a;
                continue;
            };
            let update = step_size * (target - q_sa);
            for &i in &tile_code_sa(&[s.pos, s.vel], a, config) {
                w[i] += update;
            }
            length = step + 1;
            break;
        }
        lengths.push(length);
    }
    McControl {
        weights: w,
        training_lengths: lengths,
    }
}
