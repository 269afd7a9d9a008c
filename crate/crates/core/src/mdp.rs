//! Finite MDPs, policies, trajectories and exact value oracles.
//!
//! A [`TabularMdp`] stores the transition tensor `P[s][a][s']`, the expected
//! immediate reward `R[s][a]`, the discount and a terminal mask. Terminal
//! states are absorbing with zero reward, which makes episodic experiments
//! well defined while keeping the infinite-sum identities usable.
//!
//! Flattened state-action objects (the pair transition matrix, stationary
//! weights, feature matrices) depend on how pairs are enumerated; the
//! [`PairIndexer`] makes that choice explicit instead of baking one in.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;

const PROB_TOL: f64 = 1e-12;

/// How state-action pairs are flattened into a single index.
///
/// `StateMajor` maps `(s, a)` to `s * n_actions + a` and is the default.
/// `ActionMajor` maps `(s, a)` to `a * n_states + s`; the two-state domain
/// uses it so its pair matrices can be compared entry-for-entry against the
/// printed closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOrdering {
    StateMajor,
    ActionMajor,
}

/// Enumerates state-action pairs in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndexer {
    pub n_states: usize,
    pub n_actions: usize,
    pub ordering: PairOrdering,
}

impl PairIndexer {
    pub fn new(n_states: usize, n_actions: usize, ordering: PairOrdering) -> Self {
        Self {
            n_states,
            n_actions,
            ordering,
        }
    }

    pub fn state_major(n_states: usize, n_actions: usize) -> Self {
        Self::new(n_states, n_actions, PairOrdering::StateMajor)
    }

    pub fn len(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, state: usize, action: usize) -> usize {
        match self.ordering {
            PairOrdering::StateMajor => state * self.n_actions + action,
            PairOrdering::ActionMajor => action * self.n_states + state,
        }
    }

    pub fn pair(&self, index: usize) -> (usize, usize) {
        match self.ordering {
            PairOrdering::StateMajor => (index / self.n_actions, index % self.n_actions),
            PairOrdering::ActionMajor => (index % self.n_states, index / self.n_states),
        }
    }

    /// Iterate pairs in index order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(|i| self.pair(i))
    }
}

/// Finite MDP with expected immediate rewards.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[a]` is the |S| x |S| matrix of `P[s][a][s']`.
    transition: Vec<DMatrix<f64>>,
    /// `reward[(s, a)]` is the expected immediate reward.
    reward: DMatrix<f64>,
    gamma: f64,
    terminal: Vec<bool>,
}

impl TabularMdp {
    /// Build and validate an MDP.
    ///
    /// `gamma` must lie in `(0, 1)`, or equal `1.0` for an episodic MDP
    /// (at least one terminal state); terminal states must self-loop with
    /// zero reward, and every `(s, a)` row of the transition tensor must be
    /// a probability distribution.
    pub fn new(
        transition: Vec<DMatrix<f64>>,
        reward: DMatrix<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let n_actions = transition.len();
        if n_actions == 0 {
            return Err(Error::Invalid("MDP needs at least one action".into()));
        }
        let n_states = transition[0].nrows();
        if n_states == 0 {
            return Err(Error::Invalid("MDP needs at least one state".into()));
        }
        for (a, p) in transition.iter().enumerate() {
            if p.nrows() != n_states || p.ncols() != n_states {
                return Err(Error::Shape(format!(
                    "transition matrix for action {a} is {}x{}, expected {n_states}x{n_states}",
                    p.nrows(),
                    p.ncols()
                )));
            }
        }
        if reward.nrows() != n_states || reward.ncols() != n_actions {
            return Err(Error::Shape(format!(
                "reward table is {}x{}, expected {n_states}x{n_actions}",
                reward.nrows(),
                reward.ncols()
            )));
        }
        if terminal.len() != n_states {
            return Err(Error::Shape(format!(
                "terminal mask has {} entries, expected {n_states}",
                terminal.len()
            )));
        }
        let episodic = terminal.iter().any(|&t| t);
        if !(gamma > 0.0 && gamma < 1.0) && !(gamma == 1.0 && episodic) {
            return Err(Error::Invalid(format!(
                "gamma must lie in (0,1), or equal 1 for an episodic MDP; got {gamma}"
            )));
        }
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for a in 0..self.n_actions {
            for s in 0..self.n_states {
                let row = self.transition[a].row(s);
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Invalid(format!(
                        "negative transition probability at state {s}, action {a}"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::Invalid(format!(
                        "transition row (s={s}, a={a}) sums to {sum}, expected 1"
                    )));
                }
                if !self.reward[(s, a)].is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite reward at state {s}, action {a}"
                    )));
                }
            }
        }
        for s in 0..self.n_states {
            if self.terminal[s] {
                for a in 0..self.n_actions {
                    if (self.transition[a][(s, s)] - 1.0).abs() > PROB_TOL {
                        return Err(Error::Invalid(format!(
                            "terminal state {s} must self-loop under action {a}"
                        )));
                    }
                    if self.reward[(s, a)] != 0.0 {
                        return Err(Error::Invalid(format!(
                            "terminal state {s} must have zero reward under action {a}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.reward.clone(),
            gamma,
            self.terminal.clone(),
        )
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[a][(s, next)]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[(s, a)]
    }

    /// Default state-major pair indexer for this MDP.
    pub fn indexer(&self) -> PairIndexer {
        PairIndexer::state_major(self.n_states, self.n_actions)
    }

    /// Expected-reward vector over pairs in `idx` order.
    pub fn reward_vector(&self, idx: &PairIndexer) -> DVector<f64> {
        DVector::from_iterator(idx.len(), idx.pairs().map(|(s, a)| self.reward[(s, a)]))
    }

    /// Load an MDP from its structured text format:
    ///
    /// ```toml
    /// n_states = 2
    /// n_actions = 2
    /// gamma = 0.9
    /// terminal = []                      # optional
    /// transitions = [[0, 0, 1, 1.0]]     # s, a, s', probability
    /// rewards = [[0, 0, 1.0]]            # s, a, reward (unlisted pairs are 0)
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct MdpFile {
            n_states: usize,
            n_actions: usize,
            gamma: f64,
            #[serde(default)]
            terminal: Vec<usize>,
            transitions: Vec<(usize, usize, usize, f64)>,
            #[serde(default)]
            rewards: Vec<(usize, usize, f64)>,
        }
        let file: MdpFile = toml::from_str(text)?;
        let mut transition = vec![DMatrix::zeros(file.n_states, file.n_states); file.n_actions];
        for &(s, a, next, p) in &file.transitions {
            if s >= file.n_states || next >= file.n_states || a >= file.n_actions {
                return Err(Error::Invalid(format!(
                    "transition ({s}, {a}, {next}) out of range"
                )));
            }
            transition[a][(s, next)] += p;
        }
        let mut reward = DMatrix::zeros(file.n_states, file.n_actions);
        for &(s, a, r) in &file.rewards {
            if s >= file.n_states || a >= file.n_actions {
                return Err(Error::Invalid(format!(
                    "reward entry ({s}, {a}) out of range"
                )));
            }
            reward[(s, a)] = r;
        }
        let mut terminal = vec![false; file.n_states];
        for &s in &file.terminal {
            if s >= file.n_states {
                return Err(Error::Invalid(format!("terminal state {s} out of range")));
            }
            terminal[s] = true;
        }
        Self::new(transition, reward, file.gamma, terminal)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Invalid(format!(
                    "negative probability in policy row {s}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::Invalid(format!(
                    "policy row {s} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Uniform policy over `n_actions`.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            probs[(s, a)] = 1.0;
        }
        Self { probs }
    }

    /// Same action distribution in every state.
    pub fn homogeneous(n_states: usize, action_probs: &[f64]) -> Result<Self> {
        let row = DMatrix::from_row_slice(1, action_probs.len(), action_probs);
        let mut probs = DMatrix::zeros(n_states, action_probs.len());
        for s in 0..n_states {
            probs.set_row(s, &row.row(0));
        }
        Self::new(probs)
    }

    /// Greedy policy of a Q-table; argmax ties break toward the lowest index.
    pub fn greedy(q: &QTable) -> Self {
        let actions: Vec<usize> = (0..q.n_states()).map(|s| q.argmax(s)).collect();
        Self::deterministic(q.n_actions(), &actions)
    }

    /// Epsilon-greedy policy of a Q-table.
    pub fn epsilon_greedy(q: &QTable, epsilon: f64) -> Self {
        let n_actions = q.n_actions();
        let mut probs = DMatrix::from_element(q.n_states(), n_actions, epsilon / n_actions as f64);
        for s in 0..q.n_states() {
            probs[(s, q.argmax(s))] += 1.0 - epsilon;
        }
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[(state, action)]
    }

    pub fn matches(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states() != mdp.n_states() || self.n_actions() != mdp.n_actions() {
            return Err(Error::Shape(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states(),
                self.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    pub fn sample(&self, state: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for a in 0..self.n_actions() {
            acc += self.probs[(state, a)];
            if u < acc {
                return a;
            }
        }
        self.n_actions() - 1
    }
}

/// Action-value table `Q[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: DMatrix<f64>,
}

impl QTable {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite action value".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            values: DMatrix::zeros(n_states, n_actions),
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[(state, action)]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[(state, action)] = value;
    }

    pub fn add(&mut self, state: usize, action: usize, delta: f64) {
        self.values[(state, action)] += delta;
    }

    /// `E_pi[Q(state, .)]`.
    pub fn expected_under(&self, policy: &Policy, state: usize) -> f64 {
        (0..self.n_actions())
            .map(|a| policy.prob(state, a) * self.values[(state, a)])
            .sum()
    }

    pub fn argmax(&self, state: usize) -> usize {
        let mut best = 0;
        for a in 1..self.n_actions() {
            if self.values[(state, a)] > self.values[(state, best)] {
                best = a;
            }
        }
        best
    }

    /// Flatten to a pair vector in `idx` order.
    pub fn to_vector(&self, idx: &PairIndexer) -> DVector<f64> {
        DVector::from_iterator(idx.len(), idx.pairs().map(|(s, a)| self.values[(s, a)]))
    }

    /// Rebuild from a pair vector in `idx` order.
    pub fn from_vector(v: &DVector<f64>, idx: &PairIndexer) -> Self {
        let mut values = DMatrix::zeros(idx.n_states, idx.n_actions);
        for (i, (s, a)) in idx.pairs().enumerate() {
            values[(s, a)] = v[i];
        }
        Self { values }
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        (&self.values - &other.values).amax()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }
}

/// One trajectory step: `(S_t, A_t, R_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// Finite trajectory sampled under a behavior policy.
///
/// `final_state` is the state after the last step. If the trajectory was cut
/// at the horizon rather than terminating, `final_action` carries one more
/// sampled action so pair-bootstrapped returns are well defined at the cut.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: usize,
    pub final_action: Option<usize>,
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at time `t` for `t <= len`.
    pub fn state_at(&self, t: usize) -> usize {
        if t < self.steps.len() {
            self.steps[t].state
        } else {
            self.final_state
        }
    }
}

/// Initial-state distribution used when sampling episodes.
#[derive(Debug, Clone)]
pub enum StartState {
    Fixed(usize),
    Uniform,
    Weights(Vec<f64>),
}

impl StartState {
    pub fn sample(&self, n_states: usize, rng: &mut Rng) -> usize {
        match self {
            StartState::Fixed(s) => *s,
            StartState::Uniform => rng.gen_range(0..n_states),
            StartState::Weights(w) => {
                let total: f64 = w.iter().sum();
                let mut u: f64 = rng.gen::<f64>() * total;
                for (s, &p) in w.iter().enumerate() {
                    u -= p;
                    if u < 0.0 {
                        return s;
                    }
                }
                w.len() - 1
            }
        }
    }
}

/// State transition matrix under a policy: `P^pi[s][s'] = sum_a pi(a|s) P[s][a][s']`.
pub fn build_state_transition(mdp: &TabularMdp, policy: &Policy) -> Result<DMatrix<f64>> {
    policy.matches(mdp)?;
    let n = mdp.n_states();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let p_a = policy.prob(s, a);
            if p_a == 0.0 {
                continue;
            }
            for next in 0..n {
                m[(s, next)] += p_a * mdp.transition_prob(s, a, next);
            }
        }
    }
    Ok(m)
}

/// Pair transition matrix: entry `((s,a),(s',a')) = P[s][a][s'] pi(a'|s')`.
pub fn build_sa_transition(
    mdp: &TabularMdp,
    policy: &Policy,
    idx: &PairIndexer,
) -> Result<DMatrix<f64>> {
    policy.matches(mdp)?;
    if idx.n_states != mdp.n_states() || idx.n_actions != mdp.n_actions() {
        return Err(Error::Shape("pair indexer does not match MDP".into()));
    }
    let n = idx.len();
    let mut m = DMatrix::zeros(n, n);
    for (i, (s, a)) in idx.pairs().enumerate() {
        for (j, (next, next_a)) in idx.pairs().enumerate() {
            m[(i, j)] = mdp.transition_prob(s, a, next) * policy.prob(next, next_a);
        }
    }
    Ok(m)
}

/// Exact `q^pi`: unique fixed point of the Bellman operator, by dense solve
/// of `(I - gamma P^pi) q = r` over pairs. Terminal pairs are pinned to zero,
/// which also covers episodic MDPs with `gamma = 1`.
pub fn exact_q(mdp: &TabularMdp, policy: &Policy) -> Result<QTable> {
    policy.matches(mdp)?;
    let idx = mdp.indexer();
    let p = build_sa_transition(mdp, policy, &idx)?;
    let mut system = DMatrix::identity(idx.len(), idx.len()) - p * mdp.gamma();
    let mut rhs = mdp.reward_vector(&idx);
    for (i, (s, _)) in idx.pairs().enumerate() {
        if mdp.is_terminal(s) {
            system.row_mut(i).fill(0.0);
            system[(i, i)] = 1.0;
            rhs[i] = 0.0;
        }
    }
    let q = linalg::solve(&system, &rhs)?;
    Ok(QTable::from_vector(&q, &idx))
}

/// One application of the Bellman operator: `r + gamma P^pi q`.
pub fn bellman_apply(mdp: &TabularMdp, policy: &Policy, q: &QTable) -> Result<QTable> {
    policy.matches(mdp)?;
    if q.n_states() != mdp.n_states() || q.n_actions() != mdp.n_actions() {
        return Err(Error::Shape("Q-table does not match MDP".into()));
    }
    let idx = mdp.indexer();
    let p = build_sa_transition(mdp, policy, &idx)?;
    let out = mdp.reward_vector(&idx) + p * q.to_vector(&idx) * mdp.gamma();
    Ok(QTable::from_vector(&out, &idx))
}

/// Stationary distribution of the pair chain under `policy`.
///
/// Solved by damped power iteration (`z <- z (I + P)/2`, which has the same
/// fixed vectors and converges for periodic chains too). Returns an
/// ergodicity error when the residual does not fall below tolerance within
/// the iteration budget. Reducible chains converge to some stationary vector
/// of `P`; ergodicity is the caller's assertion.
pub fn stationary_distribution(
    mdp: &TabularMdp,
    policy: &Policy,
    idx: &PairIndexer,
) -> Result<DVector<f64>> {
    let p = build_sa_transition(mdp, policy, idx)?;
    let n = idx.len();
    let mut z = DVector::from_element(n, 1.0 / n as f64);
    let budget = 200_000;
    for _ in 0..budget {
        let next = (z.transpose() * &p).transpose();
        let damped = (&z + &next) * 0.5;
        let residual = (&damped - &z).amax();
        z = damped;
        let total: f64 = z.iter().sum();
        z /= total;
        if residual < 1e-14 {
            let fixed_residual = ((z.transpose() * &p).transpose() - &z).amax();
            if fixed_residual < 1e-11 {
                return Ok(z);
            }
        }
    }
    Err(Error::Ergodicity(budget))
}

/// Stop rule for trajectory sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Stop at a terminal state or after `max_horizon` steps.
    TerminalOrCap,
    /// Run exactly `max_horizon` steps (terminal states self-loop).
    Cap,
}

/// Sample a trajectory from `start` under `policy`.
///
/// Every sampled action has positive probability under the policy. When the
/// trajectory is cut at the horizon without terminating, one extra action is
/// sampled at the final state so pair-bootstrapped returns stay defined.
pub fn sample_trajectory(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    rng: &mut Rng,
    max_horizon: usize,
    stop: StopRule,
) -> Trajectory {
    debug_assert!(max_horizon >= 1);
    let mut steps = Vec::new();
    let mut state = start;
    for _ in 0..max_horizon {
        if stop == StopRule::TerminalOrCap && mdp.is_terminal(state) {
            break;
        }
        let action = policy.sample(state, rng);
        let reward = mdp.reward(state, action);
        let next = sample_next_state(mdp, state, action, rng);
        steps.push(Step {
            state,
            action,
            reward,
        });
        state = next;
    }
    let terminated = mdp.is_terminal(state);
    let final_action = if terminated {
        None
    } else {
        Some(policy.sample(state, rng))
    };
    Trajectory {
        steps,
        final_state: state,
        final_action,
        terminated,
    }
}

fn sample_next_state(mdp: &TabularMdp, state: usize, action: usize, rng: &mut Rng) -> usize {
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

/// Importance-sampling ratio `pi(a|s) / mu(a|s)`.
///
/// Requires coverage: `mu(a|s) > 0` wherever `pi(a|s) > 0`. When the target
/// never takes the action the ratio is zero regardless of `mu`.
pub fn importance_ratio(pi: &Policy, mu: &Policy, state: usize, action: usize) -> Result<f64> {
    let p = pi.prob(state, action);
    let m = mu.prob(state, action);
    if p > 0.0 && m <= 0.0 {
        return Err(Error::Coverage {
            state,
            action,
            pi: p,
            mu: m,
        });
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(p / m)
}

/// Cumulated ratio `rho_{t:k} = prod_{i=t..=k} rho_i` along a trajectory;
/// the empty range (`k < t`) is 1 by convention.
pub fn cumulative_ratio(
    pi: &Policy,
    mu: &Policy,
    trajectory: &Trajectory,
    t: usize,
    k: usize,
) -> Result<f64> {
    let mut out = 1.0;
    if k < t {
        return Ok(out);
    }
    for i in t..=k {
        let step = &trajectory.steps[i];
        out *= importance_ratio(pi, mu, step.state, step.action)?;
    }
    Ok(out)
}
