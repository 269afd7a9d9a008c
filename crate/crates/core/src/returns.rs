//! Lambda-return variants, the lambda operator, and the variance recursion.
//!
//! All returns are computed per start index by backward recursion over a
//! finite trajectory. Conventions, applied uniformly:
//!
//! * Terminal states bootstrap with value 0.
//! * A trajectory cut at the horizon without terminating bootstraps with the
//!   value table at the cut: pair-bootstrapped variants (Sarsa, plain
//!   Expected Sarsa) use `Q(S_h, A_h)` via the trajectory's extra sampled
//!   action, while the control-variate return reduces algebraically to the
//!   expected value `E_pi[Q(S_h, .)]` at the cut, so it needs no extra
//!   action.
//!
//! The variance recursion computes the exact conditional variance of the
//! return by the law of total variance, expanded so its components line up
//! with the four-term decomposition: a next-state spread term, a lambda
//! mixing gap, the zero-mean per-action deviation, and the propagated future
//! term. The brute-force enumerator is the independent oracle for both the
//! variance and the unbiasedness of the mean. The decomposition conditions
//! on the current pair and marginalizes over the next pair; the variant that
//! instead fixes the next pair is exposed separately
//! ([`variance_given_next`]) and the enumeration oracle agrees with the
//! marginal form, not the fixed-pair one.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{
    build_sa_transition, exact_q, importance_ratio, PairIndexer, Policy, QTable, Step, TabularMdp,
    Trajectory,
};

/// Trace and discount parameters for return computations.
#[derive(Debug, Clone, Copy)]
pub struct ReturnConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl ReturnConfig {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Invalid(format!(
                "lambda must lie in [0,1], got {lambda}"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Invalid(format!(
                "gamma must lie in (0,1], got {gamma}"
            )));
        }
        Ok(Self { lambda, gamma })
    }
}

fn check_nonempty(trajectory: &Trajectory) -> Result<()> {
    if trajectory.is_empty() {
        return Err(Error::Invalid("trajectory is empty".into()));
    }
    Ok(())
}

/// Q at the cut pair; 0 at a terminal cut.
fn pair_bootstrap(trajectory: &Trajectory, q: &QTable) -> Result<f64> {
    if trajectory.terminated {
        return Ok(0.0);
    }
    let action = trajectory.final_action.ok_or_else(|| {
        Error::Invalid("cut trajectory needs a final action for pair-bootstrapped returns".into())
    })?;
    Ok(q.get(trajectory.final_state, action))
}

/// Expected Q at the cut state under `pi`; 0 at a terminal cut.
fn expected_bootstrap(trajectory: &Trajectory, q: &QTable, pi: &Policy) -> f64 {
    if trajectory.terminated {
        0.0
    } else {
        q.expected_under(pi, trajectory.final_state)
    }
}

/// On-policy Sarsa lambda-return, one value per start index.
pub fn sarsa_lambda_return_on(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
) -> Result<Vec<f64>> {
    check_nonempty(trajectory)?;
    let h = trajectory.len();
    let mut out = vec![0.0; h];
    let mut next = pair_bootstrap(trajectory, q)?;
    for t in (0..h).rev() {
        let step = &trajectory.steps[t];
        let q_next = if t + 1 < h {
            q.get(
                trajectory.steps[t + 1].state,
                trajectory.steps[t + 1].action,
            )
        } else {
            next
        };
        let g =
            step.reward + config.gamma * ((1.0 - config.lambda) * q_next + config.lambda * next);
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Off-policy Sarsa lambda-return with a per-step importance ratio applied
/// outside the whole target.
pub fn sarsa_lambda_return_off(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
) -> Result<Vec<f64>> {
    check_nonempty(trajectory)?;
    let h = trajectory.len();
    let mut out = vec![0.0; h];
    let mut next = pair_bootstrap(trajectory, q)?;
    for t in (0..h).rev() {
        let step = &trajectory.steps[t];
        let rho = importance_ratio(pi, mu, step.state, step.action)?;
        let q_next = if t + 1 < h {
            q.get(
                trajectory.steps[t + 1].state,
                trajectory.steps[t + 1].action,
            )
        } else {
            next
        };
        let g = rho
            * (step.reward
                + config.gamma * ((1.0 - config.lambda) * q_next + config.lambda * next));
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Pre-decision importance-sampled return (no bootstrapping).
pub fn pdis_return(
    trajectory: &Trajectory,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
) -> Result<Vec<f64>> {
    check_nonempty(trajectory)?;
    let h = trajectory.len();
    let mut out = vec![0.0; h];
    let mut next = 0.0;
    for t in (0..h).rev() {
        let step = &trajectory.steps[t];
        let rho = importance_ratio(pi, mu, step.state, step.action)?;
        let g = rho * (step.reward + config.gamma * next);
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Off-policy Expected Sarsa lambda-return: the ratio corrects only the
/// lambda continuation, the one-step part bootstraps on the expected value.
pub fn es_lambda_return_off(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
) -> Result<Vec<f64>> {
    check_nonempty(trajectory)?;
    let h = trajectory.len();
    let mut out = vec![0.0; h];
    // At the cut the continuation is the value of the extra sampled pair.
    let mut next = pair_bootstrap(trajectory, q)?;
    let mut next_pair = if trajectory.terminated {
        None
    } else {
        Some((trajectory.final_state, trajectory.final_action.unwrap()))
    };
    for t in (0..h).rev() {
        let step = &trajectory.steps[t];
        let (q_bar, rho_next_g) = match next_pair {
            Some((ns, na)) => {
                let rho_next = importance_ratio(pi, mu, ns, na)?;
                (q.expected_under(pi, ns), rho_next * next)
            }
            None => (0.0, 0.0),
        };
        let g = step.reward
            + config.gamma * ((1.0 - config.lambda) * q_bar + config.lambda * rho_next_g);
        out[t] = g;
        next = g;
        next_pair = Some((step.state, step.action));
    }
    Ok(out)
}

/// Control-variate Expected Sarsa lambda-return (recursive form).
///
/// The lambda branch carries the zero-mean correction
/// `E_pi[Q(S', .)] - rho' Q(S', A')` alongside the corrected continuation.
pub fn es_cv_return_recursive(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
) -> Result<Vec<f64>> {
    check_nonempty(trajectory)?;
    let h = trajectory.len();
    let mut out = vec![0.0; h];
    // At the cut the branch telescopes to the expected bootstrap exactly.
    let mut next: Option<f64> = None;
    for t in (0..h).rev() {
        let step = &trajectory.steps[t];
        let g = match next {
            None => step.reward + config.gamma * expected_bootstrap(trajectory, q, pi),
            Some(g_next) => {
                let next_step = &trajectory.steps[t + 1];
                let rho_next = importance_ratio(pi, mu, next_step.state, next_step.action)?;
                let q_bar = q.expected_under(pi, next_step.state);
                let q_next = q.get(next_step.state, next_step.action);
                step.reward
                    + config.gamma
                        * ((1.0 - config.lambda) * q_bar
                            + config.lambda * (rho_next * g_next + q_bar - rho_next * q_next))
            }
        };
        out[t] = g;
        next = Some(g);
    }
    Ok(out)
}

/// Control-variate Expected Sarsa lambda-return by forward accumulation of
/// discounted, ratio-weighted TD errors. Algebraically identical to the
/// recursive form; kept as the second route for the equivalence check.
pub fn es_cv_return_forward(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
) -> Result<Vec<f64>> {
    check_nonempty(trajectory)?;
    let h = trajectory.len();
    // Per-step expected-value TD errors and ratios.
    let mut deltas = Vec::with_capacity(h);
    let mut rhos = Vec::with_capacity(h);
    for t in 0..h {
        let step = &trajectory.steps[t];
        rhos.push(importance_ratio(pi, mu, step.state, step.action)?);
        let q_bar_next = if t + 1 < h {
            q.expected_under(pi, trajectory.steps[t + 1].state)
        } else {
            expected_bootstrap(trajectory, q, pi)
        };
        deltas.push(step.reward + config.gamma * q_bar_next - q.get(step.state, step.action));
    }
    let mut out = vec![0.0; h];
    #[allow(clippy::needless_range_loop)]
    for t in 0..h {
        let mut acc = q.get(trajectory.steps[t].state, trajectory.steps[t].action);
        let mut weight = 1.0;
        for l in t..h {
            if l > t {
                weight *= config.gamma * config.lambda * rhos[l];
                if weight == 0.0 {
                    break;
                }
            }
            acc += weight * deltas[l];
        }
        out[t] = acc;
    }
    Ok(out)
}

/// Off-line episode update: add `alpha (G_t - Q(S_t, A_t))` at every visited
/// pair, all increments computed from the pre-update table.
pub fn offline_episode_update(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
    alpha: f64,
    use_cv: bool,
) -> Result<QTable> {
    if alpha < 0.0 {
        return Err(Error::Invalid(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    let returns = if use_cv {
        es_cv_return_recursive(trajectory, q, config, pi, mu)?
    } else {
        es_lambda_return_off(trajectory, q, config, pi, mu)?
    };
    let mut updated = q.clone();
    for (t, step) in trajectory.steps.iter().enumerate() {
        let increment = alpha * (returns[t] - q.get(step.state, step.action));
        updated.add(step.state, step.action, increment);
    }
    Ok(updated)
}

/// The lambda operator `q + (I - lambda gamma P^pi)^{-1} (B^pi q - q)` over
/// state-action pairs. Terminal pairs are held at zero, the value they take
/// in every fixed point of interest.
pub fn apply_lambda_operator(
    mdp: &TabularMdp,
    pi: &Policy,
    q: &QTable,
    lambda: f64,
) -> Result<QTable> {
    let gamma = mdp.gamma();
    if lambda * gamma >= 1.0 {
        return Err(Error::Invalid(format!(
            "lambda * gamma must be < 1, got {}",
            lambda * gamma
        )));
    }
    let idx = mdp.indexer();
    let p = build_sa_transition(mdp, pi, &idx)?;
    let mut q_vec = q.to_vector(&idx);
    for (i, (s, _)) in idx.pairs().enumerate() {
        if mdp.is_terminal(s) {
            q_vec[i] = 0.0;
        }
    }
    let bellman = mdp.reward_vector(&idx) + &p * &q_vec * gamma;
    let resolvent = nalgebra::DMatrix::identity(idx.len(), idx.len()) - &p * (lambda * gamma);
    let correction = linalg::solve(&resolvent, &(bellman - &q_vec))?;
    Ok(QTable::from_vector(&(q_vec + correction), &idx))
}

/// Iterate the lambda operator from `q0` and report `||Q_k - q^pi||_inf` for
/// `k = 0..=k_iters`. Each error obeys the geometric envelope with factor
/// `(gamma - lambda gamma) / (1 - lambda gamma)`.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    pi: &Policy,
    q0: &QTable,
    lambda: f64,
    k_iters: usize,
) -> Result<Vec<f64>> {
    if k_iters == 0 {
        return Err(Error::Invalid("k_iters must be at least 1".into()));
    }
    let target = exact_q(mdp, pi)?;
    let mut errors = Vec::with_capacity(k_iters + 1);
    let mut q = q0.clone();
    errors.push(q.sup_distance(&target));
    for _ in 0..k_iters {
        q = apply_lambda_operator(mdp, pi, &q, lambda)?;
        errors.push(q.sup_distance(&target));
    }
    Ok(errors)
}

/// Contraction factor of the lambda operator.
pub fn contraction_factor(gamma: f64, lambda: f64) -> f64 {
    (gamma - lambda * gamma) / (1.0 - lambda * gamma)
}

/// Fixed point of the policy-mixed operator `(1-lambda) B^pi + lambda B^mu`,
/// by dense solve. Demonstrates the bias of naively mixing the two backups.
pub fn mixed_operator_fixed_point(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    lambda: f64,
) -> Result<QTable> {
    let idx = mdp.indexer();
    let p_pi = build_sa_transition(mdp, pi, &idx)?;
    let p_mu = build_sa_transition(mdp, mu, &idx)?;
    let p_mix = p_pi * (1.0 - lambda) + p_mu * lambda;
    let mut system = nalgebra::DMatrix::identity(idx.len(), idx.len()) - p_mix * mdp.gamma();
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

/// Variance decomposition for one `(t, state, action)` cell.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VarianceComponents {
    pub t: usize,
    pub state: usize,
    pub action: usize,
    /// Exact conditional variance of the return.
    pub total: f64,
    /// Spread of the one-step expected-value target over the next state.
    pub one_step_term: f64,
    /// Extra next-state spread from lambda-mixing the continuation mean in;
    /// zero when lambda is 0 or the table is exact, where the one-step term
    /// alone carries the next-state randomness.
    pub value_gap_term: f64,
    /// Zero-mean per-action deviation: the control-variate-corrected term
    /// for the CV return, the raw ratio-weighted value for the plain one.
    pub delta_term: f64,
    /// Ratio-weighted variance propagated from the next time step.
    pub future_term: f64,
    /// Exact conditional mean of the return.
    pub mean: f64,
}

impl VarianceComponents {
    pub fn component_sum(&self) -> f64 {
        self.one_step_term + self.value_gap_term + self.delta_term + self.future_term
    }
}

/// Exact variance report over all `(t, state, action)` with `t <= horizon`.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub horizon: usize,
    n_states: usize,
    n_actions: usize,
    rows: Vec<VarianceComponents>,
}

impl VarianceReport {
    pub fn rows(&self) -> &[VarianceComponents] {
        &self.rows
    }

    pub fn get(&self, t: usize, state: usize, action: usize) -> &VarianceComponents {
        &self.rows[t * self.n_states * self.n_actions + state * self.n_actions + action]
    }

    /// Serialize as CSV with columns `t,s,a,total,term1,term2,term3,term4`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "s", "a", "total", "term1", "term2", "term3", "term4"])?;
        for row in &self.rows {
            w.write_record(&[
                row.t.to_string(),
                row.state.to_string(),
                row.action.to_string(),
                row.total.to_string(),
                row.one_step_term.to_string(),
                row.value_gap_term.to_string(),
                row.delta_term.to_string(),
                row.future_term.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which return the variance analysis targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnKind {
    ControlVariate,
    PlainExpectedSarsa,
}

/// Exact conditional variance of the truncated return, by backward
/// recursion over model expectations (nothing is sampled).
///
/// At time `t` the return has `horizon + 1 - t` transitions left; the
/// continuation at the cut is the table value of the extra pair, whose
/// conditional variance is zero.
pub fn variance_recursive(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    q: &QTable,
    lambda: f64,
    horizon: usize,
    kind: ReturnKind,
) -> Result<VarianceReport> {
    pi.matches(mdp)?;
    mu.matches(mdp)?;
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let gamma = mdp.gamma();

    // Terminal values are zero by convention.
    let mut q_eff = q.clone();
    for s in 0..n_s {
        if mdp.is_terminal(s) {
            for a in 0..n_a {
                q_eff.set(s, a, 0.0);
            }
        }
    }
    let rho = ratio_table(pi, mu, n_s, n_a)?;
    let q_bar: Vec<f64> = (0..n_s).map(|s| q_eff.expected_under(pi, s)).collect();

    // mean[s][a] and var[s][a] at the current depth; depth 0 is the cut.
    let mut mean: Vec<Vec<f64>> = (0..n_s)
        .map(|s| (0..n_a).map(|a| q_eff.get(s, a)).collect())
        .collect();
    let mut var: Vec<Vec<f64>> = vec![vec![0.0; n_a]; n_s];

    let mut levels: Vec<Vec<VarianceComponents>> = Vec::with_capacity(horizon + 1);
    for depth in 1..=(horizon + 1) {
        let t = horizon + 1 - depth;
        // pi-weighted mean of the previous level, per state.
        let v_cont: Vec<f64> = (0..n_s)
            .map(|s| (0..n_a).map(|a| pi.prob(s, a) * mean[s][a]).sum())
            .collect();

        let mut next_mean = vec![vec![0.0; n_a]; n_s];
        let mut next_var = vec![vec![0.0; n_a]; n_s];
        let mut rows = Vec::with_capacity(n_s * n_a);
        for s in 0..n_s {
            for a in 0..n_a {
                let mut mean_target = 0.0;
                let mut ex_target_sq = 0.0;
                let mut ex_qbar = 0.0;
                let mut ex_qbar_sq = 0.0;
                let mut delta_sq = 0.0;
                let mut future = 0.0;
                for next in 0..n_s {
                    let p = mdp.transition_prob(s, a, next);
                    if p == 0.0 {
                        continue;
                    }
                    // Conditional mean of the return given the next state.
                    let target =
                        gamma * q_bar[next] + gamma * lambda * (v_cont[next] - q_bar[next]);
                    mean_target += p * target;
                    ex_target_sq += p * target * target;
                    ex_qbar += p * gamma * q_bar[next];
                    ex_qbar_sq += p * gamma * gamma * q_bar[next] * q_bar[next];
                    for next_a in 0..n_a {
                        let pa = mu.prob(next, next_a);
                        if pa == 0.0 {
                            continue;
                        }
                        let r = rho[next][next_a];
                        let dev = match kind {
                            ReturnKind::ControlVariate => {
                                q_bar[next] - r * q_eff.get(next, next_a) - v_cont[next]
                                    + r * mean[next][next_a]
                            }
                            ReturnKind::PlainExpectedSarsa => r * mean[next][next_a] - v_cont[next],
                        };
                        delta_sq += p * pa * dev * dev;
                        future += p * pa * r * r * var[next][next_a];
                    }
                }
                let one_step = (ex_qbar_sq - ex_qbar * ex_qbar).max(0.0);
                let target_var = ex_target_sq - mean_target * mean_target;
                let value_gap = target_var - one_step;
                let gl2 = (gamma * lambda) * (gamma * lambda);
                let delta = gl2 * delta_sq;
                let fut = gl2 * future;
                let total = target_var + delta + fut;
                let m = mdp.reward(s, a) + mean_target;
                next_mean[s][a] = m;
                next_var[s][a] = total;
                rows.push(VarianceComponents {
                    t,
                    state: s,
                    action: a,
                    total,
                    one_step_term: one_step,
                    value_gap_term: value_gap,
                    delta_term: delta,
                    future_term: fut,
                    mean: m,
                });
            }
        }
        mean = next_mean;
        var = next_var;
        levels.push(rows);
    }
    levels.reverse();
    Ok(VarianceReport {
        horizon,
        n_states: n_s,
        n_actions: n_a,
        rows: levels.into_iter().flatten().collect(),
    })
}

/// Variance of the return at time `t` when the next pair is held fixed
/// instead of marginalized: only the future randomness remains,
/// `(gamma lambda rho')^2 Var[G_{t+1} | s', a']`. Exposed for comparison;
/// the enumeration oracle matches the marginal recursion.
#[allow(clippy::too_many_arguments)]
pub fn variance_given_next(
    report: &VarianceReport,
    pi: &Policy,
    mu: &Policy,
    lambda: f64,
    gamma: f64,
    t: usize,
    next_state: usize,
    next_action: usize,
) -> Result<f64> {
    let rho = importance_ratio(pi, mu, next_state, next_action)?;
    let future_var = if t < report.horizon {
        report.get(t + 1, next_state, next_action).total
    } else {
        0.0
    };
    Ok((gamma * lambda * rho).powi(2) * future_var)
}

fn ratio_table(pi: &Policy, mu: &Policy, n_s: usize, n_a: usize) -> Result<Vec<Vec<f64>>> {
    let mut rho = vec![vec![0.0; n_a]; n_s];
    for (s, row) in rho.iter_mut().enumerate() {
        for (a, cell) in row.iter_mut().enumerate() {
            *cell = importance_ratio(pi, mu, s, a)?;
        }
    }
    Ok(rho)
}

/// Exact mean and variance per `(t, state, action)` from full enumeration.
#[derive(Debug, Clone)]
pub struct EnumeratedVariance {
    pub horizon: usize,
    n_states: usize,
    n_actions: usize,
    /// (variance, mean) in the row order of [`VarianceReport`].
    rows: Vec<(f64, f64)>,
}

impl EnumeratedVariance {
    pub fn variance(&self, t: usize, state: usize, action: usize) -> f64 {
        self.rows[t * self.n_states * self.n_actions + state * self.n_actions + action].0
    }

    pub fn mean(&self, t: usize, state: usize, action: usize) -> f64 {
        self.rows[t * self.n_states * self.n_actions + state * self.n_actions + action].1
    }
}

const ENUMERATION_BUDGET: usize = 1_000_000;

/// Brute-force oracle: enumerate every behavior-policy trajectory of the
/// required depth with its probability, evaluate the return with the same
/// routine used on sampled data, and take exact first and second moments.
pub fn variance_bruteforce(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    q: &QTable,
    lambda: f64,
    horizon: usize,
    kind: ReturnKind,
) -> Result<EnumeratedVariance> {
    pi.matches(mdp)?;
    mu.matches(mdp)?;
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let n_pairs = n_s * n_a;
    let paths_bound = n_pairs
        .checked_pow((horizon + 1) as u32)
        .and_then(|v| v.checked_mul(n_a))
        .unwrap_or(usize::MAX);
    if paths_bound > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            requested: paths_bound,
            limit: ENUMERATION_BUDGET,
        });
    }

    let config = ReturnConfig::new(lambda, mdp.gamma())?;
    let mut rows = Vec::with_capacity((horizon + 1) * n_pairs);
    for t in 0..=horizon {
        let depth = horizon + 1 - t;
        for s in 0..n_s {
            for a in 0..n_a {
                let mut acc = Moments::default();
                let mut steps = vec![Step {
                    state: s,
                    action: a,
                    reward: mdp.reward(s, a),
                }];
                enumerate(
                    mdp, pi, mu, q, &config, kind, depth, 1.0, &mut steps, &mut acc,
                )?;
                rows.push((acc.variance(), acc.mean()));
            }
        }
    }
    Ok(EnumeratedVariance {
        horizon,
        n_states: n_s,
        n_actions: n_a,
        rows,
    })
}

#[derive(Default)]
struct Moments {
    prob: f64,
    first: f64,
    second: f64,
}

impl Moments {
    fn add(&mut self, p: f64, value: f64) {
        self.prob += p;
        self.first += p * value;
        self.second += p * value * value;
    }

    fn mean(&self) -> f64 {
        self.first / self.prob
    }

    fn variance(&self) -> f64 {
        let m = self.mean();
        (self.second / self.prob - m * m).max(0.0)
    }
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    q: &QTable,
    config: &ReturnConfig,
    kind: ReturnKind,
    remaining: usize,
    prob: f64,
    steps: &mut Vec<Step>,
    acc: &mut Moments,
) -> Result<()> {
    let (state, action) = {
        let last = steps.last().unwrap();
        (last.state, last.action)
    };
    for next in 0..mdp.n_states() {
        let p_next = mdp.transition_prob(state, action, next);
        if p_next == 0.0 {
            continue;
        }
        if mdp.is_terminal(next) {
            let trajectory = Trajectory {
                steps: steps.clone(),
                final_state: next,
                final_action: None,
                terminated: true,
            };
            acc.add(
                prob * p_next,
                evaluate_return(&trajectory, q, config, pi, mu, kind)?,
            );
            continue;
        }
        if remaining == 1 {
            // Cut: branch over the extra action so pair bootstraps are exact.
            for next_a in 0..mdp.n_actions() {
                let p_a = mu.prob(next, next_a);
                if p_a == 0.0 {
                    continue;
                }
                let trajectory = Trajectory {
                    steps: steps.clone(),
                    final_state: next,
                    final_action: Some(next_a),
                    terminated: false,
                };
                acc.add(
                    prob * p_next * p_a,
                    evaluate_return(&trajectory, q, config, pi, mu, kind)?,
                );
            }
            continue;
        }
        for next_a in 0..mdp.n_actions() {
            let p_a = mu.prob(next, next_a);
            if p_a == 0.0 {
                continue;
            }
            steps.push(Step {
                state: next,
                action: next_a,
                reward: mdp.reward(next, next_a),
            });
            enumerate(
                mdp,
                pi,
                mu,
                q,
                config,
                kind,
                remaining - 1,
                prob * p_next * p_a,
                steps,
                acc,
            )?;
            steps.pop();
        }
    }
    Ok(())
}

fn evaluate_return(
    trajectory: &Trajectory,
    q: &QTable,
    config: &ReturnConfig,
    pi: &Policy,
    mu: &Policy,
    kind: ReturnKind,
) -> Result<f64> {
    let values = match kind {
        ReturnKind::ControlVariate => es_cv_return_recursive(trajectory, q, config, pi, mu)?,
        ReturnKind::PlainExpectedSarsa => es_lambda_return_off(trajectory, q, config, pi, mu)?,
    };
    Ok(values[0])
}

/// Exact expectation of the truncated return over all trajectories, per
/// pair: the mean column of the recursion, exposed for unbiasedness checks.
pub fn exact_return_mean(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    q: &QTable,
    lambda: f64,
    horizon: usize,
    kind: ReturnKind,
) -> Result<QTable> {
    let report = variance_recursive(mdp, pi, mu, q, lambda, horizon, kind)?;
    let idx = PairIndexer::state_major(mdp.n_states(), mdp.n_actions());
    let means = DVector::from_iterator(
        idx.len(),
        idx.pairs().map(|(s, a)| report.get(0, s, a).mean),
    );
    Ok(QTable::from_vector(&means, &idx))
}
