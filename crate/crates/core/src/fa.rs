//! Linear function approximation.
//!
//! Feature maps over state-action pairs, the exact model triple (A, b, M)
//! with its stationary weighting, the projected and quadratic forms of the
//! mean squared projected Bellman error, eligibility traces with their
//! single-sample model estimators, and tile coding for continuous states.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{
    build_sa_transition, importance_ratio, stationary_distribution, PairIndexer, Policy, QTable,
    TabularMdp,
};
use crate::returns::apply_lambda_operator;

/// Dense feature map `phi : S x A -> R^p`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    /// Row per pair, stored state-major internally.
    rows: Vec<DVector<f64>>,
}

impl FeatureMap {
    /// Build from explicit per-pair vectors; every pair must be present.
    pub fn from_rows(
        n_states: usize,
        n_actions: usize,
        dim: usize,
        entries: &[(usize, usize, Vec<f64>)],
    ) -> Result<Self> {
        let mut rows = vec![None; n_states * n_actions];
        for (s, a, phi) in entries {
            if *s >= n_states || *a >= n_actions {
                return Err(Error::Invalid(format!(
                    "feature entry ({s}, {a}) out of range"
                )));
            }
            if phi.len() != dim {
                return Err(Error::Shape(format!(
                    "feature vector for ({s}, {a}) has length {}, expected {dim}",
                    phi.len()
                )));
            }
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite feature at ({s}, {a})")));
            }
            rows[s * n_actions + a] = Some(DVector::from_vec(phi.clone()));
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or_else(|| {
                    Error::Invalid(format!(
                        "missing feature vector for pair ({}, {})",
                        i / n_actions,
                        i % n_actions
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_states,
            n_actions,
            dim,
            rows,
        })
    }

    /// One-hot tabular features (dimension |S||A|).
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let rows = (0..dim)
            .map(|i| {
                let mut v = DVector::zeros(dim);
                v[i] = 1.0;
                v
            })
            .collect();
        Self {
            n_states,
            n_actions,
            dim,
            rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn phi(&self, state: usize, action: usize) -> &DVector<f64> {
        &self.rows[state * self.n_actions + action]
    }

    /// Row-stacked feature matrix in `idx` order.
    pub fn matrix(&self, idx: &PairIndexer) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(idx.len(), self.dim);
        for (i, (s, a)) in idx.pairs().enumerate() {
            m.row_mut(i).copy_from(&self.phi(s, a).transpose());
        }
        m
    }

    /// `E_pi[phi(state, .)]`: the policy-weighted feature of a state.
    pub fn expected_phi(&self, policy: &Policy, state: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for a in 0..self.n_actions {
            let p = policy.prob(state, a);
            if p != 0.0 {
                out += self.phi(state, a) * p;
            }
        }
        out
    }

    /// `Q_theta(s, a) = phi(s, a)^T theta` as a table.
    pub fn q_table(&self, theta: &DVector<f64>) -> QTable {
        let mut values = DMatrix::zeros(self.n_states, self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                values[(s, a)] = self.phi(s, a).dot(theta);
            }
        }
        QTable::new(values).expect("finite by construction")
    }

    /// Load from the structured text format:
    ///
    /// ```toml
    /// n_states = 7
    /// n_actions = 2
    /// dim = 16
    /// [[features]]
    /// state = 0
    /// action = 0
    /// phi = [2.0, 0.0]
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            state: usize,
            action: usize,
            phi: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct FeatureFile {
            n_states: usize,
            n_actions: usize,
            dim: usize,
            features: Vec<Entry>,
        }
        let file: FeatureFile = toml::from_str(text)?;
        let entries: Vec<(usize, usize, Vec<f64>)> = file
            .features
            .into_iter()
            .map(|e| (e.state, e.action, e.phi))
            .collect();
        Self::from_rows(file.n_states, file.n_actions, file.dim, &entries)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Which transition matrix discounts the trace term `(I - lambda gamma P)^{-1}`.
///
/// The importance-sampling-corrected trace yields the target-policy chain;
/// the behavior variant is exposed for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceChain {
    #[default]
    TargetPolicy,
    BehaviorPolicy,
}

/// Options for [`compute_model`].
#[derive(Debug, Clone, Default)]
pub struct ModelOptions {
    /// Explicit per-pair stationary weights (in indexer order) instead of
    /// the normalized stationary distribution under the behavior policy.
    pub weight_override: Option<DVector<f64>>,
    pub trace_chain: TraceChain,
}

impl ModelOptions {
    pub fn with_uniform_weight(n_pairs: usize, weight: f64) -> Self {
        Self {
            weight_override: Some(DVector::from_element(n_pairs, weight)),
            trace_chain: TraceChain::TargetPolicy,
        }
    }
}

/// Exact linear model: the expected-update pair (A, b), the feature second
/// moment M, the stationary weights and the feature matrix.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub m: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub phi_matrix: DMatrix<f64>,
    m_inv: DMatrix<f64>,
    m_rank_deficient: bool,
}

impl LinearModel {
    pub fn from_parts(
        a: DMatrix<f64>,
        b: DVector<f64>,
        m: DMatrix<f64>,
        xi: DVector<f64>,
        phi_matrix: DMatrix<f64>,
    ) -> Self {
        let (m_inv, m_rank_deficient) = linalg::symmetric_pinv(&m);
        Self {
            a,
            b,
            m,
            xi,
            phi_matrix,
            m_inv,
            m_rank_deficient,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Inverse of M, or its pseudo-inverse when M is rank deficient.
    pub fn m_inverse(&self) -> &DMatrix<f64> {
        &self.m_inv
    }

    /// True when M was inverted through a pseudo-inverse (features do not
    /// span, e.g. more features than visited pairs).
    pub fn m_rank_deficient(&self) -> bool {
        self.m_rank_deficient
    }
}

/// Exact (A, b, M) for a tabular domain:
///
/// `A = Phi^T Xi (I - lambda gamma P)^{-1} (gamma P^pi - I) Phi`
/// `b = Phi^T Xi (I - lambda gamma P)^{-1} r`
/// `M = Phi^T Xi Phi`
///
/// with `P` the target-policy pair chain by default and `Xi` the normalized
/// stationary distribution under the behavior policy unless overridden.
pub fn compute_model(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    features: &FeatureMap,
    lambda: f64,
    idx: &PairIndexer,
    options: &ModelOptions,
) -> Result<LinearModel> {
    if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
        return Err(Error::Shape("feature map does not match MDP".into()));
    }
    let gamma = mdp.gamma();
    if lambda * gamma >= 1.0 {
        return Err(Error::Invalid(format!(
            "lambda * gamma must be < 1, got {}",
            lambda * gamma
        )));
    }
    let p_pi = build_sa_transition(mdp, pi, idx)?;
    let trace_p = match options.trace_chain {
        TraceChain::TargetPolicy => p_pi.clone(),
        TraceChain::BehaviorPolicy => build_sa_transition(mdp, mu, idx)?,
    };
    let xi = match &options.weight_override {
        Some(w) => {
            if w.len() != idx.len() {
                return Err(Error::Shape("weight override has wrong length".into()));
            }
            w.clone()
        }
        None => stationary_distribution(mdp, mu, idx)?,
    };

    let n = idx.len();
    let phi = features.matrix(idx);
    let xi_diag = DMatrix::from_diagonal(&xi);
    let resolvent = DMatrix::identity(n, n) - trace_p * (lambda * gamma);
    // (I - lambda gamma P)^{-1} applied to both the Bellman part and r.
    let bellman_part = (&p_pi * gamma - DMatrix::identity(n, n)) * &phi;
    let solved_bellman = linalg::solve_matrix(&resolvent, &bellman_part)?;
    let r = mdp.reward_vector(idx);
    let solved_r = linalg::solve(&resolvent, &r)?;

    let phi_t_xi = phi.transpose() * &xi_diag;
    let a = &phi_t_xi * solved_bellman;
    let b = &phi_t_xi * solved_r;
    let m = &phi_t_xi * &phi;

    Ok(LinearModel::from_parts(a, b, m, xi, phi))
}

/// Quadratic MSPBE form: `0.5 ||A theta + b||^2_{M^{-1}}`.
///
/// Uses the model's pseudo-inverse when M is rank deficient; check
/// [`LinearModel::m_rank_deficient`] for the flag.
pub fn mspbe_quadratic(theta: &DVector<f64>, model: &LinearModel) -> f64 {
    let residual = &model.a * theta + &model.b;
    0.5 * linalg::quadratic_form(&residual, model.m_inverse())
}

/// Projected MSPBE form: `0.5 ||Phi theta - Proj B_lambda (Phi theta)||^2_Xi`
/// with the projection built explicitly. This is the independent route the
/// quadratic form is checked against.
#[allow(clippy::too_many_arguments)]
pub fn mspbe_projected(
    theta: &DVector<f64>,
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    features: &FeatureMap,
    lambda: f64,
    idx: &PairIndexer,
    options: &ModelOptions,
) -> Result<f64> {
    let model = compute_model(mdp, pi, mu, features, lambda, idx, options)?;
    let phi = &model.phi_matrix;
    let xi_diag = DMatrix::from_diagonal(&model.xi);
    // Proj = Phi (Phi^T Xi Phi)^+ Phi^T Xi.
    let proj = phi * model.m_inverse() * phi.transpose() * &xi_diag;

    let q_theta = QTable::from_vector(&(phi * theta), idx);
    let applied = apply_lambda_operator(mdp, pi, &q_theta, lambda)?;
    let diff = phi * theta - &proj * applied.to_vector(idx);
    Ok(0.5 * linalg::quadratic_form(&diff, &xi_diag))
}

/// The explicit projection matrix `Phi (Phi^T Xi Phi)^+ Phi^T Xi`.
pub fn projection_matrix(model: &LinearModel) -> DMatrix<f64> {
    let xi_diag = DMatrix::from_diagonal(&model.xi);
    &model.phi_matrix * model.m_inverse() * model.phi_matrix.transpose() * xi_diag
}

/// Accumulating eligibility trace `e_t = lambda gamma rho_t e_{t-1} + phi_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EligibilityTrace {
    e: DVector<f64>,
}

impl EligibilityTrace {
    pub fn zeros(dim: usize) -> Self {
        Self {
            e: DVector::zeros(dim),
        }
    }

    /// Reset to zero at an episode boundary.
    pub fn reset(&mut self) {
        self.e.fill(0.0);
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.e
    }

    /// Advance one step; the caller handles episode resets.
    pub fn advance(&mut self, rho_t: f64, phi_t: &DVector<f64>, lambda: f64, gamma: f64) {
        self.e = &self.e * (lambda * gamma * rho_t) + phi_t;
    }
}

/// Functional form of the trace update.
pub fn trace_step(
    trace: &EligibilityTrace,
    rho_t: f64,
    phi_t: &DVector<f64>,
    lambda: f64,
    gamma: f64,
) -> EligibilityTrace {
    let mut next = trace.clone();
    next.advance(rho_t, phi_t, lambda, gamma);
    next
}

/// One observed step, with the expected next feature computed exactly from
/// the target policy.
#[derive(Debug, Clone)]
pub struct StepData {
    pub phi_t: DVector<f64>,
    pub expected_next_phi: DVector<f64>,
    pub reward: f64,
    pub gamma: f64,
}

/// Single-sample estimates of the model triple.
#[derive(Debug, Clone)]
pub struct SampleEstimates {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub m_hat: DMatrix<f64>,
}

/// `A_hat = e_t (gamma E_pi[phi'] - phi_t)^T`, `b_hat = R e_t`,
/// `M_hat = phi_t phi_t^T`; the trace must already include `phi_t`.
pub fn sample_estimates(step: &StepData, trace: &EligibilityTrace) -> SampleEstimates {
    let e = trace.vector();
    let g = &step.expected_next_phi * step.gamma - &step.phi_t;
    SampleEstimates {
        a_hat: e * g.transpose(),
        b_hat: e * step.reward,
        m_hat: &step.phi_t * step.phi_t.transpose(),
    }
}

/// Importance ratio helper reused by learners; errors on coverage violation.
pub fn step_ratio(pi: &Policy, mu: &Policy, state: usize, action: usize) -> Result<f64> {
    importance_ratio(pi, mu, state, action)
}

/// Tile-coding configuration.
///
/// Tiling `i` is displaced by `i / n_tilings` of one cell width per
/// dimension; each tiling has `tiles_per_dim + 1` cells per dimension so the
/// displaced grid still covers the bounds. Cell coordinates are hashed into
/// `hash_size` buckets by modular multiplication with fixed odd constants.
#[derive(Debug, Clone)]
pub struct TileCodingConfig {
    pub n_tilings: usize,
    pub tiles_per_dim: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
    pub hash_size: usize,
}

impl TileCodingConfig {
    pub fn new(
        n_tilings: usize,
        tiles_per_dim: Vec<usize>,
        bounds: Vec<(f64, f64)>,
        hash_size: usize,
    ) -> Result<Self> {
        if n_tilings == 0 {
            return Err(Error::Invalid("need at least one tiling".into()));
        }
        if tiles_per_dim.len() != bounds.len() {
            return Err(Error::Shape("tiles_per_dim and bounds disagree".into()));
        }
        if bounds.iter().any(|(lo, hi)| lo >= hi) {
            return Err(Error::Invalid("each bound must satisfy low < high".into()));
        }
        if tiles_per_dim.contains(&0) || hash_size == 0 {
            return Err(Error::Invalid(
                "grid resolution and hash size must be positive".into(),
            ));
        }
        Ok(Self {
            n_tilings,
            tiles_per_dim,
            bounds,
            hash_size,
        })
    }
}

const HASH_MIX: [u64; 4] = [
    0x9e37_79b9_7f4a_7c15,
    0xbf58_476d_1ce4_e5b9,
    0x94d0_49bb_1331_11eb,
    0xd6e8_feb8_6659_fd93,
];

fn mix_index(parts: &[u64], hash_size: usize) -> usize {
    let mut h: u64 = 0x2545_f491_4f6c_dd1d;
    for (i, &p) in parts.iter().enumerate() {
        h ^= p.wrapping_mul(HASH_MIX[i % HASH_MIX.len()]);
        h = h
            .rotate_left(23)
            .wrapping_mul(HASH_MIX[(i + 1) % HASH_MIX.len()]);
    }
    (h % hash_size as u64) as usize
}

/// Active feature indices for a continuous input, one per tiling.
/// Inputs outside the bounds are clipped.
pub fn tile_code(x: &[f64], config: &TileCodingConfig) -> Vec<usize> {
    tile_code_tagged(x, None, config)
}

/// Pair-feature dimension of stacked tile coding.
pub fn sa_feature_dim(config: &TileCodingConfig, n_actions: usize) -> usize {
    config.hash_size * n_actions
}

/// Tile coding over (state, action): one block of `hash_size` features per
/// action, so the pair feature has dimension `n_actions * hash_size`.
/// Mixing the action into a single shared memory instead collides tiles
/// across actions badly enough to wreck control at small memories.
pub fn tile_code_sa(x: &[f64], action: usize, config: &TileCodingConfig) -> Vec<usize> {
    let mut active = tile_code_tagged(x, None, config);
    for index in &mut active {
        *index += action * config.hash_size;
    }
    active
}

fn tile_code_tagged(x: &[f64], _tag: Option<usize>, config: &TileCodingConfig) -> Vec<usize> {
    debug_assert_eq!(x.len(), config.bounds.len());
    let mut active = Vec::with_capacity(config.n_tilings);
    for tiling in 0..config.n_tilings {
        let shift = tiling as f64 / config.n_tilings as f64;
        let mut parts = Vec::with_capacity(x.len() + 1);
        parts.push(tiling as u64 + 1);
        for (d, &value) in x.iter().enumerate() {
            let (lo, hi) = config.bounds[d];
            let clipped = value.clamp(lo, hi);
            let width = (hi - lo) / config.tiles_per_dim[d] as f64;
            // Displacing the grid down by shift*width is binning x + shift*width.
            let cell = ((clipped - lo) / width + shift).floor() as i64;
            let cell = cell.clamp(0, config.tiles_per_dim[d] as i64) as u64;
            parts.push(cell);
        }
        active.push(mix_index(&parts, config.hash_size));
    }
    active
}

/// Sparse active indices as a dense feature vector (collisions add).
pub fn tiles_to_vector(active: &[usize], dim: usize) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    for &i in active {
        v[i] += 1.0;
    }
    v
}
