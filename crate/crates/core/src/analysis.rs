//! Closed-form and spectral diagnostics.
//!
//! The two-state expected-update matrix in closed form, the divergence
//! threshold in the discount, operator norms and definiteness tests, the
//! primal-dual gap of the saddle objective over a box together with the
//! averaging bound it is compared against, and the empirical MSPBE/MSE
//! metrics used by the experiment harness.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fa::LinearModel;
use crate::linalg;

/// Closed form of the two-state expected-update matrix under the per-pair
/// weight 1/2:
///
/// ```text
/// [ (6g - gl - 5) / (2 (1 - gl))        0    ]
/// [ (3g/2)(1 + gl)(1 - l) / (1 - gl)   -5/2  ]
/// ```
///
/// This is the exact product `Phi^T (I/2) (I - gl P)^{-1} (g P - I) Phi` of
/// the two-state factor matrices. The commonly quoted form has `3g/2` in the
/// lower-left entry, which the product only gives at `lambda = 0` (it drops
/// the resolvent's action on the left-action rows); the entry is irrelevant
/// to the divergence analysis, which rests on the diagonal alone.
pub fn two_state_a(gamma: f64, lambda: f64) -> DMatrix<f64> {
    assert!(gamma * lambda < 1.0, "gamma * lambda must be < 1");
    let gl = gamma * lambda;
    DMatrix::from_row_slice(
        2,
        2,
        &[
            (6.0 * gamma - gl - 5.0) / (2.0 * (1.0 - gl)),
            0.0,
            1.5 * gamma * (1.0 + gl) * (1.0 - lambda) / (1.0 - gl),
            -2.5,
        ],
    )
}

/// Discount threshold `5 / (6 - lambda)` above which the two-state matrix
/// has a positive first diagonal entry and the naive update diverges.
pub fn divergence_region(lambda: f64) -> f64 {
    assert!((0.0..1.0).contains(&lambda) || lambda == 1.0);
    5.0 / (6.0 - lambda)
}

/// Operator (spectral) norm: the largest singular value.
pub fn operator_norm(matrix: &DMatrix<f64>) -> f64 {
    linalg::spectral_norm(matrix)
}

/// Negative-definiteness of the symmetric part, with its largest eigenvalue.
pub fn is_negative_definite(matrix: &DMatrix<f64>) -> (bool, f64) {
    let max_eig = linalg::max_symmetric_eigenvalue(matrix);
    (max_eig < 0.0, max_eig)
}

/// Axis-aligned box for the primal and dual parameters.
#[derive(Debug, Clone, Serialize)]
pub struct BoxDomain {
    pub theta_low: Vec<f64>,
    pub theta_high: Vec<f64>,
    pub omega_low: Vec<f64>,
    pub omega_high: Vec<f64>,
}

impl BoxDomain {
    pub fn new(
        theta_low: Vec<f64>,
        theta_high: Vec<f64>,
        omega_low: Vec<f64>,
        omega_high: Vec<f64>,
    ) -> Result<Self> {
        if theta_low.len() != theta_high.len() || omega_low.len() != omega_high.len() {
            return Err(Error::Shape("box bounds have mismatched lengths".into()));
        }
        let ok = theta_low.iter().zip(&theta_high).all(|(l, h)| l <= h)
            && omega_low.iter().zip(&omega_high).all(|(l, h)| l <= h)
            && theta_low
                .iter()
                .chain(&theta_high)
                .chain(&omega_low)
                .chain(&omega_high)
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::Invalid(
                "box needs finite low <= high per coordinate".into(),
            ));
        }
        Ok(Self {
            theta_low,
            theta_high,
            omega_low,
            omega_high,
        })
    }

    /// Symmetric box `[-radius, radius]^p` for both parameter blocks.
    pub fn symmetric(dim: usize, radius: f64) -> Self {
        Self {
            theta_low: vec![-radius; dim],
            theta_high: vec![radius; dim],
            omega_low: vec![-radius; dim],
            omega_high: vec![radius; dim],
        }
    }

    /// Bounding box of observed iterates, inflated by `inflate` (0.5 adds
    /// 50% of the half-width plus a small floor on each side).
    pub fn from_iterates(
        thetas: &[DVector<f64>],
        omegas: &[DVector<f64>],
        inflate: f64,
    ) -> Result<Self> {
        fn bounds(points: &[DVector<f64>], inflate: f64) -> (Vec<f64>, Vec<f64>) {
            let dim = points[0].len();
            let mut low = vec![f64::INFINITY; dim];
            let mut high = vec![f64::NEG_INFINITY; dim];
            for p in points {
                for i in 0..dim {
                    low[i] = low[i].min(p[i]);
                    high[i] = high[i].max(p[i]);
                }
            }
            for i in 0..dim {
                let pad = inflate * 0.5 * (high[i] - low[i]) + 1e-6;
                low[i] -= pad;
                high[i] += pad;
            }
            (low, high)
        }
        if thetas.is_empty() || omegas.is_empty() {
            return Err(Error::Invalid(
                "need at least one iterate to build a box".into(),
            ));
        }
        let (tl, th) = bounds(thetas, inflate);
        let (ol, oh) = bounds(omegas, inflate);
        Self::new(tl, th, ol, oh)
    }

    pub fn contains(&self, theta: &DVector<f64>, omega: &DVector<f64>) -> bool {
        let inside = |v: &DVector<f64>, lo: &[f64], hi: &[f64]| {
            v.iter().enumerate().all(|(i, &x)| lo[i] <= x && x <= hi[i])
        };
        inside(theta, &self.theta_low, &self.theta_high)
            && inside(omega, &self.omega_low, &self.omega_high)
    }
}

/// Saddle objective `Psi(theta, omega) = (A theta + b)^T omega - 0.5 ||omega||^2_M`.
pub fn saddle_objective(theta: &DVector<f64>, omega: &DVector<f64>, model: &LinearModel) -> f64 {
    let residual = &model.a * theta + &model.b;
    residual.dot(omega) - 0.5 * linalg::quadratic_form(omega, &model.m)
}

/// Primal-dual gap at a candidate pair, with witnesses and box.
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub gap: f64,
    pub max_term: f64,
    pub min_term: f64,
    pub argmax_omega: Vec<f64>,
    pub argmin_theta: Vec<f64>,
    pub boxed: BoxDomain,
}

impl GapReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gap report serializes")
    }

    /// One CSV row `gap,max_term,min_term`.
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.gap, self.max_term, self.min_term)
    }
}

/// `max_{omega in box} Psi(theta_bar, omega) - min_{theta in box} Psi(theta, omega_bar)`.
///
/// The maximization is a concave quadratic: solved in closed form when the
/// unconstrained maximizer `M^{-1}(A theta + b)` is interior, by projected
/// cyclic coordinate ascent otherwise. The minimization is linear in theta,
/// attained coordinate-wise at a box corner.
pub fn primal_dual_gap(
    theta_bar: &DVector<f64>,
    omega_bar: &DVector<f64>,
    model: &LinearModel,
    boxed: &BoxDomain,
) -> Result<GapReport> {
    let p = model.dim();
    if theta_bar.len() != p || omega_bar.len() != p {
        return Err(Error::Shape(
            "parameter dimension does not match model".into(),
        ));
    }
    if boxed.theta_low.len() != p || boxed.omega_low.len() != p {
        return Err(Error::Shape("box dimension does not match model".into()));
    }

    let residual = &model.a * theta_bar + &model.b;
    let unconstrained = model.m_inverse() * &residual;
    let interior = unconstrained
        .iter()
        .enumerate()
        .all(|(i, &w)| boxed.omega_low[i] <= w && w <= boxed.omega_high[i]);
    let argmax = if interior {
        unconstrained
    } else {
        boxed_quadratic_max(&residual, &model.m, &boxed.omega_low, &boxed.omega_high)
    };
    let max_term = saddle_objective(theta_bar, &argmax, model);

    // Psi(theta, omega_bar) = theta^T (A^T omega_bar) + b^T omega_bar - 0.5||omega_bar||_M^2.
    let gradient = model.a.transpose() * omega_bar;
    let mut argmin = DVector::zeros(p);
    let mut linear = 0.0;
    for i in 0..p {
        let lo = boxed.theta_low[i] * gradient[i];
        let hi = boxed.theta_high[i] * gradient[i];
        if lo <= hi {
            argmin[i] = boxed.theta_low[i];
            linear += lo;
        } else {
            argmin[i] = boxed.theta_high[i];
            linear += hi;
        }
    }
    let min_term =
        linear + model.b.dot(omega_bar) - 0.5 * linalg::quadratic_form(omega_bar, &model.m);

    Ok(GapReport {
        gap: max_term - min_term,
        max_term,
        min_term,
        argmax_omega: argmax.iter().copied().collect(),
        argmin_theta: argmin.iter().copied().collect(),
        boxed: boxed.clone(),
    })
}

/// Projected cyclic coordinate ascent for `max r^T w - 0.5 w^T M w` over a box.
fn boxed_quadratic_max(
    r: &DVector<f64>,
    m: &DMatrix<f64>,
    low: &[f64],
    high: &[f64],
) -> DVector<f64> {
    let p = r.len();
    let mut w = DVector::from_fn(p, |i, _| 0.5 * (low[i] + high[i]));
    for _ in 0..10_000 {
        let mut moved: f64 = 0.0;
        for i in 0..p {
            let mii = m[(i, i)];
            let row_dot: f64 = (0..p).map(|j| m[(i, j)] * w[j]).sum();
            let grad = r[i] - row_dot;
            let new = if mii > 1e-14 {
                (w[i] + grad / mii).clamp(low[i], high[i])
            } else if grad > 0.0 {
                high[i]
            } else {
                low[i]
            };
            moved = moved.max((new - w[i]).abs());
            w[i] = new;
        }
        if moved < 1e-13 {
            break;
        }
    }
    w
}

/// Averaging bound over the box:
/// `sup (1/T) (||theta - theta0||^2 / 2 alpha + ||omega - omega0||^2 / 2 beta)`,
/// attained at the corner farthest from the starting point.
pub fn theorem_bound(
    boxed: &BoxDomain,
    theta0: &DVector<f64>,
    omega0: &DVector<f64>,
    alpha: f64,
    beta: f64,
    t: usize,
) -> f64 {
    assert!(alpha > 0.0 && beta > 0.0 && t > 0);
    let sq = |lo: &[f64], hi: &[f64], origin: &DVector<f64>| -> f64 {
        lo.iter()
            .zip(hi)
            .enumerate()
            .map(|(i, (&l, &h))| {
                let dl = (l - origin[i]).powi(2);
                let dh = (h - origin[i]).powi(2);
                dl.max(dh)
            })
            .sum()
    };
    let theta_part = sq(&boxed.theta_low, &boxed.theta_high, theta0) / (2.0 * alpha);
    let omega_part = sq(&boxed.omega_low, &boxed.omega_high, omega0) / (2.0 * beta);
    (theta_part + omega_part) / t as f64
}

/// Constant-step admissibility: `1 - sqrt(alpha beta) ||A||_* > 0`.
pub fn stepsize_gate(alpha: f64, beta: f64, a_norm: f64) -> bool {
    1.0 - (alpha * beta).sqrt() * a_norm > 0.0
}

/// Monte-Carlo model triple (means of the single-sample estimates).
#[derive(Debug, Clone)]
pub struct SampledModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub m: DMatrix<f64>,
    pub episodes: usize,
    m_inv: DMatrix<f64>,
    m_rank_deficient: bool,
}

impl SampledModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, m: DMatrix<f64>, episodes: usize) -> Self {
        let (m_inv, m_rank_deficient) = linalg::symmetric_pinv(&m);
        Self {
            a,
            b,
            m,
            episodes,
            m_inv,
            m_rank_deficient,
        }
    }

    /// True when the sampled M was inverted through a pseudo-inverse.
    pub fn m_rank_deficient(&self) -> bool {
        self.m_rank_deficient
    }

    /// MSPBE under the sampled triple: `0.5 ||A theta + b||^2_{M^{-1}}`,
    /// with a pseudo-inverse (and flag) when the sampled M is singular.
    pub fn mspbe(&self, theta: &DVector<f64>) -> (f64, bool) {
        let residual = &self.a * theta + &self.b;
        (
            0.5 * linalg::quadratic_form(&residual, &self.m_inv),
            self.m_rank_deficient,
        )
    }
}

/// Empirical MSPBE at `theta` under a Monte-Carlo model.
pub fn empirical_mspbe(theta: &DVector<f64>, sampled: &SampledModel) -> f64 {
    sampled.mspbe(theta).0
}

/// Empirical MSE: the Xi-weighted norm (not squared) of `Phi theta - q_hat`,
/// where `q_hat` is a per-pair value estimate and `xi` the stationary
/// weights in the same pair order as `phi_matrix`.
pub fn empirical_mse(
    theta: &DVector<f64>,
    phi_matrix: &DMatrix<f64>,
    q_hat: &DVector<f64>,
    xi: &DVector<f64>,
) -> f64 {
    let diff = phi_matrix * theta - q_hat;
    diff.iter()
        .zip(xi.iter())
        .map(|(d, w)| w * d * d)
        .sum::<f64>()
        .sqrt()
}
