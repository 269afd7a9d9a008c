//! Benchmark domains.
//!
//! Each constructor returns the exact parameterization used by the
//! experiments: the two-state instability example, the seven-state star
//! counterexample, the windy gridworld and mountain car. Every constant
//! lives here in one place.

use nalgebra::{DMatrix, DVector};

use crate::fa::{FeatureMap, TileCodingConfig};
use crate::mdp::{PairIndexer, PairOrdering, Policy, StartState, TabularMdp};

/// A tabular environment bundled with its feature map, target/behavior
/// policies, pair ordering and start distribution.
#[derive(Debug, Clone)]
pub struct TabularDomain {
    pub name: &'static str,
    pub mdp: TabularMdp,
    pub features: FeatureMap,
    pub target: Policy,
    pub behavior: Policy,
    pub indexer: PairIndexer,
    pub start: StartState,
}

/// Two-state, two-action continuing MDP.
///
/// Action `right` (index 0) always moves to state 2, action `left` (index 1)
/// always moves to state 1. Features are (1,0), (2,0), (0,1), (0,2) on the
/// pairs (1,right), (2,right), (1,left), (2,left); the target policy always
/// goes right, the behavior policy is 50/50. All rewards are zero, so the TD
/// fixed point is the origin whenever A is invertible. Pairs are enumerated
/// action-major so flattened matrices can be compared entry-for-entry
/// against the printed closed forms.
pub fn make_two_state(gamma: f64) -> TabularDomain {
    two_state_with_rewards(gamma, DMatrix::zeros(2, 2), "two-state")
}

/// Two-state variant with nonzero rewards, for the bias and variance demos
/// (the zero-reward instance makes every exact value trivially zero).
pub fn make_two_state_rewarded(gamma: f64) -> TabularDomain {
    let rewards = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, -1.0]);
    two_state_with_rewards(gamma, rewards, "two-state-rewarded")
}

fn two_state_with_rewards(gamma: f64, rewards: DMatrix<f64>, name: &'static str) -> TabularDomain {
    let right = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
    let left = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let mdp = TabularMdp::new(vec![right, left], rewards, gamma, vec![false, false])
        .expect("two-state MDP is valid");
    let features = FeatureMap::from_rows(
        2,
        2,
        2,
        &[
            (0, 0, vec![1.0, 0.0]),
            (1, 0, vec![2.0, 0.0]),
            (0, 1, vec![0.0, 1.0]),
            (1, 1, vec![0.0, 2.0]),
        ],
    )
    .expect("two-state features are valid");
    TabularDomain {
        name,
        mdp,
        features,
        target: Policy::deterministic(2, &[0, 0]),
        behavior: Policy::homogeneous(2, &[0.5, 0.5]).unwrap(),
        indexer: PairIndexer::new(2, 2, PairOrdering::ActionMajor),
        start: StartState::Uniform,
    }
}

/// Seven-state star counterexample.
///
/// The dashed action (index 0) moves to one of the six upper states
/// uniformly; the solid action (index 1) moves to the seventh state. The
/// behavior policy picks dashed/solid with probabilities 6/7 and 1/7 so the
/// next-state distribution is uniform; the target policy always takes solid.
/// All rewards are zero and the discount is 0.99. Features have dimension
/// 16: dashed in state i puts 2 at index i and 1 at index 7; solid in state
/// i puts 2 at index 8+i and 1 at index 15.
pub fn make_baird() -> TabularDomain {
    let n = 7;
    let mut dashed = DMatrix::zeros(n, n);
    let mut solid = DMatrix::zeros(n, n);
    for s in 0..n {
        for upper in 0..6 {
            dashed[(s, upper)] = 1.0 / 6.0;
        }
        solid[(s, 6)] = 1.0;
    }
    let mdp = TabularMdp::new(
        vec![dashed, solid],
        DMatrix::zeros(n, 2),
        0.99,
        vec![false; n],
    )
    .expect("star MDP is valid");

    let dim = 16;
    let mut rows = Vec::with_capacity(n * 2);
    for s in 0..n {
        let mut phi = vec![0.0; dim];
        phi[s] = 2.0;
        phi[7] = 1.0;
        rows.push((s, 0, phi));
        let mut phi = vec![0.0; dim];
        phi[8 + s] = 2.0;
        phi[15] = 1.0;
        rows.push((s, 1, phi));
    }
    let features = FeatureMap::from_rows(n, 2, dim, &rows).expect("star features are valid");

    TabularDomain {
        name: "baird",
        mdp,
        features,
        target: Policy::deterministic(2, &[1; 7]),
        behavior: Policy::homogeneous(n, &[6.0 / 7.0, 1.0 / 7.0]).unwrap(),
        indexer: PairIndexer::state_major(n, 2),
        start: StartState::Uniform,
    }
}

/// Windy gridworld layout constants.
pub mod windy {
    pub const ROWS: usize = 7;
    pub const COLS: usize = 10;
    pub const WIND: [usize; COLS] = [0, 0, 0, 1, 1, 1, 2, 2, 1, 0];
    pub const START: (usize, usize) = (3, 0);
    pub const GOAL: (usize, usize) = (3, 7);
    /// Actions: up, down, right, left.
    pub const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)];

    pub fn state_of(row: usize, col: usize) -> usize {
        row * COLS + col
    }
}

/// 7x10 windy gridworld: four moves, a per-column upward wind of
/// (0,0,0,1,1,1,2,2,1,0), reward -1 per step, start (3,0), terminal goal
/// (3,7). The shortest path takes 15 steps. `gamma` is a knob; 1.0 keeps
/// state values equal to negative path lengths.
#[allow(clippy::needless_range_loop)]
pub fn make_windy_gridworld(gamma: f64) -> (TabularMdp, StartState) {
    use windy::*;
    let n = ROWS * COLS;
    let goal = state_of(GOAL.0, GOAL.1);
    let mut transition = vec![DMatrix::zeros(n, n); MOVES.len()];
    let mut reward = DMatrix::zeros(n, MOVES.len());
    let mut terminal = vec![false; n];
    terminal[goal] = true;

    for row in 0..ROWS {
        for col in 0..COLS {
            let s = state_of(row, col);
            for (a, &(dr, dc)) in MOVES.iter().enumerate() {
                if s == goal {
                    transition[a][(s, s)] = 1.0;
                    continue;
                }
                let wind = WIND[col] as isize;
                let nr = (row as isize + dr - wind).clamp(0, ROWS as isize - 1) as usize;
                let nc = (col as isize + dc).clamp(0, COLS as isize - 1) as usize;
                transition[a][(s, state_of(nr, nc))] = 1.0;
                reward[(s, a)] = -1.0;
            }
        }
    }
    let mdp =
        TabularMdp::new(transition, reward, gamma, terminal).expect("windy gridworld is valid");
    (mdp, StartState::Fixed(state_of(START.0, START.1)))
}

/// Mountain-car physics constants (standard formulation).
pub mod mountain_car {
    pub const POS_MIN: f64 = -1.2;
    pub const POS_MAX: f64 = 0.5;
    pub const VEL_MIN: f64 = -0.07;
    pub const VEL_MAX: f64 = 0.07;
    pub const N_ACTIONS: usize = 3;
    pub const START_POS: (f64, f64) = (-0.6, -0.4);
}

/// Continuous mountain-car state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McState {
    pub pos: f64,
    pub vel: f64,
}

/// Mountain car with three throttle actions (reverse, coast, forward),
/// reward -1 per step and a terminal goal at the right hilltop.
#[derive(Debug, Clone, Copy, Default)]
pub struct MountainCar;

impl MountainCar {
    /// Start at rest with position uniform in the valley interval.
    pub fn reset(&self, rng: &mut crate::rng::Rng) -> McState {
        use rand::Rng as _;
        let (lo, hi) = mountain_car::START_POS;
        McState {
            pos: rng.gen_range(lo..hi),
            vel: 0.0,
        }
    }

    /// Deterministic step; returns (next state, reward, reached goal).
    pub fn step(&self, state: McState, action: usize) -> (McState, f64, bool) {
        use mountain_car::*;
        let throttle = action as f64 - 1.0;
        let mut vel = state.vel + 0.001 * throttle - 0.0025 * (3.0 * state.pos).cos();
        vel = vel.clamp(VEL_MIN, VEL_MAX);
        let mut pos = state.pos + vel;
        if pos <= POS_MIN {
            pos = POS_MIN;
            vel = 0.0;
        }
        if pos >= POS_MAX {
            return (McState { pos: POS_MAX, vel }, -1.0, true);
        }
        (McState { pos, vel }, -1.0, false)
    }
}

/// Mountain car plus its tile-coding configuration: 4 tilings over a 5x5
/// grid on (position, velocity) hashed into 128 tile features, with pair
/// features stacked one block per action. Much finer grids overflow the
/// 128-slot memory and the collisions wreck control quality.
pub fn make_mountain_car() -> (MountainCar, TileCodingConfig) {
    use mountain_car::*;
    let config = TileCodingConfig::new(
        4,
        vec![5, 5],
        vec![(POS_MIN, POS_MAX), (VEL_MIN, VEL_MAX)],
        128,
    )
    .expect("mountain-car tiling is valid");
    (MountainCar, config)
}

/// Exact stationary weights for the two-state behavior chain (uniform 1/4),
/// as a convenience for tests and closed-form comparisons.
pub fn two_state_uniform_weights() -> DVector<f64> {
    DVector::from_element(4, 0.25)
}
