//! Seeded MDP, policy and feature generators.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::linalg::{Lu, Matrix};
use crate::mdp::{Policy, TabularMdp};

/// The generator used for every seeded computation.
pub type SeedRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two states, two actions: `a0` stays, `a1` swaps; reward 1 in `s1`; `γ = 0.9`; start in `s0`.
pub fn chain2() -> TabularMdp {
    chain2_with_r_max(1.0)
}

/// [`chain2`] with a looser reward bound, leaving room for reward noise.
pub fn chain2_with_r_max(r_max: f64) -> TabularMdp {
    TabularMdp::new(
        2,
        2,
        0.9,
        r_max,
        vec![0.0, 0.0, 1.0, 1.0],
        vec![
            1.0, 0.0, // s0 a0
            0.0, 1.0, // s0 a1
            0.0, 1.0, // s1 a0
            1.0, 0.0, // s1 a1
        ],
        vec![1.0, 0.0],
    )
    .expect("chain2 is valid")
}

/// `w × h` grid with actions up, right, down, left.
///
/// With probability `slip` the move goes in a uniformly random direction.
/// Moves into a wall leave the agent in place. Reward 1 in the last cell,
/// uniform start, `γ = 0.9`.
pub fn gridworld(width: usize, height: usize, slip: f64) -> Result<TabularMdp> {
    if width == 0 || height == 0 {
        return Err(invalid("gridworld", "width and height must be positive"));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(invalid("slip", "must lie in [0, 1]"));
    }
    let ns = width * height;
    let moves: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let target = |s: usize, m: usize| -> usize {
        let (x, y) = ((s % width) as isize, (s / width) as isize);
        let (nx, ny) = (x + moves[m].0, y + moves[m].1);
        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
            s
        } else {
            ny as usize * width + nx as usize
        }
    };
    let mut transition = vec![0.0; ns * 4 * ns];
    let mut reward = vec![0.0; ns * 4];
    for s in 0..ns {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * ns..(s * 4 + a + 1) * ns];
            row[target(s, a)] += 1.0 - slip;
            for m in 0..4 {
                row[target(s, m)] += slip / 4.0;
            }
            if s == ns - 1 {
                reward[s * 4 + a] = 1.0;
            }
        }
    }
    TabularMdp::new(ns, 4, 0.9, 1.0, reward, transition, vec![1.0 / ns as f64; ns])
}

/// Flat Dirichlet(1) sample of length `n`.
pub fn dirichlet<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n)
        .map(|_| -libm::log(1.0 - rng.random::<f64>()))
        .collect();
    let z: f64 = x.iter().sum();
    if z > 0.0 {
        x.iter_mut().for_each(|v| *v /= z);
    } else {
        x.iter_mut().for_each(|v| *v = 1.0 / n as f64);
    }
    x
}

/// Random MDP: each `T(·|s,a)` is Dirichlet(1) over `branching` distinct
/// successor states, rewards uniform in `[0, 1]`, `r_max = 1`, uniform start.
pub fn random_mdp<R: Rng>(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(invalid("random_mdp", "dimensions must be positive"));
    }
    if branching == 0 {
        return Err(invalid("branching", "must be positive"));
    }
    let k = branching.min(n_states);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states) {
        let w = dirichlet(k, rng);
        for (idx, p) in sample(rng, n_states, k).into_iter().zip(w) {
            row[idx] = p;
        }
        fix_row_sum(row);
    }
    let reward: Vec<f64> = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    TabularMdp::new(
        n_states,
        n_actions,
        gamma,
        1.0,
        reward,
        transition,
        vec![1.0 / n_states as f64; n_states],
    )
}

// Moves the normalization residual onto the largest entry so the row sum is 1 to round-off.
fn fix_row_sum(row: &mut [f64]) {
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
    let i = crate::math::argmax(row);
    let rest: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
    row[i] = 1.0 - rest;
}

/// Full-support random policy with Dirichlet(1) rows.
pub fn random_policy<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Policy {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let mut row = dirichlet(n_actions, rng);
        fix_row_sum(&mut row);
        probs.extend(row);
    }
    Policy::from_unnormalized(n_states, n_actions, probs)
}

/// Standard normal draw (Box–Muller).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// `rows × dim` feature matrix with standard-normal entries, redrawn until it has
/// full column rank. With `bias`, the last column is the constant 1.
pub fn random_features<R: Rng>(rows: usize, dim: usize, bias: bool, rng: &mut R) -> Result<Matrix> {
    if dim == 0 || dim > rows {
        return Err(invalid("feature dim", "must lie in 1..=rows"));
    }
    loop {
        let mut f = Matrix::zeros(rows, dim);
        for i in 0..rows {
            for j in 0..dim {
                f[(i, j)] = if bias && j == dim - 1 {
                    1.0
                } else {
                    standard_normal(rng)
                };
            }
        }
        let gram = f.transpose().matmul(&f);
        if let Ok(lu) = Lu::factor(&gram) {
            if lu.condition_1() < 1e8 {
                return Ok(f);
            }
        }
    }
}
