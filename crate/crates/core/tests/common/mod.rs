//! Independent reference computations. Nothing here calls the crate's solvers.
#![allow(dead_code, clippy::needless_range_loop)]

use cql_core::{Policy, TabularMdp};

/// Gauss–Jordan elimination with partial pivoting on an owned dense system.
pub fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        let piv = a[c][c];
        assert!(piv.abs() > 1e-300, "oracle system is singular");
        for j in 0..n {
            a[c][j] /= piv;
        }
        b[c] /= piv;
        for i in 0..n {
            if i != c {
                let f = a[i][c];
                if f != 0.0 {
                    for j in 0..n {
                        a[i][j] -= f * a[c][j];
                    }
                    b[i] -= f * b[c];
                }
            }
        }
    }
    b
}

pub fn t(m: &TabularMdp, s: usize, a: usize, s2: usize) -> f64 {
    m.transitions()[(s * m.n_actions() + a) * m.n_states() + s2]
}

/// `(I − γP^π)^{-1} rhs` assembled entry by entry.
pub fn policy_solve(m: &TabularMdp, pi: &Policy, rhs: &[f64]) -> Vec<f64> {
    let (ns, na) = (m.n_states(), m.n_actions());
    let n = ns * na;
    let mut a = vec![vec![0.0; n]; n];
    for s in 0..ns {
        for act in 0..na {
            let i = s * na + act;
            a[i][i] += 1.0;
            for s2 in 0..ns {
                for a2 in 0..na {
                    a[i][s2 * na + a2] -= m.gamma() * t(m, s, act, s2) * pi.prob(s2, a2);
                }
            }
        }
    }
    gauss_jordan(a, rhs.to_vec())
}

pub fn q_pi(m: &TabularMdp, pi: &Policy) -> Vec<f64> {
    policy_solve(m, pi, m.rewards())
}

pub fn v_of(q: &[f64], pi: &Policy) -> Vec<f64> {
    (0..pi.n_states())
        .map(|s| (0..pi.n_actions()).map(|a| pi.prob(s, a) * q[s * pi.n_actions() + a]).sum())
        .collect()
}

/// `(I − γP^π_S)^{-1} rhs` over states.
pub fn state_solve(m: &TabularMdp, pi: &Policy, rhs: &[f64]) -> Vec<f64> {
    let ns = m.n_states();
    let mut a = vec![vec![0.0; ns]; ns];
    for s in 0..ns {
        a[s][s] += 1.0;
        for act in 0..m.n_actions() {
            for s2 in 0..ns {
                a[s][s2] -= m.gamma() * pi.prob(s, act) * t(m, s, act, s2);
            }
        }
    }
    gauss_jordan(a, rhs.to_vec())
}

/// `(1−γ) Σ_t γ^t Pr(s_t = ·)` by explicit propagation until the tail is below `tol`.
pub fn marginal_series(m: &TabularMdp, pi: &Policy, tol: f64) -> Vec<f64> {
    let ns = m.n_states();
    let mut p = m.initial_dist().to_vec();
    let mut d = vec![0.0; ns];
    let mut w = 1.0 - m.gamma();
    while w > tol * (1.0 - m.gamma()) {
        for s in 0..ns {
            d[s] += w * p[s];
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..m.n_actions() {
                for s2 in 0..ns {
                    next[s2] += p[s] * pi.prob(s, a) * t(m, s, a, s2);
                }
            }
        }
        p = next;
        w *= m.gamma();
    }
    d
}

/// Brute-force `r + γ Σ T max Q`.
pub fn optimality_backup(m: &TabularMdp, q: &[f64]) -> Vec<f64> {
    let (ns, na) = (m.n_states(), m.n_actions());
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let mut acc = m.reward(s, a);
            for s2 in 0..ns {
                let mut best = f64::NEG_INFINITY;
                for a2 in 0..na {
                    best = best.max(q[s2 * na + a2]);
                }
                acc += m.gamma() * t(m, s, a, s2) * best;
            }
            out[s * na + a] = acc;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `r + γ Σ T Σ π Q` by direct summation.
pub fn policy_backup(m: &TabularMdp, pi: &Policy, q: &[f64]) -> Vec<f64> {
    let (ns, na) = (m.n_states(), m.n_actions());
    let v = v_of(q, pi);
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            out[s * na + a] = m.reward(s, a) + m.gamma() * (0..ns).map(|s2| t(m, s, a, s2) * v[s2]).sum::<f64>();
        }
    }
    out
}
