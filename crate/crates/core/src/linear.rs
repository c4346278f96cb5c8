//! Conservative evaluation with linear Q-functions `Q = F w`.
//!
//! Squared Bellman errors are weighted by the data density
//! `D = diag(d^{π_β}(s)·π_β(a|s))`, so the least-squares projection onto the
//! feature span is `P_F = F(FᵀDF)^{-1}FᵀD`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{solve_checked, Matrix};
use crate::math;
use crate::mdp::{bellman_policy_op, discounted_state_marginal, Policy, QTable, TabularMdp};

/// Largest accepted condition number of `FᵀDF`.
pub const MAX_CONDITION: f64 = 1e12;

/// Feature matrix with one row per state-action pair (`s * n_actions + a`).
#[derive(Debug, Clone, PartialEq)]
pub struct Features(pub Matrix);

impl Features {
    pub fn identity(n_pairs: usize) -> Self {
        Self(Matrix::identity(n_pairs))
    }
    pub fn dim(&self) -> usize {
        self.0.cols()
    }
    pub fn n_pairs(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LinearParts", try_from = "LinearParts")]
pub struct LinearQModel {
    pub features: Features,
    pub weights: Vec<f64>,
}

/// Dense row-major serialized form of a [`LinearQModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearParts {
    pub n_pairs: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
}

impl From<LinearQModel> for LinearParts {
    fn from(m: LinearQModel) -> Self {
        LinearParts {
            n_pairs: m.features.n_pairs(),
            dim: m.features.dim(),
            features: m.features.0.as_slice().to_vec(),
            weights: m.weights,
        }
    }
}

impl TryFrom<LinearParts> for LinearQModel {
    type Error = Error;
    fn try_from(p: LinearParts) -> Result<Self> {
        let f = Matrix::from_vec(p.n_pairs, p.dim, p.features)?;
        LinearQModel::new(Features(f), p.weights)
    }
}

impl LinearQModel {
    pub fn new(features: Features, weights: Vec<f64>) -> Result<Self> {
        check_len("weights", features.dim(), weights.len())?;
        Ok(Self { features, weights })
    }

    pub fn zeros(features: Features) -> Self {
        let w = alloc::vec![0.0; features.dim()];
        Self { features, weights: w }
    }

    /// `F w` as a table.
    pub fn q(&self, n_states: usize, n_actions: usize) -> Result<QTable> {
        check_len("feature rows", n_states * n_actions, self.features.n_pairs())?;
        QTable::new(n_states, n_actions, self.features.0.mul_vec(&self.weights))
    }

    fn with_weights(&self, weights: Vec<f64>) -> Self {
        Self {
            features: self.features.clone(),
            weights,
        }
    }
}

/// `d^{π_β}(s)·π_β(a|s)` per pair.
pub fn data_density(mdp: &TabularMdp, behavior: &Policy) -> Result<Vec<f64>> {
    let d = discounted_state_marginal(mdp, behavior)?;
    let na = mdp.n_actions();
    Ok((0..mdp.n_pairs()).map(|i| d[i / na] * behavior.prob(i / na, i % na)).collect())
}

struct Projection {
    density: Vec<f64>,
    gram: Matrix,
    f: Matrix,
}

impl Projection {
    fn new(fa: &LinearQModel, mdp: &TabularMdp, behavior: &Policy) -> Result<Self> {
        check_len("feature rows", mdp.n_pairs(), fa.features.n_pairs())?;
        let density = data_density(mdp, behavior)?;
        let f = fa.features.0.clone();
        let mut df = f.clone();
        for i in 0..f.rows() {
            for j in 0..f.cols() {
                df[(i, j)] *= density[i];
            }
        }
        let gram = f.transpose().matmul(&df);
        Ok(Self { density, gram, f })
    }

    /// `(FᵀDF)^{-1} Fᵀ y`.
    fn solve_tr(&self, y: &[f64]) -> Result<Vec<f64>> {
        solve_checked(&self.gram, &self.f.tr_mul_vec(y), MAX_CONDITION)
    }

    /// `P_F x = F(FᵀDF)^{-1}FᵀD x`.
    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dx: Vec<f64> = x.iter().zip(&self.density).map(|(a, d)| a * d).collect();
        Ok(self.f.mul_vec(&self.solve_tr(&dx)?))
    }
}

/// `(π − π_β)/π_β` per pair; zero where both vanish.
fn ratio_minus_one(pi: &Policy, behavior: &Policy) -> Result<Vec<f64>> {
    let na = pi.n_actions();
    let mut out = Vec::with_capacity(pi.as_slice().len());
    for (i, (&p, &b)) in pi.as_slice().iter().zip(behavior.as_slice()).enumerate() {
        if b > 0.0 {
            out.push((p - b) / b);
        } else if p > 0.0 {
            return Err(Error::SupportViolation {
                state: i / na,
                action: i % na,
            });
        } else {
            out.push(0.0);
        }
    }
    Ok(out)
}

/// LSTD-Q: `w = (FᵀDF)^{-1}FᵀD(B^π Q̂^k)`.
pub fn lstdq_iterate(
    fa: &LinearQModel,
    mdp: &TabularMdp,
    behavior: &Policy,
    target: &Policy,
    q_prev: &QTable,
) -> Result<LinearQModel> {
    cql_linear_iterate(fa, mdp, behavior, target, 0.0, q_prev)
}

/// Solves `(FᵀDF)w = FᵀD(B^π Q̂^k) − α·Fᵀ[d^{π_β}(s)(π(a|s) − π_β(a|s))]`.
pub fn cql_linear_iterate(
    fa: &LinearQModel,
    mdp: &TabularMdp,
    behavior: &Policy,
    target: &Policy,
    alpha: f64,
    q_prev: &QTable,
) -> Result<LinearQModel> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", format!("{alpha} must be finite and non-negative")));
    }
    let proj = Projection::new(fa, mdp, behavior)?;
    let bq = bellman_policy_op(mdp, target, q_prev)?;
    let d = discounted_state_marginal(mdp, behavior)?;
    let na = mdp.n_actions();
    let y: Vec<f64> = (0..mdp.n_pairs())
        .map(|i| {
            let (s, a) = (i / na, i % na);
            proj.density[i] * bq.as_slice()[i] - alpha * d[s] * (target.prob(s, a) - behavior.prob(s, a))
        })
        .collect();
    Ok(fa.with_weights(proj.solve_tr(&y)?))
}

/// `f(π)(s) = Σ_a π(a|s)·(P_F[(π − π_β)/π_β])(s,a)`.
pub fn projection_penalty(fa: &LinearQModel, mdp: &TabularMdp, behavior: &Policy, pi: &Policy) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let proj = Projection::new(fa, mdp, behavior)?;
    let px = proj.project(&ratio_minus_one(pi, behavior)?)?;
    Ok(pi.expect(&px))
}

/// `Σ_s d^{π_β}(s)·f(π)(s)`. When the features span the constant function this
/// equals `‖P_F x‖²_D ≥ 0`.
pub fn expected_projection_penalty(fa: &LinearQModel, mdp: &TabularMdp, behavior: &Policy, pi: &Policy) -> Result<f64> {
    let f = projection_penalty(fa, mdp, behavior, pi)?;
    let d = discounted_state_marginal(mdp, behavior)?;
    Ok(math::dot(&d, &f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearThreshold {
    /// `+∞` when no finite `α` works.
    pub value: f64,
    /// `Σ_s d(s) Σ_a π(a|s)·((P_F − I) B^π Q̂^k)(s,a)`.
    pub numerator: f64,
    /// `Σ_s d(s) f(π)(s)`.
    pub denominator: f64,
    pub note: Option<String>,
}

/// Smallest `α_k ≥ 0` with `E_{d^{π_β}}[V̂^{k+1}] ≤ E_{d^{π_β}}[V^{k+1}]`, where
/// `V^{k+1}` is the unprojected backup of the same `Q̂^k`: `max(num/den, 0)`.
pub fn alpha_threshold_linear(
    fa: &LinearQModel,
    mdp: &TabularMdp,
    behavior: &Policy,
    target: &Policy,
    q_prev: &QTable,
) -> Result<LinearThreshold> {
    let proj = Projection::new(fa, mdp, behavior)?;
    let d = discounted_state_marginal(mdp, behavior)?;
    let bq = bellman_policy_op(mdp, target, q_prev)?;
    let pbq = proj.project(bq.as_slice())?;
    let resid: Vec<f64> = pbq.iter().zip(bq.as_slice()).map(|(p, b)| p - b).collect();
    let numerator = math::dot(&d, &target.expect(&resid));
    let x = ratio_minus_one(target, behavior)?;
    let px = proj.project(&x)?;
    let denominator = math::dot(&d, &target.expect(&px));
    // Below this the penalty direction is numerically null (e.g. bias-only features).
    let scale: f64 = x.iter().zip(&proj.density).map(|(x, w)| w * x * x).sum();
    let floor = 1e-12 * scale.max(1.0);
    let (value, note) = if denominator > floor {
        ((numerator / denominator).max(0.0), None)
    } else if numerator <= 0.0 {
        (0.0, Some(String::from("projection already lowers the expected value; any α works")))
    } else {
        (
            f64::INFINITY,
            Some(format!("penalty direction {denominator:e} cannot offset projection error {numerator:e}")),
        )
    };
    Ok(LinearThreshold {
        value,
        numerator,
        denominator,
        note,
    })
}

/// One gradient step on `w` mapped to Q-space, with `M = FFᵀ`:
/// `Q̂^{k+1} = Q̂^k − ηα·M D x + η·M D(B^π Q̂^k − Q̂^k)`, `x = (π − π_β)/π_β`.
#[allow(clippy::too_many_arguments)]
pub fn ntk_gradient_step(
    fa: &LinearQModel,
    mdp: &TabularMdp,
    behavior: &Policy,
    target: &Policy,
    alpha: f64,
    eta: f64,
    q_prev: &QTable,
) -> Result<QTable> {
    check_len("feature rows", mdp.n_pairs(), fa.features.n_pairs())?;
    let density = data_density(mdp, behavior)?;
    let x = ratio_minus_one(target, behavior)?;
    let bq = bellman_policy_op(mdp, target, q_prev)?;
    let v: Vec<f64> = (0..mdp.n_pairs())
        .map(|i| density[i] * ((bq.as_slice()[i] - q_prev.as_slice()[i]) - alpha * x[i]))
        .collect();
    let f = &fa.features.0;
    let mv = f.mul_vec(&f.tr_mul_vec(&v));
    let q: Vec<f64> = q_prev.as_slice().iter().zip(mv).map(|(q, m)| q + eta * m).collect();
    QTable::new(mdp.n_states(), mdp.n_actions(), q)
}

/// Penalty direction of [`ntk_gradient_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkPenalty {
    /// `Σ_a π(a|s)·(M D x)(s,a)` per state.
    pub per_state: Vec<f64>,
    /// `xᵀ D M D x = ‖Fᵀ D x‖² ≥ 0`: how much one unit of penalty lowers
    /// `E_{d,π}[Q] − E_{d,π_β}[Q]`.
    pub quadratic: f64,
}

pub fn ntk_penalty_terms(fa: &LinearQModel, mdp: &TabularMdp, behavior: &Policy, target: &Policy) -> Result<NtkPenalty> {
    check_len("feature rows", mdp.n_pairs(), fa.features.n_pairs())?;
    let density = data_density(mdp, behavior)?;
    let x = ratio_minus_one(target, behavior)?;
    let dx: Vec<f64> = x.iter().zip(&density).map(|(a, d)| a * d).collect();
    let f = &fa.features.0;
    let ftdx = f.tr_mul_vec(&dx);
    let mdx = f.mul_vec(&ftdx);
    Ok(NtkPenalty {
        per_state: target.expect(&mdx),
        quadratic: math::dot(&ftdx, &ftdx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::d_cql;
    use crate::generators::chain2;

    fn pi82() -> Policy {
        Policy::from_rows(2, 2, alloc::vec![0.8, 0.2, 0.8, 0.2]).unwrap()
    }

    #[test]
    fn identity_features_reproduce_backup() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let fa = LinearQModel::zeros(Features::identity(4));
        let q = QTable::new(2, 2, alloc::vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let w = lstdq_iterate(&fa, &m, &beta, &pi82(), &q).unwrap();
        let bq = bellman_policy_op(&m, &pi82(), &q).unwrap();
        assert!(math::max_abs_diff(&w.weights, bq.as_slice()) < 1e-12);
    }

    #[test]
    fn identity_features_penalty_is_d_cql() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let fa = LinearQModel::zeros(Features::identity(4));
        let f = projection_penalty(&fa, &m, &beta, &pi82()).unwrap();
        let dc = d_cql(&pi82(), &beta).unwrap();
        assert!(math::max_abs_diff(&f, &dc) < 1e-12);
        let z = projection_penalty(&fa, &m, &beta, &beta).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identity_features_need_no_alpha() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let fa = LinearQModel::zeros(Features::identity(4));
        let q = QTable::constant(2, 2, 1.0);
        let t = alpha_threshold_linear(&fa, &m, &beta, &pi82(), &q).unwrap();
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn zero_step_leaves_q() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let fa = LinearQModel::zeros(Features::identity(4));
        let q = QTable::constant(2, 2, 1.5);
        assert_eq!(ntk_gradient_step(&fa, &m, &beta, &pi82(), 1.0, 0.0, &q).unwrap(), q);
    }

    #[test]
    fn singular_gram_reports_condition() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let f = Matrix::from_vec(4, 2, alloc::vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let fa = LinearQModel::zeros(Features(f));
        let err = lstdq_iterate(&fa, &m, &beta, &pi82(), &QTable::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }
}
