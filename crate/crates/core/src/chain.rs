//! Markov chains induced by joint policies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::game::{Player, StochasticGame};
use crate::policy::{sample_softmax_policy, JointPolicy, Policy};

pub const STATIONARY_TOL: f64 = 1e-10;
pub const STEP_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDiagnostics {
    pub stationary: DVector<f64>,
    pub mixing_time: usize,
    pub excitation: [f64; 2],
}

/// `P(s, s') = sum_{a1,a2} pi1(a1|s) pi2(a2|s) p(s'|s,a1,a2)`.
pub fn induced_chain(game: &StochasticGame, policy: &JointPolicy) -> Result<DMatrix<f64>> {
    check_policy(game, policy)?;
    let n = game.n_states();
    let [n1, n2] = game.n_actions();
    let (p1, p2) = (policy.player(Player::One), policy.player(Player::Two));
    let mut chain = DMatrix::zeros(n, n);
    for s in 0..n {
        for a1 in 0..n1 {
            for a2 in 0..n2 {
                let w = p1.prob(s, a1) * p2.prob(s, a2);
                if w == 0.0 {
                    continue;
                }
                for (next, &p) in game.transition_row(s, a1, a2).iter().enumerate() {
                    chain[(s, next)] += w * p;
                }
            }
        }
    }
    Ok(chain)
}

pub(crate) fn check_policy(game: &StochasticGame, policy: &JointPolicy) -> Result<()> {
    crate::error::check_dim("policy state count", game.n_states(), policy.n_states())?;
    let [n1, n2] = game.n_actions();
    crate::error::check_dim("player one action count", n1, policy.n_actions()[0])?;
    crate::error::check_dim("player two action count", n2, policy.n_actions()[1])
}

fn check_square(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() || p.nrows() == 0 {
        return Err(Error::InvalidParameter("transition matrix must be square".into()));
    }
    Ok(())
}

fn max_row_spread(m: &DMatrix<f64>) -> f64 {
    let first = m.row(0);
    m.row_iter()
        .map(|r| (r - first).abs().sum())
        .fold(0.0, f64::max)
}

/// Stationary distribution of an ergodic chain.
///
/// All start states are propagated together by repeated squaring, so a
/// chain whose rows never coalesce (periodic, or several closed classes)
/// is rejected once the step budget is spent.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_square(p)?;
    let mut power = p.clone();
    let mut steps = 1usize;
    while max_row_spread(&power) > STATIONARY_TOL * 0.1 {
        if steps >= STEP_CAP {
            return Err(Error::NotConverged {
                what: "stationary distribution (reducible or periodic chain)",
                iterations: steps,
            });
        }
        power = &power * &power;
        steps *= 2;
    }
    let mut mu: DVector<f64> = power.row_mean().transpose();
    for _ in 0..8 {
        let next = (mu.transpose() * p).transpose();
        let done = (&next - &mu).abs().sum() <= STATIONARY_TOL * 0.01;
        mu = next;
        let total = mu.sum();
        mu /= total;
        if done {
            break;
        }
    }
    let residual = ((mu.transpose() * p).transpose() - &mu).abs().sum();
    if residual > STATIONARY_TOL {
        return Err(Error::NotConverged {
            what: "stationary distribution residual",
            iterations: steps,
        });
    }
    Ok(mu)
}

/// Smallest `k >= 0` with `max_s TV(P^k(s,.), mu) <= delta`.
pub fn mixing_time(p: &DMatrix<f64>, delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta {delta} outside (0,1)")));
    }
    let mu = stationary_distribution(p)?;
    let n = p.nrows();
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 0..=STEP_CAP {
        let worst = power
            .row_iter()
            .map(|r| 0.5 * (r.transpose() - &mu).abs().sum())
            .fold(0.0, f64::max);
        if worst <= delta {
            return Ok(k);
        }
        power = &power * p;
    }
    Err(Error::NotConverged {
        what: "mixing time",
        iterations: STEP_CAP,
    })
}

/// `diag(mu(s) pi(a|s))` flattened in feature-row order.
pub fn state_action_weights(stationary: &DVector<f64>, policy: &Policy) -> DVector<f64> {
    let n_actions = policy.n_actions();
    DVector::from_fn(policy.n_states() * n_actions, |r, _| {
        stationary[r / n_actions] * policy.prob(r / n_actions, r % n_actions)
    })
}

/// `Phi^T D Phi` for one player.
pub fn weighted_gram(
    phi: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| phi[(r, c)] * weights[r]);
    phi.transpose() * scaled
}

/// Smallest eigenvalue of `Phi^T D Phi` per player.
pub fn feature_excitation(
    features: &FeatureMap,
    policy: &JointPolicy,
    stationary: &DVector<f64>,
) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for p in Player::BOTH {
        let f = features.player(p);
        let pi = policy.player(p);
        crate::error::check_dim("policy state count", f.n_states(), pi.n_states())?;
        crate::error::check_dim("policy action count", f.n_actions(), pi.n_actions())?;
        crate::error::check_dim("stationary length", f.n_states(), stationary.len())?;
        let gram = weighted_gram(f.matrix(), &state_action_weights(stationary, pi));
        let eig = gram.symmetric_eigenvalues().min();
        out[p.index()] = eig.max(0.0);
    }
    Ok(out)
}

pub fn chain_diagnostics(
    game: &StochasticGame,
    features: &FeatureMap,
    policy: &JointPolicy,
    delta: f64,
) -> Result<ChainDiagnostics> {
    let p = induced_chain(game, policy)?;
    let stationary = stationary_distribution(&p)?;
    let mixing_time = mixing_time(&p, delta)?;
    let excitation = feature_excitation(features, policy, &stationary)?;
    Ok(ChainDiagnostics {
        stationary,
        mixing_time,
        excitation,
    })
}

/// Per-player minimum of the feature excitation over the uniform policy and
/// `samples` softmax policies with parameters in the ball of radius `radius`.
/// A Monte Carlo estimate of the infimum over the policy class.
pub fn excitation_estimate<R: Rng + ?Sized>(
    game: &StochasticGame,
    features: &FeatureMap,
    tau: f64,
    radius: f64,
    samples: usize,
    rng: &mut R,
) -> Result<[f64; 2]> {
    let uniform = JointPolicy::uniform(game.n_states(), game.n_actions());
    let mut best = excitation_of(game, features, &uniform)?;
    for _ in 0..samples {
        let policy = sample_softmax_policy(features, tau, radius, rng)?;
        let e = excitation_of(game, features, &policy)?;
        best = [best[0].min(e[0]), best[1].min(e[1])];
    }
    Ok(best)
}

fn excitation_of(game: &StochasticGame, features: &FeatureMap, policy: &JointPolicy) -> Result<[f64; 2]> {
    let stationary = stationary_distribution(&induced_chain(game, policy)?)?;
    feature_excitation(features, policy, &stationary)
}
