//! Model-based ground truth used to audit the learner.

use nalgebra::{DMatrix, DVector};

use crate::chain::{induced_chain, stationary_distribution, state_action_weights, weighted_gram};
use crate::dynamics::{lyapunov_v, matrix_game_value, EnvelopeConfig, MatrixGamePair};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, PlayerFeatures};
use crate::game::{Player, StochasticGame};
use crate::learner::truncate;
use crate::lp::{self, Constraint, Relation};
use crate::policy::{JointPolicy, Policy};

pub const DEFAULT_TOL: f64 = 1e-8;
const VI_CAP: usize = 1_000_000;
const DIRECT_SOLVE_LIMIT: usize = 2000;

fn check_values(game: &StochasticGame, v: &DVector<f64>) -> Result<()> {
    crate::error::check_dim("value function length", game.n_states(), v.len())
}

fn check_opponent(game: &StochasticGame, opp: &Policy, player: Player) -> Result<()> {
    crate::error::check_dim("opponent policy states", game.n_states(), opp.n_states())?;
    crate::error::check_dim(
        "opponent policy actions",
        game.actions_of(player.opponent()),
        opp.n_actions(),
    )
}

fn expected_next(game: &StochasticGame, player: Player, s: usize, own: usize, opp: usize, v: &DVector<f64>) -> f64 {
    game.transition_row_for(player, s, own, opp)
        .iter()
        .zip(v.iter())
        .map(|(p, x)| p * x)
        .sum()
}

/// Per-state one-step backup `R_i(s,a,b) + gamma E[v(s')]`, shaped `own x opponent`.
pub fn backup_tensor(game: &StochasticGame, v: &DVector<f64>, player: Player) -> Result<Vec<DMatrix<f64>>> {
    check_values(game, v)?;
    let (own, opp) = (game.actions_of(player), game.actions_of(player.opponent()));
    Ok((0..game.n_states())
        .map(|s| {
            DMatrix::from_fn(own, opp, |a, b| {
                game.reward(player, s, a, b) + game.gamma() * expected_next(game, player, s, a, b, v)
            })
        })
        .collect())
}

/// Applies the minimax Bellman operator; returns the new values and the
/// largest LP certificate gap among the per-state solves.
pub fn minimax_bellman_certified(
    game: &StochasticGame,
    v: &DVector<f64>,
    player: Player,
) -> Result<(DVector<f64>, f64)> {
    let tensor = backup_tensor(game, v, player)?;
    let mut out = DVector::zeros(game.n_states());
    let mut worst_gap: f64 = 0.0;
    for (s, x) in tensor.iter().enumerate() {
        let sol = matrix_game_value(x)?;
        out[s] = sol.value;
        worst_gap = worst_gap.max(sol.certificate_gap);
    }
    Ok((out, worst_gap))
}

pub fn minimax_bellman(game: &StochasticGame, v: &DVector<f64>, player: Player) -> Result<DVector<f64>> {
    Ok(minimax_bellman_certified(game, v, player)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViResult {
    pub value: DVector<f64>,
    pub iterations: usize,
    /// `|v_{t+1} - v_t|_inf` for every iteration.
    pub residuals: Vec<f64>,
    pub max_certificate_gap: f64,
}

fn stop_threshold(gamma: f64, tol: f64) -> f64 {
    if gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - gamma) / gamma
    }
}

/// Iterates the minimax Bellman operator from zero until successive iterates
/// are within `tol (1 - gamma) / gamma`, which puts the result within `tol`
/// of the fixed point.
pub fn minimax_value_iteration(game: &StochasticGame, player: Player, tol: f64) -> Result<ViResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let threshold = stop_threshold(game.gamma(), tol);
    let mut v = DVector::zeros(game.n_states());
    let mut residuals = Vec::new();
    let mut max_gap: f64 = 0.0;
    for it in 1..=VI_CAP {
        let (next, gap) = minimax_bellman_certified(game, &v, player)?;
        max_gap = max_gap.max(gap);
        let diff = (&next - &v).amax();
        residuals.push(diff);
        v = next;
        if diff <= threshold {
            return Ok(ViResult {
                value: v,
                iterations: it,
                residuals,
                max_certificate_gap: max_gap,
            });
        }
    }
    Err(Error::NotConverged {
        what: "minimax value iteration",
        iterations: VI_CAP,
    })
}

/// Expected reward and transition matrix of the MDP `player` faces when the
/// opponent is fixed. Rows are indexed `s * |A_i| + a`.
fn marginal_mdp(game: &StochasticGame, opp: &Policy, player: Player) -> (DVector<f64>, DMatrix<f64>) {
    let n = game.n_states();
    let (own, other) = (game.actions_of(player), game.actions_of(player.opponent()));
    let mut reward = DVector::zeros(n * own);
    let mut trans = DMatrix::zeros(n * own, n);
    for s in 0..n {
        for a in 0..own {
            let r = s * own + a;
            for b in 0..other {
                let w = opp.prob(s, b);
                if w == 0.0 {
                    continue;
                }
                reward[r] += w * game.reward(player, s, a, b);
                for (next, p) in game.transition_row_for(player, s, a, b).iter().enumerate() {
                    trans[(r, next)] += w * p;
                }
            }
        }
    }
    (reward, trans)
}

/// Optimal value of `player` against a fixed opponent policy.
pub fn best_response_value(
    game: &StochasticGame,
    opponent_policy: &Policy,
    player: Player,
    tol: f64,
) -> Result<DVector<f64>> {
    check_opponent(game, opponent_policy, player)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let (reward, trans) = marginal_mdp(game, opponent_policy, player);
    let own = game.actions_of(player);
    let n = game.n_states();
    let threshold = stop_threshold(game.gamma(), tol);
    let mut v = DVector::zeros(n);
    for _ in 0..VI_CAP {
        let q = &reward + &trans * &v * game.gamma();
        let next = DVector::from_fn(n, |s, _| {
            (0..own).map(|a| q[s * own + a]).fold(f64::NEG_INFINITY, f64::max)
        });
        let diff = (&next - &v).amax();
        v = next;
        if diff <= threshold {
            return Ok(v);
        }
    }
    Err(Error::NotConverged {
        what: "best-response value iteration",
        iterations: VI_CAP,
    })
}

/// Value of the joint policy for `player`: solves `(I - gamma P) v = r`.
pub fn policy_value(game: &StochasticGame, policy: &JointPolicy, player: Player, tol: f64) -> Result<DVector<f64>> {
    let chain = induced_chain(game, policy)?;
    let n = game.n_states();
    let (p1, p2) = (policy.player(Player::One), policy.player(Player::Two));
    let [n1, n2] = game.n_actions();
    let reward1 = DVector::from_fn(n, |s, _| {
        let mut acc = 0.0;
        for a1 in 0..n1 {
            for a2 in 0..n2 {
                acc += p1.prob(s, a1) * p2.prob(s, a2) * game.reward1(s, a1, a2);
            }
        }
        acc
    });
    let reward = match player {
        Player::One => reward1,
        Player::Two => -reward1,
    };
    let gamma = game.gamma();
    if n <= DIRECT_SOLVE_LIMIT {
        let system = DMatrix::identity(n, n) - &chain * gamma;
        return system
            .lu()
            .solve(&reward)
            .ok_or_else(|| Error::Singular("policy evaluation system".into()));
    }
    let threshold = stop_threshold(gamma, tol);
    let mut v = DVector::zeros(n);
    for _ in 0..VI_CAP {
        let next = &reward + &chain * &v * gamma;
        let diff = (&next - &v).amax();
        v = next;
        if diff <= threshold {
            return Ok(v);
        }
    }
    Err(Error::NotConverged {
        what: "iterative policy evaluation",
        iterations: VI_CAP,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashGapReport {
    pub total: f64,
    /// `rho0^T (best response value - policy value)` per player.
    pub per_player: [f64; 2],
}

pub fn nash_gap_report(
    game: &StochasticGame,
    policy: &JointPolicy,
    rho0: &DVector<f64>,
    tol: f64,
) -> Result<NashGapReport> {
    crate::chain::check_policy(game, policy)?;
    crate::error::check_dim("initial distribution length", game.n_states(), rho0.len())?;
    if rho0.iter().any(|&p| p < 0.0) || (rho0.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter("initial distribution is not a distribution".into()));
    }
    let mut per_player = [0.0; 2];
    for p in Player::BOTH {
        let br = best_response_value(game, policy.player(p.opponent()), p, tol)?;
        let own = policy_value(game, policy, p, tol)?;
        per_player[p.index()] = rho0.dot(&(br - own));
    }
    Ok(NashGapReport {
        total: per_player[0] + per_player[1],
        per_player,
    })
}

/// Sum over players of the best-response improvement, weighted by `rho0`.
pub fn nash_gap(game: &StochasticGame, policy: &JointPolicy, rho0: &DVector<f64>, tol: f64) -> Result<f64> {
    Ok(nash_gap_report(game, policy, rho0, tol)?.total)
}

pub fn uniform_distribution(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// `H(v, pi_opp)(s, a) = sum_b pi_opp(b|s) (R_i + gamma E[v(s')])`, flattened as `s * |A_i| + a`.
pub fn marginal_backup(
    game: &StochasticGame,
    v: &DVector<f64>,
    opponent_policy: &Policy,
    player: Player,
) -> Result<DVector<f64>> {
    check_opponent(game, opponent_policy, player)?;
    let tensor = backup_tensor(game, v, player)?;
    let own = game.actions_of(player);
    Ok(DVector::from_fn(game.n_states() * own, |r, _| {
        let (s, a) = (r / own, r % own);
        tensor[s].row(a).transpose().dot(&opponent_policy.at(s))
    }))
}

fn check_player_features(game: &StochasticGame, features: &PlayerFeatures, player: Player) -> Result<()> {
    crate::error::check_dim("feature state count", game.n_states(), features.n_states())?;
    crate::error::check_dim("feature action count", game.actions_of(player), features.n_actions())
}

/// Weighted least-squares fit of `target` onto the feature span under weights `d`.
pub fn weighted_projection(
    features: &PlayerFeatures,
    weights: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    let phi = features.matrix();
    let gram = weighted_gram(phi, weights);
    let rhs = phi.transpose() * target.component_mul(weights);
    gram.cholesky()
        .ok_or_else(|| Error::Singular("weighted normal equations (no excitation)".into()))
        .map(|c| c.solve(&rhs))
}

/// Weights of the projection of `H(v, pi_opp)` onto player `player`'s features
/// under the on-policy state-action distribution of `policy`.
pub fn target_weights(
    game: &StochasticGame,
    features: &PlayerFeatures,
    v: &DVector<f64>,
    policy: &JointPolicy,
    player: Player,
) -> Result<DVector<f64>> {
    let stationary = stationary_distribution(&induced_chain(game, policy)?)?;
    target_weights_with(game, features, v, policy, player, &stationary)
}

/// As [`target_weights`] with a precomputed stationary distribution.
pub fn target_weights_with(
    game: &StochasticGame,
    features: &PlayerFeatures,
    v: &DVector<f64>,
    policy: &JointPolicy,
    player: Player,
    stationary: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_player_features(game, features, player)?;
    let h = marginal_backup(game, v, policy.player(player.opponent()), player)?;
    let d = state_action_weights(stationary, policy.player(player));
    weighted_projection(features, &d, &h)
}

/// Backup used by the completeness condition: the bootstrap term averages
/// the player's own action values `q(s')` under its own policy.
pub fn completeness_backup(
    game: &StochasticGame,
    policy: &JointPolicy,
    q: &DVector<f64>,
    player: Player,
) -> Result<DVector<f64>> {
    crate::chain::check_policy(game, policy)?;
    let own = game.actions_of(player);
    crate::error::check_dim("action-value length", game.n_states() * own, q.len())?;
    let own_pi = policy.player(player);
    let next_value = DVector::from_fn(game.n_states(), |s, _| {
        (0..own).map(|a| own_pi.prob(s, a) * q[s * own + a]).sum::<f64>()
    });
    marginal_backup(game, &next_value, policy.player(player.opponent()), player)
}

/// `inf_w |Phi w - target|_inf`, solved as a linear program.
pub fn chebyshev_fit(phi: &DMatrix<f64>, target: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let (rows, d) = phi.shape();
    crate::error::check_dim("fit target length", rows, target.len())?;
    // Variables: w+ (d), w- (d), t. Maximize -t.
    let mut constraints = Vec::with_capacity(2 * rows);
    for r in 0..rows {
        let mut upper = Vec::with_capacity(2 * d + 1);
        let mut lower = Vec::with_capacity(2 * d + 1);
        for j in 0..d {
            upper.push(phi[(r, j)]);
            lower.push(-phi[(r, j)]);
        }
        for j in 0..d {
            upper.push(-phi[(r, j)]);
            lower.push(phi[(r, j)]);
        }
        upper.push(-1.0);
        lower.push(-1.0);
        constraints.push(Constraint { coeffs: upper, relation: Relation::Le, rhs: target[r] });
        constraints.push(Constraint { coeffs: lower, relation: Relation::Le, rhs: -target[r] });
    }
    let mut c = vec![0.0; 2 * d + 1];
    c[2 * d] = -1.0;
    let sol = lp::maximize(&c, &constraints)?;
    let w = DVector::from_fn(d, |j, _| sol.x[j] - sol.x[d + j]);
    let residual = (phi * &w - target).amax();
    Ok((residual, w))
}

/// Distance in sup norm from the completeness backup of `clamp(Phi w_tilde, r)`
/// to the span of the player's features.
pub fn completeness_residual(
    game: &StochasticGame,
    features: &PlayerFeatures,
    policy: &JointPolicy,
    w_tilde: &DVector<f64>,
    player: Player,
    r: f64,
) -> Result<f64> {
    check_player_features(game, features, player)?;
    crate::error::check_dim("weight length", features.dim(), w_tilde.len())?;
    let q = truncate(&(features.matrix() * w_tilde), r);
    let target = completeness_backup(game, policy, &q, player)?;
    Ok(chebyshev_fit(features.matrix(), &target)?.0)
}

/// Parameters of both players at one instant of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSnapshot {
    pub w: [DVector<f64>; 2],
    pub theta: [DVector<f64>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trackers {
    pub l_v: f64,
    pub l_sum: f64,
    pub l_theta: f64,
    pub l_w: f64,
}

/// Per-state matrix-game pair `(T^1(v^1)(s), T^2(v^2)(s))`.
pub fn induced_pairs(game: &StochasticGame, v: [&DVector<f64>; 2]) -> Result<Vec<MatrixGamePair>> {
    let t1 = backup_tensor(game, v[0], Player::One)?;
    let t2 = backup_tensor(game, v[1], Player::Two)?;
    t1.into_iter()
        .zip(t2)
        .map(|(a, b)| MatrixGamePair::new(a, b))
        .collect()
}

/// `max_s V_s(Phi^1_s theta^1, Phi^2_s theta^2)` with the state-`s` games induced by `v`.
pub fn policy_tracker(
    game: &StochasticGame,
    features: &FeatureMap,
    theta: [&DVector<f64>; 2],
    v: [&DVector<f64>; 2],
    cfg: &EnvelopeConfig,
) -> Result<f64> {
    let pairs = induced_pairs(game, v)?;
    let (f1, f2) = (features.player(Player::One), features.player(Player::Two));
    let mut worst = f64::NEG_INFINITY;
    for (s, pair) in pairs.iter().enumerate() {
        let x1 = f1.state_values(s, theta[0]);
        let x2 = f2.state_values(s, theta[1]);
        worst = worst.max(lyapunov_v(&x1, &x2, pair, cfg)?);
    }
    Ok(worst)
}

/// The four Lyapunov trackers of a learner snapshot relative to the current
/// value estimates `v_t` and the game values `v_star`.
pub fn lyapunov_trackers(
    game: &StochasticGame,
    features: &FeatureMap,
    snapshot: &LearnerSnapshot,
    v_t: [&DVector<f64>; 2],
    v_star: [&DVector<f64>; 2],
    cfg: &EnvelopeConfig,
) -> Result<Trackers> {
    features.check_game(game.n_states(), game.n_actions())?;
    let l_v = (v_t[0] - v_star[0]).amax() + (v_t[1] - v_star[1]).amax();
    let l_sum = (v_t[0] + v_t[1]).amax();
    let theta = [&snapshot.theta[0], &snapshot.theta[1]];
    let l_theta = policy_tracker(game, features, theta, v_t, cfg)?;
    let policy = crate::policy::policy_from_params(theta, features, cfg.tau)?;
    let stationary = stationary_distribution(&induced_chain(game, &policy)?)?;
    let mut l_w = 0.0;
    for p in Player::BOTH {
        let target = target_weights_with(game, features.player(p), v_t[p.index()], &policy, p, &stationary)?;
        l_w += (&snapshot.w[p.index()] - target).norm_squared();
    }
    Ok(Trackers { l_v, l_sum, l_theta, l_w })
}
