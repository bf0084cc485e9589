//! Two-timescale independent Q-learning with linear features.
//!
//! Each player keeps fast weights `w` (action-value estimate), slow weights
//! `theta` (policy logits) and frozen target copies of both. A player only
//! ever sees the visited state, its own action, its own reward and the next
//! state.

use nalgebra::DVector;
use rand::Rng;

use crate::dynamics::EnvelopeConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, PlayerFeatures};
use crate::game::{sample_index, Player, StochasticGame};
use crate::oracles::{self, LearnerSnapshot, Trackers};
use crate::policy::{policy_from_params, softmax_unchecked, JointPolicy};

/// Componentwise clamp to `[-r, r]`.
pub fn truncate(x: &DVector<f64>, r: f64) -> DVector<f64> {
    x.map(|v| v.clamp(-r, r))
}

/// Euclidean projection onto the ball of radius `radius`.
pub fn project_ball(w: &DVector<f64>, radius: f64) -> DVector<f64> {
    let norm = w.norm();
    if norm <= radius {
        w.clone()
    } else if radius <= 0.0 {
        DVector::zeros(w.len())
    } else {
        w * (radius / norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Outer iterations (target synchronizations).
    pub outer: usize,
    /// Inner iterations per outer iteration.
    pub inner: usize,
    pub tau: f64,
    /// Projection radius for the fast weights.
    pub radius: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub start_state: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau {} must be positive", self.tau)));
        }
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidParameter(format!("radius {} must be finite and nonnegative", self.radius)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha {} must be nonnegative", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidParameter(format!("beta {} outside [0,1]", self.beta)));
        }
        Ok(())
    }

    /// Truncation radius `1/(1-gamma)` for the given discount.
    pub fn truncation_radius(gamma: f64) -> f64 {
        1.0 / (1.0 - gamma)
    }

    /// `beta / alpha`.
    pub fn stepsize_ratio(&self) -> f64 {
        self.beta / self.alpha
    }

    /// Soft checks against the recommended parameter regime. `excitation` is
    /// an estimate of the smallest feature excitation over policies.
    pub fn warnings(&self, gamma: f64, excitation: Option<f64>) -> Vec<String> {
        let mut out = Vec::new();
        let r = Self::truncation_radius(gamma);
        if self.tau > r {
            out.push(format!("tau = {} exceeds 1/(1-gamma) = {r}", self.tau));
        }
        if let Some(lambda) = excitation {
            let needed = r / lambda.sqrt();
            if self.radius < needed {
                out.push(format!(
                    "radius M = {} is below excitation^(-1/2)/(1-gamma) = {needed}",
                    self.radius
                ));
            }
            if self.stepsize_ratio() > lambda {
                out.push(format!(
                    "beta/alpha = {} exceeds the excitation estimate {lambda}",
                    self.stepsize_ratio()
                ));
            }
        }
        out
    }

    /// Per-step bound on `|pi_{k+1}(s) - pi_k(s)|_1` for a player with
    /// `n_actions` actions: `2 A beta M / tau`.
    pub fn policy_step_bound(&self, n_actions: usize) -> f64 {
        2.0 * n_actions as f64 * self.beta * self.radius / self.tau
    }
}

/// One player's parameters. Holds only that player's features.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerLearner {
    features: PlayerFeatures,
    pub w: DVector<f64>,
    pub theta: DVector<f64>,
    pub w_target: DVector<f64>,
    pub theta_target: DVector<f64>,
    tau: f64,
    gamma: f64,
    radius: f64,
}

impl PlayerLearner {
    pub fn new(features: PlayerFeatures, tau: f64, gamma: f64, radius: f64) -> Self {
        let d = features.dim();
        Self {
            features,
            w: DVector::zeros(d),
            theta: DVector::zeros(d),
            w_target: DVector::zeros(d),
            theta_target: DVector::zeros(d),
            tau,
            gamma,
            radius,
        }
    }

    pub fn features(&self) -> &PlayerFeatures {
        &self.features
    }

    fn truncation_radius(&self) -> f64 {
        RunConfig::truncation_radius(self.gamma)
    }

    /// Current policy at state `s`.
    pub fn policy_at(&self, s: usize) -> DVector<f64> {
        softmax_unchecked(&self.features.state_values(s, &self.theta), self.tau)
    }

    /// `theta <- theta + beta (w - theta)`.
    pub fn slow_step(&mut self, beta: f64) {
        self.theta += (&self.w - &self.theta) * beta;
    }

    /// Value of state `s` under the target parameters:
    /// `softmax(Phi_s theta_target)^T clamp(Phi_s w_target)`.
    pub fn target_value(&self, s: usize) -> f64 {
        let pi = softmax_unchecked(&self.features.state_values(s, &self.theta_target), self.tau);
        let q = truncate(&self.features.state_values(s, &self.w_target), self.truncation_radius());
        pi.dot(&q)
    }

    /// TD error of the observed transition against the target parameters.
    pub fn td_delta(&self, s: usize, action: usize, reward: f64, next: usize) -> f64 {
        reward + self.gamma * self.target_value(next) - self.features.dot(s, action, &self.w)
    }

    /// `w <- Proj_M(w + alpha phi(s,a) delta)`.
    pub fn fast_step(&mut self, s: usize, action: usize, delta: f64, alpha: f64) {
        self.features.axpy_row(s, action, alpha * delta, &mut self.w);
        if self.w.norm() > self.radius {
            self.w = project_ball(&self.w, self.radius);
        }
    }

    /// Copies the current parameters into the targets.
    pub fn sync(&mut self) {
        self.w_target.copy_from(&self.w);
        self.theta_target.copy_from(&self.theta);
    }

    /// Value view of the targets at every state.
    pub fn value_view(&self) -> DVector<f64> {
        DVector::from_fn(self.features.n_states(), |s, _| self.target_value(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub players: [PlayerLearner; 2],
    pub state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub state: usize,
    pub actions: [usize; 2],
    pub next_state: usize,
    pub td: [f64; 2],
}

impl LearnerState {
    pub fn new(features: &FeatureMap, cfg: &RunConfig, gamma: f64) -> Self {
        let make = |p| PlayerLearner::new(features.player(p).clone(), cfg.tau, gamma, cfg.radius);
        Self {
            players: [make(Player::One), make(Player::Two)],
            state: cfg.start_state,
        }
    }

    pub fn player(&self, p: Player) -> &PlayerLearner {
        &self.players[p.index()]
    }

    pub fn snapshot(&self) -> LearnerSnapshot {
        LearnerSnapshot {
            w: [self.players[0].w.clone(), self.players[1].w.clone()],
            theta: [self.players[0].theta.clone(), self.players[1].theta.clone()],
        }
    }

    /// Softmax policy of the current slow weights at every state.
    pub fn joint_policy(&self) -> Result<JointPolicy> {
        let tau = self.players[0].tau;
        let features = FeatureMap::new(
            self.players[0].features.clone(),
            self.players[1].features.clone(),
        )?;
        policy_from_params([&self.players[0].theta, &self.players[1].theta], &features, tau)
    }

    /// One inner iteration: slow step, act at the current state, observe, fast step.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        game: &StochasticGame,
        alpha: f64,
        beta: f64,
        rng: &mut R,
    ) -> Result<StepRecord> {
        let s = self.state;
        let mut actions = [0usize; 2];
        for (i, learner) in self.players.iter_mut().enumerate() {
            learner.slow_step(beta);
            let pi = learner.policy_at(s);
            actions[i] = sample_index(pi.as_slice(), rng.gen::<f64>());
        }
        let outcome = game.sample_transition(s, actions[0], actions[1], rng)?;
        let next = outcome.next_state;
        let rewards = [outcome.reward1, outcome.reward2];
        let mut td = [0.0; 2];
        for (i, learner) in self.players.iter_mut().enumerate() {
            td[i] = learner.td_delta(s, actions[i], rewards[i], next);
            learner.fast_step(s, actions[i], td[i], alpha);
        }
        self.state = next;
        Ok(StepRecord {
            state: s,
            actions,
            next_state: next,
            td,
        })
    }

    /// Runs `cfg.inner` steps, handing each step to `sink`.
    pub fn inner_loop<R: Rng + ?Sized>(
        &mut self,
        game: &StochasticGame,
        cfg: &RunConfig,
        rng: &mut R,
        sink: &mut dyn FnMut(usize, &StepRecord, &LearnerState) -> Result<()>,
    ) -> Result<()> {
        for k in 0..cfg.inner {
            let rec = self.step(game, cfg.alpha, cfg.beta, rng)?;
            sink(k + 1, &rec, self)?;
        }
        Ok(())
    }

    /// Copies every player's parameters into its targets; the trajectory continues.
    pub fn outer_sync(&mut self) {
        for p in self.players.iter_mut() {
            p.sync();
        }
    }

    pub fn value_views(&self) -> [DVector<f64>; 2] {
        [self.players[0].value_view(), self.players[1].value_view()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub t: usize,
    pub k: usize,
    pub l_v: Option<f64>,
    pub l_sum: Option<f64>,
    pub l_theta: Option<f64>,
    pub l_w: Option<f64>,
    pub nash_gap: Option<f64>,
    /// Root-mean-square TD error per player since the previous record.
    pub td_norm: [f64; 2],
}

/// Model-based measurements to take during a run. The learner never sees
/// these; they are computed by the driver from the true game.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    /// Record the four Lyapunov trackers.
    pub instrumented: bool,
    /// Game values for `L_v`, required when instrumented.
    pub v_star: Option<[DVector<f64>; 2]>,
    pub envelope: Option<EnvelopeConfig>,
    /// Extra records every this many inner steps (0: only at loop boundaries).
    pub record_every: usize,
    /// Nash gap after every this many outer iterations (0: never).
    pub gap_every: usize,
    pub rho0: Option<DVector<f64>>,
    pub gap_tol: f64,
}

impl Default for Monitor {
    fn default() -> Self {
        Self {
            instrumented: false,
            v_star: None,
            envelope: None,
            record_every: 0,
            gap_every: 0,
            rho0: None,
            gap_tol: oracles::DEFAULT_TOL,
        }
    }
}

impl Monitor {
    /// Instrumented monitor with game values from minimax value iteration.
    pub fn instrumented(game: &StochasticGame, tau: f64) -> Result<Self> {
        let v1 = oracles::minimax_value_iteration(game, Player::One, 1e-10)?.value;
        let v2 = oracles::minimax_value_iteration(game, Player::Two, 1e-10)?.value;
        Ok(Self {
            instrumented: true,
            v_star: Some([v1, v2]),
            envelope: Some(EnvelopeConfig::new(tau)),
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub policy: JointPolicy,
    pub records: Vec<DiagnosticRecord>,
    pub learner: LearnerState,
}

struct Recorder<'a> {
    game: &'a StochasticGame,
    features: &'a FeatureMap,
    monitor: &'a Monitor,
    tau: f64,
    td_sq: [f64; 2],
    td_count: usize,
    records: Vec<DiagnosticRecord>,
}

impl Recorder<'_> {
    fn observe(&mut self, rec: &StepRecord) {
        for i in 0..2 {
            self.td_sq[i] += rec.td[i] * rec.td[i];
        }
        self.td_count += 1;
    }

    fn record(&mut self, t: usize, k: usize, learner: &LearnerState, gap: bool) -> Result<()> {
        let td_norm = if self.td_count == 0 {
            [0.0; 2]
        } else {
            let n = self.td_count as f64;
            [(self.td_sq[0] / n).sqrt(), (self.td_sq[1] / n).sqrt()]
        };
        self.td_sq = [0.0; 2];
        self.td_count = 0;

        let mut row = DiagnosticRecord {
            t,
            k,
            l_v: None,
            l_sum: None,
            l_theta: None,
            l_w: None,
            nash_gap: None,
            td_norm,
        };
        if self.monitor.instrumented {
            let trackers = self.trackers(learner)?;
            row.l_v = Some(trackers.l_v);
            row.l_sum = Some(trackers.l_sum);
            row.l_theta = Some(trackers.l_theta);
            row.l_w = Some(trackers.l_w);
        }
        if gap {
            let policy = learner.joint_policy()?;
            let rho0 = self
                .monitor
                .rho0
                .clone()
                .unwrap_or_else(|| oracles::uniform_distribution(self.game.n_states()));
            row.nash_gap = Some(oracles::nash_gap(self.game, &policy, &rho0, self.monitor.gap_tol)?);
        }
        self.records.push(row);
        Ok(())
    }

    fn trackers(&self, learner: &LearnerState) -> Result<Trackers> {
        let v_star = self.monitor.v_star.as_ref().ok_or_else(|| {
            Error::InvalidParameter("instrumented monitor needs game values".into())
        })?;
        let env = self.monitor.envelope.unwrap_or_else(|| EnvelopeConfig::new(self.tau));
        let v_t = learner.value_views();
        oracles::lyapunov_trackers(
            self.game,
            self.features,
            &learner.snapshot(),
            [&v_t[0], &v_t[1]],
            [&v_star[0], &v_star[1]],
            &env,
        )
    }
}

/// Runs the full learner: `cfg.outer` rounds of `cfg.inner` steps, each
/// followed by a target synchronization, along one continuing trajectory.
///
/// Records are written at `(0, 0)`, at the end of every round `(t, K)` and,
/// when instrumented, right after every synchronization `(t + 1, 0)`.
pub fn run<R: Rng + ?Sized>(
    game: &StochasticGame,
    features: &FeatureMap,
    cfg: &RunConfig,
    monitor: &Monitor,
    rng: &mut R,
) -> Result<RunOutput> {
    cfg.validate()?;
    features.check_game(game.n_states(), game.n_actions())?;
    if cfg.start_state >= game.n_states() {
        return Err(Error::InvalidParameter(format!("start state {} out of range", cfg.start_state)));
    }
    let mut learner = LearnerState::new(features, cfg, game.gamma());
    let mut recorder = Recorder {
        game,
        features,
        monitor,
        tau: cfg.tau,
        td_sq: [0.0; 2],
        td_count: 0,
        records: Vec::new(),
    };
    recorder.record(0, 0, &learner, monitor.gap_every > 0)?;

    for t in 0..cfg.outer {
        let every = monitor.record_every;
        learner.inner_loop(game, cfg, rng, &mut |k, rec, state| {
            recorder.observe(rec);
            if every > 0 && k % every == 0 && k < cfg.inner {
                recorder.record(t, k, state, false)?;
            }
            Ok(())
        })?;
        let gap = monitor.gap_every > 0 && (t + 1) % monitor.gap_every == 0;
        recorder.record(t, cfg.inner, &learner, gap)?;
        learner.outer_sync();
        if monitor.instrumented {
            recorder.record(t + 1, 0, &learner, false)?;
        }
    }
    Ok(RunOutput {
        policy: learner.joint_policy()?,
        records: recorder.records,
        learner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionCheck {
    pub t: usize,
    /// `L_v(t+1)`.
    pub lhs: f64,
    pub rhs: f64,
    /// `L_sum(t+1)` against `gamma L_sum(t) + 2 sqrt(L_w(t,K))`.
    pub sum_lhs: f64,
    pub sum_rhs: f64,
}

impl RecursionCheck {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn sum_slack(&self) -> f64 {
        self.sum_rhs - self.sum_lhs
    }
}

/// Evaluates the one-round value recursion
///
/// ```text
/// L_v(t+1) <= gamma L_v(t) + 17 A^2 / (tau^2 (1-gamma)^2) L_theta(t,K)
///             + 2 L_sum(t) + 2 sqrt(L_w(t,K)) + 12 tau ln A + mu
/// ```
///
/// on the records of an instrumented run, with `A` the larger action count.
pub fn value_recursion_checks(
    records: &[DiagnosticRecord],
    inner: usize,
    gamma: f64,
    tau: f64,
    mu: f64,
    a_max: usize,
) -> Result<Vec<RecursionCheck>> {
    let find = |t: usize, k: usize| records.iter().find(|r| r.t == t && r.k == k);
    let need = |r: Option<&DiagnosticRecord>, f: fn(&DiagnosticRecord) -> Option<f64>| {
        r.and_then(f)
            .ok_or_else(|| Error::InvalidParameter("records are not from an instrumented run".into()))
    };
    let a = a_max as f64;
    let coef = 17.0 * a * a / (tau * tau * (1.0 - gamma).powi(2));
    let mut out = Vec::new();
    let mut t = 0;
    while let (Some(start), Some(end), Some(next)) = (find(t, 0), find(t, inner), find(t + 1, 0)) {
        let l_v = need(Some(start), |r| r.l_v)?;
        let l_sum = need(Some(start), |r| r.l_sum)?;
        let l_theta = need(Some(end), |r| r.l_theta)?;
        let l_w = need(Some(end), |r| r.l_w)?;
        out.push(RecursionCheck {
            t,
            lhs: need(Some(next), |r| r.l_v)?,
            rhs: gamma * l_v + coef * l_theta + 2.0 * l_sum + 2.0 * l_w.sqrt() + 12.0 * tau * a.ln() + mu,
            sum_lhs: need(Some(next), |r| r.l_sum)?,
            sum_rhs: gamma * l_sum + 2.0 * l_w.sqrt(),
        });
        t += 1;
    }
    Ok(out)
}
