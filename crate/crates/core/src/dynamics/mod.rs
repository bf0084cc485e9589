//! Per-state matrix-game machinery: smoothed best-response dynamics, the
//! regularized Nash gap, the smoothed Lyapunov function and drift audits.

mod drift;
mod envelope;
mod matrix;

pub use drift::{drift_check, param_trajectory, DriftReport, DriftRow};
pub use envelope::{
    lyapunov_grad, lyapunov_parts, lyapunov_v, lyapunov_v_state, prox_objective, prox_p,
    prox_p_mirror_descent, EnvelopeConfig, LyapunovGradient, LyapunovParts, ProxSolution,
};
pub use matrix::{
    entropy, matrix_game_value, param_step, regularized_nash_gap, sbr_policy_step, smoothed_max,
    DynamicsState, MatrixGamePair, MatrixGameSolution,
};
