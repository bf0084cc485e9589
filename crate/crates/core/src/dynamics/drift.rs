//! Per-step audit of the Lyapunov drift inequality along parameter dynamics.

use nalgebra::DVector;

use super::envelope::{lyapunov_v_state, EnvelopeConfig};
use super::matrix::{param_direction, param_step, DynamicsState, MatrixGamePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub k: usize,
    pub v_k: f64,
    pub v_next: f64,
    pub bound: f64,
    pub slack: f64,
    pub noise_x_norm: f64,
    pub noise_y_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    /// Largest update norm `|X_i softmax(x_{-i}) - x_i + E_i|` seen on the trajectory.
    pub update_bound: f64,
    pub zero_sum_defect: f64,
    pub tolerance: f64,
}

impl DriftReport {
    pub fn min_slack(&self) -> f64 {
        self.rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn satisfied_count(&self) -> usize {
        self.rows.iter().filter(|r| r.slack >= -self.tolerance).count()
    }

    pub fn all_satisfied(&self) -> bool {
        self.satisfied_count() == self.rows.len()
    }
}

/// Runs `param_step` from `start` with the given per-step noise.
pub fn param_trajectory(
    start: &DynamicsState,
    pair: &MatrixGamePair,
    tau: f64,
    beta: f64,
    noise: &[(DVector<f64>, DVector<f64>)],
) -> Result<Vec<DynamicsState>> {
    let mut out = Vec::with_capacity(noise.len() + 1);
    out.push(start.clone());
    for (e1, e2) in noise {
        let next = param_step(out.last().expect("nonempty"), pair, tau, beta, (e1, e2))?;
        out.push(next);
    }
    Ok(out)
}

/// Checks, for every step `k`,
///
/// ```text
/// V(k+1) <= (1 - beta/2) V(k) + (520 beta / tau)(|E_x|^2 + |E_y|^2)
///           + 4 beta defect + 138 L_b beta^2 / tau
/// ```
///
/// with `L_b` the largest recorded update norm. A row passes when its slack
/// is at least `-10 * inner_tol`.
pub fn drift_check(
    trajectory: &[DynamicsState],
    noise: &[(DVector<f64>, DVector<f64>)],
    pair: &MatrixGamePair,
    cfg: &EnvelopeConfig,
    beta: f64,
) -> Result<DriftReport> {
    if trajectory.is_empty() || noise.len() + 1 != trajectory.len() {
        return Err(Error::InvalidParameter(format!(
            "missing noise records: {} states need {} noise pairs, got {}",
            trajectory.len(),
            trajectory.len().saturating_sub(1),
            noise.len()
        )));
    }
    let tau = cfg.tau;
    let update_bound = trajectory
        .iter()
        .zip(noise)
        .map(|(s, (e1, e2))| {
            let [d1, d2] = param_direction(s, pair, tau, (e1, e2));
            d1.norm().max(d2.norm())
        })
        .fold(0.0, f64::max);
    let defect = pair.zero_sum_defect();

    let mut rows = Vec::with_capacity(noise.len());
    let mut v_k = lyapunov_v_state(&trajectory[0], pair, cfg)?;
    for (k, (e1, e2)) in noise.iter().enumerate() {
        let v_next = lyapunov_v_state(&trajectory[k + 1], pair, cfg)?;
        let (nx, ny) = (e1.norm(), e2.norm());
        let bound = (1.0 - beta / 2.0) * v_k
            + 520.0 * beta / tau * (nx * nx + ny * ny)
            + 4.0 * beta * defect
            + 138.0 * update_bound * beta * beta / tau;
        rows.push(DriftRow {
            k,
            v_k,
            v_next,
            bound,
            slack: bound - v_next,
            noise_x_norm: nx,
            noise_y_norm: ny,
        });
        v_k = v_next;
    }
    Ok(DriftReport {
        rows,
        update_bound,
        zero_sum_defect: defect,
        tolerance: 10.0 * cfg.inner_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn noise_free_pennies_passes() {
        let pair = MatrixGamePair::zero_sum(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let cfg = EnvelopeConfig::new(0.5);
        let start = DynamicsState::new(
            DVector::from_vec(vec![0.8, -0.3]),
            DVector::from_vec(vec![-0.5, 0.9]),
        );
        let noise = vec![(DVector::zeros(2), DVector::zeros(2)); 300];
        let traj = param_trajectory(&start, &pair, 0.5, 0.01, &noise).unwrap();
        let report = drift_check(&traj, &noise, &pair, &cfg, 0.01).unwrap();
        assert!(report.min_slack() >= -1e-7, "{}", report.min_slack());
    }

    #[test]
    fn fixed_point_has_nonnegative_slack() {
        let pair = MatrixGamePair::zero_sum(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let cfg = EnvelopeConfig::new(0.5);
        let start = DynamicsState::new(DVector::zeros(2), DVector::zeros(2));
        let noise = vec![(DVector::zeros(2), DVector::zeros(2)); 5];
        let traj = param_trajectory(&start, &pair, 0.5, 0.01, &noise).unwrap();
        let report = drift_check(&traj, &noise, &pair, &cfg, 0.01).unwrap();
        for row in &report.rows {
            assert!(row.v_k.abs() < 1e-8 && row.slack >= -report.tolerance);
        }
    }

    #[test]
    fn missing_noise_is_an_error() {
        let pair = MatrixGamePair::zero_sum(DMatrix::identity(2, 2));
        let start = DynamicsState::new(DVector::zeros(2), DVector::zeros(2));
        let err = drift_check(&[start.clone(), start], &[], &pair, &EnvelopeConfig::new(1.0), 0.1);
        assert!(err.is_err());
    }
}
