//! Smoothed Lyapunov function for the matrix-game dynamics and its prox solver.
//!
//! For a payoff matrix `B` (n x m), logits `x` (length n) and `y` (length m),
//! the prox point is
//!
//! ```text
//! p(x, y) = argmin_{u in simplex} -u^T y - tau nu(u) + |x - B u|^2 / (2 mu)
//! ```
//!
//! It is computed from the dual problem
//! `max_l l^T x - mu |l|^2 / 2 - smax_tau(y + B^T l)`, whose maximizer gives
//! `p = softmax_tau(y + B^T l)`.

use nalgebra::{DMatrix, DVector};

use super::matrix::{entropy_unchecked, smoothed_max, DynamicsState, MatrixGamePair};
use crate::error::{Error, Result};
use crate::policy::softmax_unchecked;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeConfig {
    pub tau: f64,
    pub mu: f64,
    pub inner_tol: f64,
    pub inner_cap: usize,
}

impl EnvelopeConfig {
    /// Temperature `tau` with `mu = tau / 64`.
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            mu: tau / 64.0,
            inner_tol: 1e-9,
            inner_cap: 100_000,
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_tol(mut self, inner_tol: f64) -> Self {
        self.inner_tol = inner_tol;
        self
    }

    fn check(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.mu > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "envelope needs positive tau, mu and tolerance (got {}, {}, {})",
                self.tau, self.mu, self.inner_tol
            )));
        }
        Ok(())
    }

    /// Gradient Lipschitz constant `2/mu + 2/tau + 1/sqrt(mu tau)`.
    pub fn smoothness(&self) -> f64 {
        2.0 / self.mu + 2.0 / self.tau + 1.0 / (self.mu * self.tau).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxSolution {
    pub minimizer: DVector<f64>,
    pub objective: f64,
    /// Half the spread of the objective gradient over the actions; zero at the
    /// (interior) minimizer.
    pub kkt_residual: f64,
    pub iterations: usize,
}

fn half_spread(v: &DVector<f64>) -> f64 {
    0.5 * (v.max() - v.min())
}

fn check_prox_dims(x: &DVector<f64>, y: &DVector<f64>, b: &DMatrix<f64>) -> Result<()> {
    crate::error::check_dim("prox x length", b.nrows(), x.len())?;
    crate::error::check_dim("prox y length", b.ncols(), y.len())
}

/// Primal objective `-u^T y - tau nu(u) + |x - B u|^2 / (2 mu)`.
pub fn prox_objective(
    u: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    cfg: &EnvelopeConfig,
) -> f64 {
    -u.dot(y) - cfg.tau * entropy_unchecked(u) + (x - b * u).norm_squared() / (2.0 * cfg.mu)
}

fn dual_value(l: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>, b: &DMatrix<f64>, cfg: &EnvelopeConfig) -> f64 {
    l.dot(x) - 0.5 * cfg.mu * l.norm_squared() - smoothed_max(&(y + b.transpose() * l), cfg.tau)
}

/// Primal point `softmax(eta)` with its stationarity vector
/// `tau ln p - y + B^T (B p - x) / mu`, which is constant at the minimizer.
struct PrimalPoint {
    p: DVector<f64>,
    log_p: DVector<f64>,
    stationarity: DVector<f64>,
    residual: f64,
}

fn primal_point(
    eta: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    cfg: &EnvelopeConfig,
) -> PrimalPoint {
    let m = eta.max();
    let lse = eta.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let log_p = eta.add_scalar(-m - lse);
    let p = log_p.map(f64::exp);
    let stationarity = &log_p * cfg.tau - y + b.transpose() * (b * &p - x) / cfg.mu;
    let residual = half_spread(&stationarity);
    PrimalPoint {
        p,
        log_p,
        stationarity,
        residual,
    }
}

fn finish(point: PrimalPoint, x: &DVector<f64>, y: &DVector<f64>, b: &DMatrix<f64>, cfg: &EnvelopeConfig, iterations: usize) -> ProxSolution {
    let entropy = -point.p.dot(&point.log_p);
    let objective = -point.p.dot(y) - cfg.tau * entropy + (x - b * &point.p).norm_squared() / (2.0 * cfg.mu);
    ProxSolution {
        minimizer: point.p,
        objective,
        kkt_residual: point.residual,
        iterations,
    }
}

/// The prox point `p(x, y)`.
///
/// Damped Newton ascent on the dual brings the logits close to the optimum;
/// Newton steps on the logits themselves then finish, since the dual
/// parametrization cannot resolve `p` finely once `|lambda|` is large.
pub fn prox_p(
    x: &DVector<f64>,
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    cfg: &EnvelopeConfig,
) -> Result<ProxSolution> {
    cfg.check()?;
    check_prox_dims(x, y, b)?;
    let (tau, mu) = (cfg.tau, cfg.mu);
    let n = b.nrows();
    let bt = b.transpose();
    let mut lambda = DVector::zeros(n);
    let mut iterations = 0;

    while iterations < cfg.inner_cap {
        let z = y + &bt * &lambda;
        let point = primal_point(&(&z / tau), x, y, b, cfg);
        if point.residual <= cfg.inner_tol {
            return Ok(finish(point, x, y, b, cfg, iterations));
        }
        iterations += 1;

        let p = point.p;
        let grad = x - b * &p - &lambda * mu;
        if half_spread(&(&bt * &grad / mu)) <= cfg.inner_tol {
            break;
        }
        let cov = DMatrix::from_diagonal(&p) - &p * p.transpose();
        let hess = DMatrix::identity(n, n) * mu + b * cov * &bt / tau;
        let dir = hess
            .cholesky()
            .ok_or_else(|| Error::Singular("prox dual Hessian".into()))?
            .solve(&grad);

        let d0 = dual_value(&lambda, x, y, b, cfg);
        let slope = grad.dot(&dir);
        if slope <= 64.0 * f64::EPSILON * (1.0 + d0.abs()) {
            break;
        }
        let mut step = 1.0;
        let mut moved = false;
        while step >= 1e-12 {
            let trial = &lambda + &dir * step;
            if dual_value(&trial, x, y, b, cfg) >= d0 + 1e-4 * step * slope {
                lambda = trial;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            // The dual value is flat to rounding here.
            break;
        }
    }

    let mut eta = (y + &bt * &lambda) / tau;
    eta.add_scalar_mut(-eta.max());
    let mut point = primal_point(&eta, x, y, b, cfg);
    let m = b.ncols();
    let gram = &bt * b / mu;
    while iterations < cfg.inner_cap {
        if point.residual <= cfg.inner_tol {
            return Ok(finish(point, x, y, b, cfg, iterations));
        }
        iterations += 1;
        let cov = DMatrix::from_diagonal(&point.p) - &point.p * point.p.transpose();
        let jac = DMatrix::identity(m, m) * tau + &gram * cov;
        let dir = jac
            .lu()
            .solve(&point.stationarity.add_scalar(-point.stationarity.mean()).scale(-1.0))
            .ok_or_else(|| Error::Singular("prox logit Jacobian".into()))?;
        let mut step = 1.0;
        let mut improved = None;
        while step >= 1e-6 {
            let mut trial_eta = &eta + &dir * step;
            trial_eta.add_scalar_mut(-trial_eta.max());
            let trial = primal_point(&trial_eta, x, y, b, cfg);
            if trial.residual < point.residual {
                improved = Some((trial_eta, trial));
                break;
            }
            step *= 0.5;
        }
        match improved {
            Some((e, pt)) => {
                eta = e;
                point = pt;
            }
            None => break,
        }
    }
    Err(Error::NotConverged {
        what: "prox solver",
        iterations,
    })
}

/// The prox point by entropic mirror descent with step `1/(tau + |B|_2^2 / mu)`.
///
/// Much slower than [`prox_p`]; kept as an independent route for cross-checks.
pub fn prox_p_mirror_descent(
    x: &DVector<f64>,
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    cfg: &EnvelopeConfig,
) -> Result<ProxSolution> {
    cfg.check()?;
    check_prox_dims(x, y, b)?;
    let (tau, mu) = (cfg.tau, cfg.mu);
    let smooth = b.clone().svd(false, false).singular_values.max().powi(2) / mu;
    let bt = b.transpose();
    let mut log_u = softmax_unchecked(y, tau).map(f64::ln);

    for it in 0..=cfg.inner_cap {
        let u = log_u.map(f64::exp);
        let smooth_grad = -y + &bt * (b * &u - x) / mu;
        let full_grad = &smooth_grad + log_u.map(|l| tau * (l + 1.0));
        let kkt_residual = half_spread(&full_grad);
        if kkt_residual <= cfg.inner_tol {
            return Ok(ProxSolution {
                objective: prox_objective(&u, x, y, b, cfg),
                minimizer: u,
                kkt_residual,
                iterations: it,
            });
        }
        let logits = (&log_u * smooth - smooth_grad) / (tau + smooth);
        let m = logits.max();
        let lse = m + logits.map(|v| (v - m).exp()).sum().ln();
        log_u = logits.add_scalar(-lse);
    }
    Err(Error::NotConverged {
        what: "mirror-descent prox solver",
        iterations: cfg.inner_cap,
    })
}

/// The two halves of the Lyapunov function with their prox points.
///
/// `v1` penalizes player one's logits against `X1` times player two's prox
/// point `p`; `v2` is the mirror image with `X2` and player one's prox point `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovParts {
    pub v1: f64,
    pub v2: f64,
    pub p: ProxSolution,
    pub q: ProxSolution,
}

impl LyapunovParts {
    pub fn total(&self) -> f64 {
        self.v1 + self.v2
    }
}

pub fn lyapunov_parts(
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    pair: &MatrixGamePair,
    cfg: &EnvelopeConfig,
) -> Result<LyapunovParts> {
    let p = prox_p(x1, x2, pair.x1(), cfg)?;
    let q = prox_p(x2, x1, pair.x2(), cfg)?;
    Ok(LyapunovParts {
        v1: smoothed_max(x2, cfg.tau) + p.objective,
        v2: smoothed_max(x1, cfg.tau) + q.objective,
        p,
        q,
    })
}

/// The Lyapunov function `V(x1, x2)`; nonnegative and zero exactly at the
/// fixed points `x_i = X_i softmax(x_{-i})`.
pub fn lyapunov_v(
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    pair: &MatrixGamePair,
    cfg: &EnvelopeConfig,
) -> Result<f64> {
    Ok(lyapunov_parts(x1, x2, pair, cfg)?.total())
}

pub fn lyapunov_v_state(state: &DynamicsState, pair: &MatrixGamePair, cfg: &EnvelopeConfig) -> Result<f64> {
    lyapunov_v(&state.x1, &state.x2, pair, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovGradient {
    pub g1: DVector<f64>,
    pub g2: DVector<f64>,
    pub smoothness: f64,
}

pub fn lyapunov_grad(
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    pair: &MatrixGamePair,
    cfg: &EnvelopeConfig,
) -> Result<LyapunovGradient> {
    let parts = lyapunov_parts(x1, x2, pair, cfg)?;
    let (p, q) = (&parts.p.minimizer, &parts.q.minimizer);
    let g1 = (x1 - pair.x1() * p) / cfg.mu + softmax_unchecked(x1, cfg.tau) - q;
    let g2 = softmax_unchecked(x2, cfg.tau) - p + (x2 - pair.x2() * q) / cfg.mu;
    Ok(LyapunovGradient {
        g1,
        g2,
        smoothness: cfg.smoothness(),
    })
}
