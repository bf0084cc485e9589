use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{self, Constraint, Relation};
use crate::policy::softmax_unchecked;

const SIMPLEX_TOL: f64 = 1e-9;

/// Payoff matrices of a two-player matrix game, one per player, each indexed
/// `(own action, opponent action)`. They need not sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGamePair {
    x1: DMatrix<f64>,
    x2: DMatrix<f64>,
}

impl MatrixGamePair {
    pub fn new(x1: DMatrix<f64>, x2: DMatrix<f64>) -> Result<Self> {
        crate::error::check_dim("second payoff rows", x1.ncols(), x2.nrows())?;
        crate::error::check_dim("second payoff columns", x1.nrows(), x2.ncols())?;
        if x1.is_empty() {
            return Err(Error::InvalidParameter("empty payoff matrix".into()));
        }
        Ok(Self { x1, x2 })
    }

    /// The zero-sum pair `(X, -X^T)`.
    pub fn zero_sum(x1: DMatrix<f64>) -> Self {
        let x2 = -x1.transpose();
        Self { x1, x2 }
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn x2(&self) -> &DMatrix<f64> {
        &self.x2
    }

    pub fn n_actions(&self) -> [usize; 2] {
        [self.x1.nrows(), self.x1.ncols()]
    }

    /// `max_{i,j} |X1(i,j) + X2(j,i)|`.
    pub fn zero_sum_defect(&self) -> f64 {
        (&self.x1 + self.x2.transpose()).abs().max()
    }
}

/// Iterate of the matrix dynamics. Holds either logits (parameter space)
/// or mixed strategies (policy space), depending on the step applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsState {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
}

impl DynamicsState {
    pub fn new(x1: DVector<f64>, x2: DVector<f64>) -> Self {
        Self { x1, x2 }
    }

    fn check(&self, pair: &MatrixGamePair) -> Result<()> {
        let [n, m] = pair.n_actions();
        crate::error::check_dim("first iterate length", n, self.x1.len())?;
        crate::error::check_dim("second iterate length", m, self.x2.len())
    }
}

fn check_simplex(u: &DVector<f64>) -> Result<()> {
    if u.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter("vector has negative entries".into()));
    }
    if (u.sum() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!("vector sums to {}", u.sum())));
    }
    Ok(())
}

/// `-sum u ln u` with `0 ln 0 = 0`.
pub fn entropy(u: &DVector<f64>) -> Result<f64> {
    if u.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("entropy of a vector with negative entries".into()));
    }
    Ok(entropy_unchecked(u))
}

pub(crate) fn entropy_unchecked(u: &DVector<f64>) -> f64 {
    -u.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `tau ln sum exp(y/tau)`, the value of `max_u {u^T y + tau nu(u)}`.
pub fn smoothed_max(y: &DVector<f64>, tau: f64) -> f64 {
    let m = y.max();
    m + tau * y.iter().map(|v| ((v - m) / tau).exp()).sum::<f64>().ln()
}

fn check_step(tau: f64, beta: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("step {beta} outside [0,1]")));
    }
    Ok(())
}

/// Simultaneous smoothed best-response step in policy space.
pub fn sbr_policy_step(
    state: &DynamicsState,
    pair: &MatrixGamePair,
    tau: f64,
    beta: f64,
) -> Result<DynamicsState> {
    check_step(tau, beta)?;
    state.check(pair)?;
    let br1 = softmax_unchecked(&(pair.x1() * &state.x2), tau);
    let br2 = softmax_unchecked(&(pair.x2() * &state.x1), tau);
    Ok(DynamicsState {
        x1: &state.x1 + (br1 - &state.x1) * beta,
        x2: &state.x2 + (br2 - &state.x2) * beta,
    })
}

/// Parameter-space step `x_i += beta (X_i softmax(x_{-i}) - x_i + noise_i)`.
pub fn param_step(
    state: &DynamicsState,
    pair: &MatrixGamePair,
    tau: f64,
    beta: f64,
    noise: (&DVector<f64>, &DVector<f64>),
) -> Result<DynamicsState> {
    check_step(tau, beta)?;
    state.check(pair)?;
    crate::error::check_dim("first noise length", state.x1.len(), noise.0.len())?;
    crate::error::check_dim("second noise length", state.x2.len(), noise.1.len())?;
    let [d1, d2] = param_direction(state, pair, tau, noise);
    Ok(DynamicsState {
        x1: &state.x1 + d1 * beta,
        x2: &state.x2 + d2 * beta,
    })
}

pub(crate) fn param_direction(
    state: &DynamicsState,
    pair: &MatrixGamePair,
    tau: f64,
    noise: (&DVector<f64>, &DVector<f64>),
) -> [DVector<f64>; 2] {
    let d1 = pair.x1() * softmax_unchecked(&state.x2, tau) - &state.x1 + noise.0;
    let d2 = pair.x2() * softmax_unchecked(&state.x1, tau) - &state.x2 + noise.1;
    [d1, d2]
}

/// Entropy-regularized Nash gap of the mixed pair `(pi1, pi2)`.
pub fn regularized_nash_gap(
    pi1: &DVector<f64>,
    pi2: &DVector<f64>,
    pair: &MatrixGamePair,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    DynamicsState::new(pi1.clone(), pi2.clone()).check(pair)?;
    check_simplex(pi1)?;
    check_simplex(pi2)?;
    let mut gap = 0.0;
    for (own, opp, x) in [(pi1, pi2, pair.x1()), (pi2, pi1, pair.x2())] {
        let payoff = x * opp;
        gap += smoothed_max(&payoff, tau) - own.dot(&payoff) - tau * entropy_unchecked(own);
    }
    Ok(gap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGameSolution {
    pub value: f64,
    /// Maximizing (row) player's optimal mixed strategy.
    pub maximin: DVector<f64>,
    /// Minimizing (column) player's optimal mixed strategy.
    pub minimax: DVector<f64>,
    /// `max_i (X q)_i - min_j (p^T X)_j`; zero at an exact equilibrium.
    pub certificate_gap: f64,
}

/// Value and optimal strategies of the zero-sum matrix game where the row
/// player maximizes `p^T X q`.
pub fn matrix_game_value(x: &DMatrix<f64>) -> Result<MatrixGameSolution> {
    let (n, m) = x.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter("empty payoff matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite payoff entry".into()));
    }
    // Shift so every entry is at least one; the game value moves by the same shift.
    let shift = 1.0 - x.min();
    let shifted = x.add_scalar(shift);

    // Row player: min 1^T u  s.t. shifted^T u >= 1, u >= 0.
    let row_cons: Vec<Constraint> = (0..m)
        .map(|j| Constraint {
            coeffs: shifted.column(j).iter().copied().collect(),
            relation: Relation::Ge,
            rhs: 1.0,
        })
        .collect();
    let row = lp::maximize(&vec![-1.0; n], &row_cons)?;

    // Column player: max 1^T v  s.t. shifted v <= 1, v >= 0.
    let col_cons: Vec<Constraint> = (0..n)
        .map(|i| Constraint {
            coeffs: shifted.row(i).iter().copied().collect(),
            relation: Relation::Le,
            rhs: 1.0,
        })
        .collect();
    let col = lp::maximize(&vec![1.0; m], &col_cons)?;

    let maximin = to_strategy(&row.x)?;
    let minimax = to_strategy(&col.x)?;
    let lower = (maximin.transpose() * x).min();
    let upper = (x * &minimax).max();
    Ok(MatrixGameSolution {
        value: 0.5 * (lower + upper),
        maximin,
        minimax,
        certificate_gap: upper - lower,
    })
}

fn to_strategy(raw: &[f64]) -> Result<DVector<f64>> {
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NotConverged {
            what: "matrix game linear program",
            iterations: 0,
        });
    }
    Ok(DVector::from_iterator(raw.len(), raw.iter().map(|v| v.max(0.0) / total)))
}
