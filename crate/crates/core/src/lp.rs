//! Small dense two-phase simplex solver.
//!
//! Sized for per-state matrix games and Chebyshev fits with a few dozen
//! variables. Bland's rule is used throughout, so it never cycles.

use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-12;
const ITERATION_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    objective: Vec<f64>,
    basis: Vec<usize>,
    n_cols: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.rows[r][self.n_cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[row].clone();
        for (r, other) in self.rows.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let f = other[col];
            if f != 0.0 {
                for (v, pv) in other.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                other[col] = 0.0;
            }
        }
        let f = self.objective[col];
        if f != 0.0 {
            for (v, pv) in self.objective.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            self.objective[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Maximizes; `objective` holds reduced costs `c_j - z_j` and `-z` in the last slot.
    fn optimize(&mut self, allowed: &[bool]) -> Result<()> {
        for _ in 0..ITERATION_CAP {
            let entering = (0..self.n_cols).find(|&j| allowed[j] && self.objective[j] > PIVOT_EPS);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][col];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(r) / a;
                    match leave {
                        None => leave = Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - PIVOT_EPS
                                || (ratio <= lratio + PIVOT_EPS && self.basis[r] < self.basis[lr])
                            {
                                leave = Some((r, ratio));
                            }
                        }
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(Error::InvalidParameter("linear program is unbounded".into()));
            };
            self.pivot(row, col);
        }
        Err(Error::NotConverged {
            what: "simplex",
            iterations: ITERATION_CAP,
        })
    }
}

/// Maximizes `c^T x` subject to `constraints` and `x >= 0`.
pub fn maximize(c: &[f64], constraints: &[Constraint]) -> Result<LpSolution> {
    let n = c.len();
    let m = constraints.len();
    for con in constraints {
        crate::error::check_dim("constraint width", n, con.coeffs.len())?;
    }

    // Normalize to nonnegative right-hand sides.
    let normalized: Vec<(Vec<f64>, Relation, f64)> = constraints
        .iter()
        .map(|con| {
            if con.rhs < 0.0 {
                let rel = match con.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                (con.coeffs.iter().map(|v| -v).collect(), rel, -con.rhs)
            } else {
                (con.coeffs.clone(), con.relation, con.rhs)
            }
        })
        .collect();

    let n_slack = normalized.iter().filter(|(_, r, _)| *r != Relation::Eq).count();
    let n_art = normalized.iter().filter(|(_, r, _)| *r != Relation::Le).count();
    let n_cols = n + n_slack + n_art;
    let mut rows = vec![vec![0.0; n_cols + 1]; m];
    let mut basis = vec![0; m];
    let mut is_artificial = vec![false; n_cols];
    let (mut slack_at, mut art_at) = (n, n + n_slack);
    for (r, (coeffs, rel, rhs)) in normalized.iter().enumerate() {
        rows[r][..n].copy_from_slice(coeffs);
        rows[r][n_cols] = *rhs;
        match rel {
            Relation::Le => {
                rows[r][slack_at] = 1.0;
                basis[r] = slack_at;
                slack_at += 1;
            }
            Relation::Ge => {
                rows[r][slack_at] = -1.0;
                slack_at += 1;
                rows[r][art_at] = 1.0;
                is_artificial[art_at] = true;
                basis[r] = art_at;
                art_at += 1;
            }
            Relation::Eq => {
                rows[r][art_at] = 1.0;
                is_artificial[art_at] = true;
                basis[r] = art_at;
                art_at += 1;
            }
        }
    }

    let mut tab = Tableau {
        rows,
        objective: vec![0.0; n_cols + 1],
        basis,
        n_cols,
    };

    if n_art > 0 {
        // Phase one: maximize minus the sum of artificials.
        let mut obj = vec![0.0; n_cols + 1];
        for (r, row) in tab.rows.iter().enumerate() {
            if is_artificial[tab.basis[r]] {
                for (o, v) in obj.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for j in 0..n_cols {
            if is_artificial[j] {
                obj[j] = 0.0;
            }
        }
        tab.objective = obj;
        tab.optimize(&vec![true; n_cols])?;
        let infeasibility = tab.objective[n_cols];
        let scale = 1.0 + normalized.iter().map(|(_, _, b)| b.abs()).fold(0.0, f64::max);
        if infeasibility > 1e-9 * scale {
            return Err(Error::InvalidParameter("linear program is infeasible".into()));
        }
        // Drive remaining artificials out of the basis or drop redundant rows.
        let mut r = 0;
        while r < tab.rows.len() {
            if is_artificial[tab.basis[r]] {
                let col = (0..n_cols)
                    .find(|&j| !is_artificial[j] && tab.rows[r][j].abs() > PIVOT_EPS);
                match col {
                    Some(j) => tab.pivot(r, j),
                    None => {
                        tab.rows.remove(r);
                        tab.basis.remove(r);
                        continue;
                    }
                }
            }
            r += 1;
        }
    }

    // Phase two.
    let mut obj = vec![0.0; n_cols + 1];
    obj[..n].copy_from_slice(c);
    for (r, row) in tab.rows.iter().enumerate() {
        let cb = if tab.basis[r] < n { c[tab.basis[r]] } else { 0.0 };
        if cb != 0.0 {
            for (o, v) in obj.iter_mut().zip(row) {
                *o -= cb * v;
            }
        }
    }
    tab.objective = obj;
    let allowed: Vec<bool> = (0..n_cols).map(|j| !is_artificial[j]).collect();
    tab.optimize(&allowed)?;

    let mut x = vec![0.0; n];
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rhs(r).max(0.0);
        }
    }
    let objective = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    Ok(LpSolution { x, objective })
}
