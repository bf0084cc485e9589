//! Linear state-action features, one matrix per player.
//!
//! Row `s * |A| + a` of a player's matrix is the feature vector of `(s, a)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::Player;

const ROW_NORM_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;
const FORMAT_TAG: &str = "zsq-features-1";

/// Features of a single player.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerFeatures {
    n_states: usize,
    n_actions: usize,
    phi: DMatrix<f64>,
}

impl PlayerFeatures {
    pub fn new(n_states: usize, n_actions: usize, phi: DMatrix<f64>) -> Result<Self> {
        crate::error::check_dim("feature rows", n_states * n_actions, phi.nrows())?;
        if phi.ncols() == 0 || phi.ncols() > phi.nrows() {
            return Err(Error::InvalidParameter(format!(
                "feature dimension {} must lie in 1..={}",
                phi.ncols(),
                phi.nrows()
            )));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature entry".into()));
        }
        for (r, row) in phi.row_iter().enumerate() {
            if row.norm() > 1.0 + ROW_NORM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "feature row {r} has norm {} > 1",
                    row.norm()
                )));
            }
        }
        let sv = phi.clone().svd(false, false).singular_values;
        let smax = sv.max();
        if sv.min() <= RANK_TOL * smax.max(1.0) {
            return Err(Error::InvalidParameter(
                "feature columns are linearly dependent".into(),
            ));
        }
        Ok(Self { n_states, n_actions, phi })
    }

    /// Scales the whole matrix so the largest row norm is one, then validates.
    pub fn normalized(n_states: usize, n_actions: usize, raw: DMatrix<f64>) -> Result<Self> {
        let max_norm = raw.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        if max_norm == 0.0 {
            return Err(Error::InvalidParameter("all-zero feature matrix".into()));
        }
        Self::new(n_states, n_actions, raw / max_norm)
    }

    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        Self {
            n_states,
            n_actions,
            phi: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn row(&self, s: usize, a: usize) -> DVector<f64> {
        self.phi.row(s * self.n_actions + a).transpose()
    }

    /// `phi(s,a)^T w` without materializing the row.
    pub fn dot(&self, s: usize, a: usize, w: &DVector<f64>) -> f64 {
        let r = s * self.n_actions + a;
        (0..self.dim()).map(|j| self.phi[(r, j)] * w[j]).sum()
    }

    /// `Phi_s w`, the vector of action values at state `s`.
    pub fn state_values(&self, s: usize, w: &DVector<f64>) -> DVector<f64> {
        self.phi.rows(s * self.n_actions, self.n_actions) * w
    }

    /// Adds `scale * phi(s,a)` to `w` in place.
    pub fn axpy_row(&self, s: usize, a: usize, scale: f64, w: &mut DVector<f64>) {
        let r = s * self.n_actions + a;
        for j in 0..self.dim() {
            w[j] += scale * self.phi[(r, j)];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    players: [PlayerFeatures; 2],
}

impl FeatureMap {
    pub fn new(one: PlayerFeatures, two: PlayerFeatures) -> Result<Self> {
        crate::error::check_dim("feature state count", one.n_states, two.n_states)?;
        Ok(Self { players: [one, two] })
    }

    pub fn tabular(n_states: usize, n_actions: [usize; 2]) -> Self {
        Self {
            players: [
                PlayerFeatures::tabular(n_states, n_actions[0]),
                PlayerFeatures::tabular(n_states, n_actions[1]),
            ],
        }
    }

    pub fn player(&self, p: Player) -> &PlayerFeatures {
        &self.players[p.index()]
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.players[0].dim(), self.players[1].dim()]
    }

    pub fn check_game(&self, n_states: usize, n_actions: [usize; 2]) -> Result<()> {
        for p in Player::BOTH {
            let f = self.player(p);
            crate::error::check_dim("feature state count", n_states, f.n_states)?;
            crate::error::check_dim("feature action count", n_actions[p.index()], f.n_actions)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("format {FORMAT_TAG}\nstates {}\n", self.players[0].n_states);
        for (i, f) in self.players.iter().enumerate() {
            out.push_str(&format!("player {} actions {} dim {}\n", i + 1, f.n_actions, f.dim()));
            for row in f.phi.row_iter() {
                let toks: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&toks.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };

        let (ln, first) = lines.next().ok_or_else(|| perr(0, "empty feature file"))?;
        if first != format!("format {FORMAT_TAG}") {
            return Err(perr(ln, "unsupported format tag"));
        }
        let (ln, states) = lines.next().ok_or_else(|| perr(ln, "missing `states`"))?;
        let n_states = match states.split_whitespace().collect::<Vec<_>>()[..] {
            ["states", n] => n.parse::<usize>().map_err(|_| perr(ln, "bad state count"))?,
            _ => return Err(perr(ln, "expected `states <n>`")),
        };

        let mut players = Vec::with_capacity(2);
        for expected in 1..=2 {
            let (ln, header) = lines.next().ok_or_else(|| perr(0, "missing player block"))?;
            let toks: Vec<&str> = header.split_whitespace().collect();
            let (n_actions, dim) = match toks[..] {
                ["player", p, "actions", a, "dim", d] if p == expected.to_string() => (
                    a.parse::<usize>().map_err(|_| perr(ln, "bad action count"))?,
                    d.parse::<usize>().map_err(|_| perr(ln, "bad dimension"))?,
                ),
                _ => return Err(perr(ln, "expected `player <i> actions <n> dim <d>`")),
            };
            let rows = n_states * n_actions;
            let mut data = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| perr(0, "truncated feature rows"))?;
                let vals = row
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| perr(ln, "bad number")))
                    .collect::<Result<Vec<f64>>>()?;
                if vals.len() != dim {
                    return Err(perr(ln, "row length differs from dim"));
                }
                data.extend(vals);
            }
            players.push(PlayerFeatures::new(
                n_states,
                n_actions,
                DMatrix::from_row_slice(rows, dim, &data),
            )?);
        }
        let two = players.pop().expect("two blocks");
        let one = players.pop().expect("two blocks");
        Self::new(one, two)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
