//! Softmax policies over linear features.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{FeatureMap, PlayerFeatures};
use crate::game::Player;

const SIMPLEX_TOL: f64 = 1e-12;
const FORMAT_TAG: &str = "zsq-policy-1";

/// `exp(x/tau) / sum exp(x/tau)`, evaluated after subtracting the max.
pub fn softmax_tau(x: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    Ok(softmax_unchecked(x, tau))
}

pub(crate) fn softmax_unchecked(x: &DVector<f64>, tau: f64) -> DVector<f64> {
    let m = x.max();
    let mut e = x.map(|v| ((v - m) / tau).exp());
    let z = e.sum();
    e /= z;
    e
}

/// Smallest probability a softmax over `n_actions` logits in `[-bound, bound]` can assign.
pub fn softmax_floor(n_actions: usize, logit_bound: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (n_actions as f64 - 1.0) * (2.0 * logit_bound / tau).exp())
}

/// Largest logit bound whose `softmax_floor` is still at least `floor`.
/// Infinite for a single action, zero when `floor >= 1/n_actions`.
pub fn floor_radius(n_actions: usize, tau: f64, floor: f64) -> f64 {
    if n_actions <= 1 {
        return f64::INFINITY;
    }
    let ratio = (1.0 / floor - 1.0) / (n_actions as f64 - 1.0);
    (0.5 * tau * ratio.ln()).max(0.0)
}

/// One player's policy: row `s` is the distribution over actions at state `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for (s, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidParameter(format!("negative probability at state {s}")));
            }
            if (row.sum() - 1.0).abs() > SIMPLEX_TOL * probs.ncols() as f64 {
                return Err(Error::InvalidParameter(format!(
                    "policy row {s} sums to {}",
                    row.sum()
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidParameter("ragged policy rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), n_actions, &flat))
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// `softmax_tau(Phi_s theta)` at every state.
    pub fn softmax(features: &PlayerFeatures, theta: &DVector<f64>, tau: f64) -> Result<Self> {
        crate::error::check_dim("theta length", features.dim(), theta.len())?;
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
        }
        let mut probs = DMatrix::zeros(features.n_states(), features.n_actions());
        for s in 0..features.n_states() {
            let pi = softmax_unchecked(&features.state_values(s, theta), tau);
            probs.row_mut(s).copy_from(&pi.transpose());
        }
        Ok(Self { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn at(&self, s: usize) -> DVector<f64> {
        self.probs.row(s).transpose()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    players: [Policy; 2],
}

impl JointPolicy {
    pub fn new(one: Policy, two: Policy) -> Result<Self> {
        crate::error::check_dim("policy state count", one.n_states(), two.n_states())?;
        Ok(Self { players: [one, two] })
    }

    pub fn uniform(n_states: usize, n_actions: [usize; 2]) -> Self {
        Self {
            players: [
                Policy::uniform(n_states, n_actions[0]),
                Policy::uniform(n_states, n_actions[1]),
            ],
        }
    }

    pub fn player(&self, p: Player) -> &Policy {
        &self.players[p.index()]
    }

    pub fn n_states(&self) -> usize {
        self.players[0].n_states()
    }

    pub fn n_actions(&self) -> [usize; 2] {
        [self.players[0].n_actions(), self.players[1].n_actions()]
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "format {FORMAT_TAG}\nstates {}\nactions {} {}\n",
            self.n_states(),
            self.players[0].n_actions(),
            self.players[1].n_actions()
        );
        for (i, p) in self.players.iter().enumerate() {
            out.push_str(&format!("player {}\n", i + 1));
            for row in p.probs.row_iter() {
                let toks: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&toks.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut expect = |key: &str| -> Result<(usize, Vec<String>)> {
            let (ln, line) = lines.next().ok_or_else(|| perr(0, "unexpected end of policy file"))?;
            let toks: Vec<String> = line.split_whitespace().map(String::from).collect();
            if !key.is_empty() && toks.first().map(String::as_str) != Some(key) {
                return Err(perr(ln, &format!("expected `{key}`")));
            }
            Ok((ln, toks))
        };
        let (ln, fmt) = expect("format")?;
        if fmt.get(1).map(String::as_str) != Some(FORMAT_TAG) {
            return Err(perr(ln, "unsupported format tag"));
        }
        let (ln, st) = expect("states")?;
        let n_states: usize = st
            .get(1)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| perr(ln, "bad state count"))?;
        let (ln, ac) = expect("actions")?;
        let parse_count = |t: Option<&String>| t.and_then(|t| t.parse::<usize>().ok());
        let n_actions = match (parse_count(ac.get(1)), parse_count(ac.get(2))) {
            (Some(a), Some(b)) => [a, b],
            _ => return Err(perr(ln, "bad action counts")),
        };
        let mut players = Vec::with_capacity(2);
        for (i, &n) in n_actions.iter().enumerate() {
            let (ln, hdr) = expect("player")?;
            if hdr.get(1).map(String::as_str) != Some(&(i + 1).to_string()) {
                return Err(perr(ln, "player blocks out of order"));
            }
            let mut rows = Vec::with_capacity(n_states);
            for _ in 0..n_states {
                let (ln, toks) = expect("")?;
                let row = toks
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| perr(ln, "bad number")))
                    .collect::<Result<Vec<f64>>>()?;
                if row.len() != n {
                    return Err(perr(ln, "row length differs from action count"));
                }
                rows.push(row);
            }
            players.push(Policy::from_rows(&rows)?);
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

/// Softmax joint policy induced by per-player parameters.
pub fn policy_from_params(
    theta: [&DVector<f64>; 2],
    features: &FeatureMap,
    tau: f64,
) -> Result<JointPolicy> {
    JointPolicy::new(
        Policy::softmax(features.player(Player::One), theta[0], tau)?,
        Policy::softmax(features.player(Player::Two), theta[1], tau)?,
    )
}

/// Uniform draw from the Euclidean ball of radius `radius` in dimension `dim`.
pub fn sample_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if dim == 0 || norm == 0.0 {
        return DVector::zeros(dim);
    }
    let scale = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
    dir * (scale / norm)
}

/// Softmax joint policy with both parameter vectors drawn uniformly from the ball of radius `radius`.
pub fn sample_softmax_policy<R: Rng + ?Sized>(
    features: &FeatureMap,
    tau: f64,
    radius: f64,
    rng: &mut R,
) -> Result<JointPolicy> {
    let [d1, d2] = features.dims();
    let t1 = sample_ball(d1, radius, rng);
    let t2 = sample_ball(d2, radius, rng);
    policy_from_params([&t1, &t2], features, tau)
}
