//! Finite two-player zero-sum stochastic games.
//!
//! Only player one's reward is stored; player two's payoff is its negation.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;
const FORMAT_TAG: &str = "zsq-game-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub const BOTH: [Player; 2] = [Player::One, Player::Two];

    pub fn opponent(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticGame {
    n_states: usize,
    n_actions: [usize; 2],
    /// Indexed by `(s, a1, a2)` in row-major order.
    reward1: Vec<f64>,
    /// Indexed by `(s, a1, a2, s')` in row-major order.
    transition: Vec<f64>,
    gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TransitionNotStochastic { state: usize, a1: usize, a2: usize, sum: f64 },
    NegativeProbability { state: usize, a1: usize, a2: usize, next: usize },
    RewardOutOfRange { state: usize, a1: usize, a2: usize, value: f64 },
    DiscountOutOfRange(f64),
    NonFinite,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TransitionNotStochastic { state, a1, a2, sum } => write!(
                f,
                "transition not stochastic at (s={state}, a1={a1}, a2={a2}): row sums to {sum}"
            ),
            Violation::NegativeProbability { state, a1, a2, next } => write!(
                f,
                "negative transition probability at (s={state}, a1={a1}, a2={a2}, s'={next})"
            ),
            Violation::RewardOutOfRange { state, a1, a2, value } => write!(
                f,
                "reward out of [-1,1] at (s={state}, a1={a1}, a2={a2}): {value}"
            ),
            Violation::DiscountOutOfRange(g) => write!(f, "discount {g} outside [0,1)"),
            Violation::NonFinite => write!(f, "non-finite entry"),
        }
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: usize,
    pub reward1: f64,
    pub reward2: f64,
}

impl StochasticGame {
    /// Builds a game from flat row-major arrays. Shapes are checked here;
    /// value constraints are reported by [`StochasticGame::validate`].
    pub fn new(
        n_states: usize,
        n_actions: [usize; 2],
        reward1: Vec<f64>,
        transition: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions[0] == 0 || n_actions[1] == 0 {
            return Err(Error::InvalidParameter(
                "state and action counts must be positive".into(),
            ));
        }
        let cells = n_states * n_actions[0] * n_actions[1];
        crate::error::check_dim("reward tensor length", cells, reward1.len())?;
        crate::error::check_dim("transition tensor length", cells * n_states, transition.len())?;
        Ok(Self {
            n_states,
            n_actions,
            reward1,
            transition,
            gamma,
        })
    }

    /// A one-state game with the given payoff matrix for player one.
    pub fn single_state(payoff: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        let (n1, n2) = payoff.shape();
        let mut reward = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            for j in 0..n2 {
                reward.push(payoff[(i, j)]);
            }
        }
        Self::new(1, [n1, n2], reward, vec![1.0; n1 * n2], gamma)
    }

    /// Single-state matching pennies.
    pub fn matching_pennies(gamma: f64) -> Self {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        Self::single_state(&x, gamma).expect("static shape")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> [usize; 2] {
        self.n_actions
    }

    pub fn actions_of(&self, player: Player) -> usize {
        self.n_actions[player.index()]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Truncation radius `1/(1-gamma)`.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    fn cell(&self, s: usize, a1: usize, a2: usize) -> usize {
        (s * self.n_actions[0] + a1) * self.n_actions[1] + a2
    }

    pub fn reward1(&self, s: usize, a1: usize, a2: usize) -> f64 {
        self.reward1[self.cell(s, a1, a2)]
    }

    /// Payoff to `player` when it plays `own` and the opponent plays `opp`.
    pub fn reward(&self, player: Player, s: usize, own: usize, opp: usize) -> f64 {
        match player {
            Player::One => self.reward1(s, own, opp),
            Player::Two => -self.reward1(s, opp, own),
        }
    }

    pub fn transition_row(&self, s: usize, a1: usize, a2: usize) -> &[f64] {
        let start = self.cell(s, a1, a2) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Transition row indexed from `player`'s point of view.
    pub fn transition_row_for(&self, player: Player, s: usize, own: usize, opp: usize) -> &[f64] {
        match player {
            Player::One => self.transition_row(s, own, opp),
            Player::Two => self.transition_row(s, opp, own),
        }
    }

    /// Player one's payoff matrix at state `s`, shape `|A1| x |A2|`.
    pub fn payoff_matrix(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_actions[0], self.n_actions[1], |i, j| self.reward1(s, i, j))
    }

    pub fn reward_slice(&self) -> &[f64] {
        &self.reward1
    }

    pub fn transition_slice(&self) -> &[f64] {
        &self.transition
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            out.push(Violation::DiscountOutOfRange(self.gamma));
        }
        if self.reward1.iter().chain(&self.transition).any(|x| !x.is_finite())
            || !self.gamma.is_finite()
        {
            out.push(Violation::NonFinite);
            return out;
        }
        for s in 0..self.n_states {
            for a1 in 0..self.n_actions[0] {
                for a2 in 0..self.n_actions[1] {
                    let value = self.reward1(s, a1, a2);
                    if value.abs() > 1.0 {
                        out.push(Violation::RewardOutOfRange { state: s, a1, a2, value });
                    }
                    let row = self.transition_row(s, a1, a2);
                    if let Some(next) = row.iter().position(|&p| p < 0.0) {
                        out.push(Violation::NegativeProbability { state: s, a1, a2, next });
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > STOCHASTIC_TOL {
                        out.push(Violation::TransitionNotStochastic { state: s, a1, a2, sum });
                    }
                }
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Draws the next state by inverse CDF and returns both payoffs.
    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        s: usize,
        a1: usize,
        a2: usize,
        rng: &mut R,
    ) -> Result<Step> {
        if s >= self.n_states || a1 >= self.n_actions[0] || a2 >= self.n_actions[1] {
            return Err(Error::InvalidParameter(format!(
                "index out of range: (s={s}, a1={a1}, a2={a2})"
            )));
        }
        let u: f64 = rng.gen();
        let next_state = sample_index(self.transition_row(s, a1, a2), u);
        let reward1 = self.reward1(s, a1, a2);
        Ok(Step {
            next_state,
            reward1,
            reward2: -reward1,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("format {FORMAT_TAG}\n"));
        out.push_str(&format!("states {}\n", self.n_states));
        out.push_str(&format!("actions {} {}\n", self.n_actions[0], self.n_actions[1]));
        out.push_str(&format!("gamma {:?}\n", self.gamma));
        out.push_str("reward\n");
        for row in self.reward1.chunks(self.n_actions[1]) {
            push_row(&mut out, row);
        }
        out.push_str("transition\n");
        for row in self.transition.chunks(self.n_states) {
            push_row(&mut out, row);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_states = None;
        let mut n_actions = None;
        let mut gamma = None;
        let mut format_seen = false;
        let mut section: Option<&str> = None;
        let mut reward = Vec::new();
        let mut transition = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or_default();
            match head {
                "reward" | "transition" => {
                    section = Some(if head == "reward" { "reward" } else { "transition" });
                    if parts.next().is_some() {
                        return Err(parse_err(line_no, "section marker takes no values"));
                    }
                }
                _ if section.is_some() => {
                    let target = if section == Some("reward") {
                        &mut reward
                    } else {
                        &mut transition
                    };
                    for tok in line.split_whitespace() {
                        target.push(parse_f64(tok, line_no)?);
                    }
                }
                "format" => {
                    if parts.next() != Some(FORMAT_TAG) {
                        return Err(parse_err(line_no, "unsupported format tag"));
                    }
                    format_seen = true;
                }
                "states" => n_states = Some(parse_usize(parts.next(), line_no)?),
                "actions" => {
                    let a1 = parse_usize(parts.next(), line_no)?;
                    let a2 = parse_usize(parts.next(), line_no)?;
                    n_actions = Some([a1, a2]);
                }
                "gamma" => {
                    let tok = parts.next().ok_or_else(|| parse_err(line_no, "missing value"))?;
                    gamma = Some(parse_f64(tok, line_no)?);
                }
                other => return Err(parse_err(line_no, &format!("unknown key `{other}`"))),
            }
        }
        if !format_seen {
            return Err(parse_err(0, "missing format line"));
        }
        let n_states = n_states.ok_or_else(|| parse_err(0, "missing `states`"))?;
        let n_actions = n_actions.ok_or_else(|| parse_err(0, "missing `actions`"))?;
        let gamma = gamma.ok_or_else(|| parse_err(0, "missing `gamma`"))?;
        Self::new(n_states, n_actions, reward, transition, gamma)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Inverse-CDF draw from a probability vector with a single uniform `u` in `[0,1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

fn push_row(out: &mut String, row: &[f64]) {
    let tokens: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
    out.push_str(&tokens.join(" "));
    out.push('\n');
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, &format!("bad number `{tok}`")))
}

fn parse_usize(tok: Option<&str>, line: usize) -> Result<usize> {
    let tok = tok.ok_or_else(|| parse_err(line, "missing value"))?;
    tok.parse::<usize>()
        .map_err(|_| parse_err(line, &format!("bad count `{tok}`")))
}

/// Sizes for the fixed-branching random game generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarnetSpec {
    pub n_states: usize,
    pub n_actions: [usize; 2],
    pub branching: usize,
    pub gamma: f64,
}

/// Random game where every `(s, a1, a2)` reaches exactly `branching` states
/// with Dirichlet(1) weights, and rewards are uniform on `[-1, 1]`.
pub fn random_game<R: Rng + ?Sized>(spec: &GarnetSpec, rng: &mut R) -> Result<StochasticGame> {
    if spec.n_states == 0 || spec.n_actions[0] == 0 || spec.n_actions[1] == 0 {
        return Err(Error::InvalidParameter("sizes must be positive".into()));
    }
    if spec.branching == 0 || spec.branching > spec.n_states {
        return Err(Error::InvalidParameter(format!(
            "branching {} must lie in 1..={}",
            spec.branching, spec.n_states
        )));
    }
    if !(0.0..1.0).contains(&spec.gamma) {
        return Err(Error::InvalidParameter(format!("gamma {} outside [0,1)", spec.gamma)));
    }
    let cells = spec.n_states * spec.n_actions[0] * spec.n_actions[1];
    let mut reward = Vec::with_capacity(cells);
    let mut transition = vec![0.0; cells * spec.n_states];
    for cell in 0..cells {
        reward.push(rng.gen_range(-1.0..=1.0));
        let targets = rand::seq::index::sample(rng, spec.n_states, spec.branching);
        let weights: Vec<f64> = (0..spec.branching)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln() + f64::MIN_POSITIVE)
            .collect();
        let total: f64 = weights.iter().sum();
        let row = &mut transition[cell * spec.n_states..(cell + 1) * spec.n_states];
        for (target, w) in targets.iter().zip(&weights) {
            row[target] = w / total;
        }
        renormalize(row);
    }
    StochasticGame::new(spec.n_states, spec.n_actions, reward, transition, spec.gamma)
}

// Pushes any floating residue of the row sum onto its largest entry.
fn renormalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    row[imax] += 1.0 - sum;
}
