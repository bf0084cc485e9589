//! Command-line interface and the subcommands behind it.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;
use zsq_core::chain::{excitation_estimate, feature_excitation, induced_chain, mixing_time, stationary_distribution};
use zsq_core::dynamics::{drift_check, param_trajectory, DynamicsState, EnvelopeConfig, MatrixGamePair};
use zsq_core::game::{random_game, GarnetSpec, Player};
use zsq_core::learner::{run, Monitor, RunConfig};
use zsq_core::oracles::{completeness_residual, minimax_value_iteration, nash_gap_report, uniform_distribution};
use zsq_core::policy::{sample_ball, sample_softmax_policy, JointPolicy};

use crate::config::{load_features, load_game, ConfigFile, ExperimentConfig};
use crate::csv_out::{Cell, DIAGNOSE, DIAGNOSTICS, DRIFT, DRIFT_SUMMARY, GAP, STATIONARY, VALUES, VI_LOG};
use crate::error::{HarnessError, Result};
use crate::output::{output_dir, OutputSet};

#[derive(Debug, Parser)]
#[command(name = "zsq", version, about = "Two-timescale Q-learning experiments for zero-sum stochastic games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random game and save it.
    Gen(GenArgs),
    /// Minimax value iteration for both players.
    Vi(ViArgs),
    /// Nash gap of a saved joint policy.
    Gap(GapArgs),
    /// Run the two-timescale learner.
    Learn(LearnArgs),
    /// Audit the Lyapunov drift inequality on random matrix games.
    Drift(DriftArgs),
    /// Excitation, mixing and completeness estimates for a game.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub states: usize,
    #[arg(long, num_args = 2, value_names = ["A1", "A2"])]
    pub actions: Vec<usize>,
    /// Successor states per (state, action pair); defaults to min(states, 2).
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Game file to write.
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ViArgs {
    pub game: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GapArgs {
    pub game: PathBuf,
    pub policy: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Game file; may instead come from the config file.
    pub game: Option<PathBuf>,
    /// Flat TOML config; command-line flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "T")]
    pub outer: Option<usize>,
    #[arg(long = "K")]
    pub inner: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "M")]
    pub radius: Option<f64>,
    /// Excitation bound used for the regime warnings; estimated when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub start_state: Option<usize>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub instrumented: bool,
    #[arg(long)]
    pub gap_every: Option<usize>,
    #[arg(long)]
    pub record_every: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl LearnArgs {
    fn to_config(&self) -> ConfigFile {
        ConfigFile {
            game: self.game.clone(),
            features: self.features.clone(),
            outer: self.outer,
            inner: self.inner,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            radius: self.radius,
            lambda: self.lambda,
            seed: self.seed,
            start_state: self.start_state,
            instrumented: self.instrumented.then_some(true),
            gap_every: self.gap_every,
            record_every: self.record_every,
            output_dir: self.out_dir.clone(),
            ..ConfigFile::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DriftArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Square games of this size; random sizes in 2..=4 when absent.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Standard deviation of Gaussian noise added to every update.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    pub game: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Parameter radius of the sampled policies; defaults to 1/(1-gamma).
    #[arg(long = "M")]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.25)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Vi(a) => vi(&a),
        Command::Gap(a) => gap(&a),
        Command::Learn(a) => learn(&a),
        Command::Drift(a) => drift(&a),
        Command::Diagnose(a) => diagnose(&a),
    }
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(HarnessError::config(msg()))
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    require(args.states > 0, || "--states must be positive".into())?;
    require(args.actions.len() == 2 && args.actions.iter().all(|&a| a > 0), || {
        "--actions takes two positive counts".into()
    })?;
    let branching = args.branching.unwrap_or(args.states.min(2));
    require((1..=args.states).contains(&branching), || {
        format!("--branching must lie in 1..={}", args.states)
    })?;
    require((0.0..1.0).contains(&args.gamma), || "--gamma must lie in [0, 1)".into())?;
    let spec = GarnetSpec {
        n_states: args.states,
        n_actions: [args.actions[0], args.actions[1]],
        branching,
        gamma: args.gamma,
    };
    let game = random_game(&spec, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let mut out = OutputSet::create(output_dir(args.out_dir.as_deref(), "gen"), "gen")?;
    out.write_external(&args.output, &game.to_text())?;
    log::info!("wrote {}", args.output.display());
    out.finish(args, Some(args.seed), json!({ "game": args.output }))?;
    Ok(())
}

fn vi(args: &ViArgs) -> Result<()> {
    require(args.tol > 0.0, || "--tol must be positive".into())?;
    let game = load_game(&args.game)?;
    let mut out = OutputSet::create(output_dir(args.out_dir.as_deref(), "vi"), "vi")?;
    let one = minimax_value_iteration(&game, Player::One, args.tol)?;
    let two = minimax_value_iteration(&game, Player::Two, args.tol)?;
    out.write_csv(
        "values.csv",
        &VALUES,
        (0..game.n_states()).map(|s| vec![s.into(), one.value[s].into(), two.value[s].into()]),
    )?;
    let log_rows = [(1usize, &one), (2, &two)].into_iter().flat_map(|(p, r)| {
        r.residuals
            .iter()
            .enumerate()
            .map(move |(i, &res)| vec![p.into(), (i + 1).into(), res.into()])
    });
    out.write_csv("iterations.csv", &VI_LOG, log_rows)?;
    let sum = (&one.value + &two.value).amax();
    log::info!("iterations {} / {}, max |v1 + v2| = {sum:e}", one.iterations, two.iterations);
    out.finish(
        args,
        None,
        json!({
            "iterations": [one.iterations, two.iterations],
            "max_abs_value_sum": sum,
            "max_certificate_gap": one.max_certificate_gap.max(two.max_certificate_gap),
        }),
    )?;
    Ok(())
}

fn gap(args: &GapArgs) -> Result<()> {
    require(args.tol > 0.0, || "--tol must be positive".into())?;
    let game = load_game(&args.game)?;
    let policy = JointPolicy::load(&args.policy)
        .map_err(|e| HarnessError::config(format!("policy file {}: {e}", args.policy.display())))?;
    require(
        policy.n_states() == game.n_states() && policy.n_actions() == game.n_actions(),
        || "policy shape does not match the game".into(),
    )?;
    let mut out = OutputSet::create(output_dir(args.out_dir.as_deref(), "gap"), "gap")?;
    let report = nash_gap_report(&game, &policy, &uniform_distribution(game.n_states()), args.tol)?;
    out.write_csv(
        "gap.csv",
        &GAP,
        [vec![report.per_player[0].into(), report.per_player[1].into(), report.total.into()]],
    )?;
    log::info!("Nash gap {}", report.total);
    out.finish(args, None, json!({ "nash_gap": report.total }))?;
    Ok(())
}

fn learn(args: &LearnArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let cfg = ExperimentConfig::resolve(base.overlay(args.to_config()))?;
    let game = cfg.game.load()?;
    let features = load_features(cfg.features.as_deref(), &game)?;
    let max_actions = game.n_actions()[0].max(game.n_actions()[1]);
    let radius = cfg.effective_radius(max_actions)?;
    let run_cfg = cfg.run_config(radius);
    require(cfg.start_state < game.n_states(), || {
        format!("start_state {} out of range", cfg.start_state)
    })?;

    let mut out = OutputSet::create(output_dir(cfg.output_dir.as_deref(), &cfg.suite), "learn")?;
    let lambda = match cfg.lambda {
        Some(l) => Some(l),
        None => {
            // Separate stream so the estimate never shifts the learner's draws.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            match excitation_estimate(&game, &features, cfg.tau, radius, 16, &mut rng) {
                Ok(e) => Some(e[0].min(e[1])),
                Err(e) => {
                    out.warn(format!("excitation estimate unavailable: {e}"));
                    None
                }
            }
        }
    };
    for w in run_cfg.warnings(game.gamma(), lambda) {
        out.warn(w);
    }

    let mut monitor = if cfg.instrumented {
        Monitor::instrumented(&game, cfg.tau)?
    } else {
        Monitor::default()
    };
    monitor.gap_every = cfg.gap_every.unwrap_or(0);
    monitor.record_every = cfg.record_every.unwrap_or(0);

    let result = run(&game, &features, &run_cfg, &monitor, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    out.write_records("diagnostics.csv", &DIAGNOSTICS, &result.records)?;
    out.write_text("policy.txt", &result.policy.to_text())?;
    let final_gap = result.records.iter().rev().find_map(|r| r.nash_gap);
    if let Some(g) = final_gap {
        log::info!("final Nash gap {g}");
    }
    out.finish(
        &cfg,
        Some(cfg.seed),
        json!({ "M": radius, "lambda": lambda, "final_nash_gap": final_gap, "records": result.records.len() }),
    )?;
    Ok(())
}

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn drift(args: &DriftArgs) -> Result<()> {
    require(args.trials > 0, || "--trials must be positive".into())?;
    require(args.tau > 0.0, || "--tau must be positive".into())?;
    require(args.beta > 0.0 && args.beta <= 1.0, || "--beta must lie in (0, 1]".into())?;
    require(args.noise >= 0.0, || "--noise must be nonnegative".into())?;
    if let Some(size) = args.size {
        require(size > 0, || "--size must be positive".into())?;
    }
    let mut out = OutputSet::create(output_dir(args.out_dir.as_deref(), "drift"), "drift")?;
    let cfg = EnvelopeConfig::new(args.tau);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut summary = Vec::with_capacity(args.trials);
    let (mut satisfied, mut total, mut min_slack) = (0usize, 0usize, f64::INFINITY);
    for trial in 0..args.trials {
        let (n, m) = match args.size {
            Some(s) => (s, s),
            None => (rng.gen_range(2..=4), rng.gen_range(2..=4)),
        };
        let pair = MatrixGamePair::zero_sum(uniform_matrix(&mut rng, n, m));
        let start = DynamicsState::new(
            DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
            DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0)),
        );
        let noise: Vec<_> = (0..args.steps)
            .map(|_| (gaussian(&mut rng, n, args.noise), gaussian(&mut rng, m, args.noise)))
            .collect();
        let trajectory = param_trajectory(&start, &pair, args.tau, args.beta, &noise)?;
        let report = drift_check(&trajectory, &noise, &pair, &cfg, args.beta)?;
        out.write_records(&format!("trials/trial_{trial:03}.csv"), &DRIFT, &report.rows)?;
        let ok = report.satisfied_count();
        satisfied += ok;
        total += report.rows.len();
        min_slack = min_slack.min(report.min_slack());
        summary.push(vec![
            trial.into(),
            n.into(),
            m.into(),
            report.rows.len().into(),
            ok.into(),
            report.min_slack().into(),
            report.update_bound.into(),
        ]);
    }
    out.write_csv("summary.csv", &DRIFT_SUMMARY, summary)?;
    if satisfied < total {
        out.warn(format!("{} of {total} steps violate the drift inequality", total - satisfied));
    }
    log::info!("{satisfied}/{total} steps satisfied, min slack {min_slack:e}");
    out.finish(
        args,
        Some(args.seed),
        json!({ "steps": total, "satisfied": satisfied, "min_slack": min_slack }),
    )?;
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    require(args.tau > 0.0, || "--tau must be positive".into())?;
    require(args.delta > 0.0 && args.delta < 1.0, || "--delta must lie in (0, 1)".into())?;
    let game = load_game(&args.game)?;
    let features = load_features(args.features.as_deref(), &game)?;
    let r = RunConfig::truncation_radius(game.gamma());
    let radius = args.radius.unwrap_or(r);
    require(radius >= 0.0 && radius.is_finite(), || "--M must be finite and nonnegative".into())?;
    let mut out = OutputSet::create(output_dir(args.out_dir.as_deref(), "diagnose"), "diagnose")?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let uniform = JointPolicy::uniform(game.n_states(), game.n_actions());
    let chain = induced_chain(&game, &uniform)?;
    let stationary = stationary_distribution(&chain)?;
    let mixing = mixing_time(&chain, args.delta)?;
    let base = feature_excitation(&features, &uniform, &stationary)?;
    let estimate = excitation_estimate(&game, &features, args.tau, radius, args.samples, &mut rng)?;

    let mut residual = [0.0f64; 2];
    for _ in 0..args.samples {
        let policy = sample_softmax_policy(&features, args.tau, radius, &mut rng)?;
        for p in Player::BOTH {
            let f = features.player(p);
            let w_tilde = sample_ball(f.dim(), radius.max(r), &mut rng);
            let res = completeness_residual(&game, f, &policy, &w_tilde, p, r)?;
            residual[p.index()] = residual[p.index()].max(res);
        }
    }

    let player_rows = |name: &str, vals: [f64; 2]| {
        (0..2)
            .map(|i| vec![name.into(), (i + 1).into(), vals[i].into()])
            .collect::<Vec<_>>()
    };
    let mut rows = player_rows("excitation_uniform", base);
    rows.extend(player_rows("excitation_estimate", estimate));
    rows.extend(player_rows("completeness_residual_max", residual));
    rows.push(vec!["mixing_time_uniform".into(), Cell::Missing, (mixing as f64).into()]);
    out.write_csv("diagnose.csv", &DIAGNOSE, rows)?;
    out.write_csv(
        "stationary.csv",
        &STATIONARY,
        stationary.iter().enumerate().map(|(s, &p)| vec![s.into(), p.into()]),
    )?;
    out.finish(
        args,
        Some(args.seed),
        json!({
            "excitation_estimate": estimate,
            "mixing_time_uniform": mixing,
            "completeness_residual_max": residual,
        }),
    )?;
    Ok(())
}

/// Runs the parsed command and maps failures to exit codes.
pub fn main_with(cli: Cli) -> u8 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
