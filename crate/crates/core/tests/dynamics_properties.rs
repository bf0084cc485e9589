use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsq_core::dynamics::{
    drift_check, lyapunov_grad, lyapunov_parts, lyapunov_v, matrix_game_value, param_step,
    param_trajectory, prox_p, prox_p_mirror_descent, regularized_nash_gap, sbr_policy_step,
    smoothed_max, DynamicsState, EnvelopeConfig, MatrixGamePair,
};
use zsq_core::policy::softmax_tau;

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

fn zero_sum_pair(rng: &mut ChaCha8Rng, n: usize, m: usize) -> MatrixGamePair {
    MatrixGamePair::zero_sum(uniform_matrix(rng, n, m))
}

fn general_pair(rng: &mut ChaCha8Rng, n: usize, m: usize) -> MatrixGamePair {
    MatrixGamePair::new(uniform_matrix(rng, n, m), uniform_matrix(rng, m, n)).unwrap()
}

/// Fixed point of `x_i = X_i softmax(x_{-i})` by damped iteration.
fn solve_fixed_point(pair: &MatrixGamePair, tau: f64) -> DynamicsState {
    let [n, m] = pair.n_actions();
    let (z1, z2) = (DVector::zeros(n), DVector::zeros(m));
    let mut x = DynamicsState::new(z1.clone(), z2.clone());
    for _ in 0..200_000 {
        let next = param_step(&x, pair, tau, 0.2, (&z1, &z2)).unwrap();
        let moved = (&next.x1 - &x.x1).amax().max((&next.x2 - &x.x2).amax());
        x = next;
        if moved <= 1e-15 {
            break;
        }
    }
    x
}

fn fixed_point_residual(x: &DynamicsState, pair: &MatrixGamePair, tau: f64) -> f64 {
    let r1 = pair.x1() * softmax_tau(&x.x2, tau).unwrap() - &x.x1;
    let r2 = pair.x2() * softmax_tau(&x.x1, tau).unwrap() - &x.x2;
    r1.amax().max(r2.amax())
}

fn pennies() -> MatrixGamePair {
    MatrixGamePair::zero_sum(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_is_nonnegative(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, tau in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = general_pair(&mut rng, n, m);
        let cfg = EnvelopeConfig::new(tau);
        let v = lyapunov_v(&uniform_vector(&mut rng, n, 3.0), &uniform_vector(&mut rng, m, 3.0), &pair, &cfg).unwrap();
        prop_assert!(v >= -1e-10, "V = {}", v);
    }

    #[test]
    fn lyapunov_vanishes_exactly_at_fixed_points(seed in any::<u64>(), n in 1usize..5, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = 0.5;
        let pair = zero_sum_pair(&mut rng, n, m);
        let cfg = EnvelopeConfig::new(tau);
        let x = solve_fixed_point(&pair, tau);
        prop_assert!(fixed_point_residual(&x, &pair, tau) <= 1e-12);
        prop_assert!(lyapunov_v(&x.x1, &x.x2, &pair, &cfg).unwrap() <= 1e-7);
        let bumped = &x.x1 + uniform_vector(&mut rng, n, 0.1);
        prop_assert!(lyapunov_v(&bumped, &x.x2, &pair, &cfg).unwrap() > 10.0 * cfg.inner_tol);
    }

    #[test]
    fn prox_point_is_close_to_softmax_and_to_the_logits(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, tau in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EnvelopeConfig::new(tau);
        let b = uniform_matrix(&mut rng, n, m);
        let x = uniform_vector(&mut rng, n, 2.0);
        let y = uniform_vector(&mut rng, m, 2.0);
        let sol = prox_p(&x, &y, &b, &cfg).unwrap();
        let v1 = (smoothed_max(&y, tau) + sol.objective).max(0.0);
        let p = &sol.minimizer;
        prop_assert!((softmax_tau(&y, tau).unwrap() - p).norm() <= (2.0 / tau).sqrt() * v1.sqrt() + 1e-8);
        prop_assert!((&b * p - &x).norm() <= (2.0 * cfg.mu).sqrt() * v1.sqrt() + 1e-8);
    }

    #[test]
    fn prox_point_is_lipschitz_in_both_arguments(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, tau in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EnvelopeConfig::new(tau).with_tol(1e-11);
        let b = uniform_matrix(&mut rng, n, m);
        let (x1, x2) = (uniform_vector(&mut rng, n, 2.0), uniform_vector(&mut rng, n, 2.0));
        let (y1, y2) = (uniform_vector(&mut rng, m, 2.0), uniform_vector(&mut rng, m, 2.0));
        let p = |x: &DVector<f64>, y: &DVector<f64>| prox_p(x, y, &b, &cfg).unwrap().minimizer;
        let in_x = (p(&x2, &y1) - p(&x1, &y1)).norm();
        prop_assert!(in_x <= (&x2 - &x1).norm() / (2.0 * (cfg.mu * tau).sqrt()) + 1e-9);
        let in_y = (p(&x1, &y2) - p(&x1, &y1)).norm();
        prop_assert!(in_y <= (&y2 - &y1).norm() / tau + 1e-9);
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), n in 1usize..4, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = general_pair(&mut rng, n, m);
        let cfg = EnvelopeConfig::new(0.5).with_tol(1e-12);
        let x1 = uniform_vector(&mut rng, n, 2.0);
        let x2 = uniform_vector(&mut rng, m, 2.0);
        let grad = lyapunov_grad(&x1, &x2, &pair, &cfg).unwrap();
        let h = 1e-5;
        let v = |a: &DVector<f64>, b: &DVector<f64>| lyapunov_v(a, b, &pair, &cfg).unwrap();
        let fd1 = DVector::from_fn(n, |i, _| {
            let mut plus = x1.clone();
            let mut minus = x1.clone();
            plus[i] += h;
            minus[i] -= h;
            (v(&plus, &x2) - v(&minus, &x2)) / (2.0 * h)
        });
        let fd2 = DVector::from_fn(m, |i, _| {
            let mut plus = x2.clone();
            let mut minus = x2.clone();
            plus[i] += h;
            minus[i] -= h;
            (v(&x1, &plus) - v(&x1, &minus)) / (2.0 * h)
        });
        let exact = DVector::from_iterator(n + m, grad.g1.iter().chain(grad.g2.iter()).copied());
        let approx = DVector::from_iterator(n + m, fd1.iter().chain(fd2.iter()).copied());
        prop_assert!((&exact - &approx).norm() <= 1e-4 * exact.norm(), "exact {} fd {}", exact, approx);
    }

    #[test]
    fn gradient_is_lipschitz_with_the_smoothness_constant(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, tau in 0.2f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = general_pair(&mut rng, n, m);
        let cfg = EnvelopeConfig::new(tau).with_tol(1e-12);
        let (a1, a2) = (uniform_vector(&mut rng, n, 2.0), uniform_vector(&mut rng, m, 2.0));
        let scale = 10f64.powf(rng.gen_range(-4.0..0.0));
        let (b1, b2) = (&a1 + uniform_vector(&mut rng, n, scale), &a2 + uniform_vector(&mut rng, m, scale));
        let ga = lyapunov_grad(&a1, &a2, &pair, &cfg).unwrap();
        let gb = lyapunov_grad(&b1, &b2, &pair, &cfg).unwrap();
        let dg = ((&ga.g1 - &gb.g1).norm_squared() + (&ga.g2 - &gb.g2).norm_squared()).sqrt();
        let dx = ((&a1 - &b1).norm_squared() + (&a2 - &b2).norm_squared()).sqrt();
        prop_assert!(dg <= ga.smoothness * dx + 1e-7);
    }

    #[test]
    fn game_value_is_antisymmetric_under_role_swap(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_matrix(&mut rng, n, m);
        let a = matrix_game_value(&x).unwrap();
        let b = matrix_game_value(&(-x.transpose())).unwrap();
        prop_assert!((a.value + b.value).abs() <= 1e-8);
        prop_assert!(a.certificate_gap <= 1e-9 && b.certificate_gap <= 1e-9);
    }

    #[test]
    fn newton_and_mirror_descent_prox_agree(seed in any::<u64>(), n in 1usize..4, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // mu = tau keeps the mirror-descent contraction fast enough for a test.
        let cfg = EnvelopeConfig::new(1.0).with_mu(1.0).with_tol(1e-11);
        let b = uniform_matrix(&mut rng, n, m);
        let x = uniform_vector(&mut rng, n, 1.0);
        let y = uniform_vector(&mut rng, m, 1.0);
        let newton = prox_p(&x, &y, &b, &cfg).unwrap();
        let md = prox_p_mirror_descent(&x, &y, &b, &cfg).unwrap();
        prop_assert!((&newton.minimizer - &md.minimizer).norm() <= 1e-9);
        prop_assert!((newton.minimizer.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(newton.kkt_residual <= cfg.inner_tol);
    }

    #[test]
    fn regularized_gap_is_nonnegative(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = general_pair(&mut rng, n, m);
        let pi1 = softmax_tau(&uniform_vector(&mut rng, n, 3.0), 1.0).unwrap();
        let pi2 = softmax_tau(&uniform_vector(&mut rng, m, 3.0), 1.0).unwrap();
        prop_assert!(regularized_nash_gap(&pi1, &pi2, &pair, tau).unwrap() >= -1e-12);
    }

    #[test]
    fn policy_steps_stay_in_the_simplex(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, beta in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = general_pair(&mut rng, n, m);
        let mut s = DynamicsState::new(
            softmax_tau(&uniform_vector(&mut rng, n, 3.0), 1.0).unwrap(),
            softmax_tau(&uniform_vector(&mut rng, m, 3.0), 1.0).unwrap(),
        );
        for _ in 0..20 {
            s = sbr_policy_step(&s, &pair, 0.3, beta).unwrap();
            prop_assert!(s.x1.min() >= 0.0 && s.x2.min() >= 0.0);
            prop_assert!((s.x1.sum() - 1.0).abs() <= 1e-12 && (s.x2.sum() - 1.0).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn noise_free_trajectories_satisfy_the_drift_inequality(seed in any::<u64>(), n in 2usize..5, m in 2usize..5, beta in prop::sample::select(vec![0.01, 0.05])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = 0.5;
        let pair = zero_sum_pair(&mut rng, n, m);
        let cfg = EnvelopeConfig::new(tau);
        let start = DynamicsState::new(uniform_vector(&mut rng, n, 1.0), uniform_vector(&mut rng, m, 1.0));
        let noise = vec![(DVector::zeros(n), DVector::zeros(m)); 200];
        let traj = param_trajectory(&start, &pair, tau, beta, &noise).unwrap();
        let report = drift_check(&traj, &noise, &pair, &cfg, beta).unwrap();
        prop_assert!(report.all_satisfied(), "min slack {}", report.min_slack());
    }

    #[test]
    fn nash_distribution_image_is_a_parameter_fixed_point(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, beta in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = 0.5;
        let pair = zero_sum_pair(&mut rng, n, m);
        // Nash distribution from the policy-space dynamics.
        let mut pi = DynamicsState::new(DVector::from_element(n, 1.0 / n as f64), DVector::from_element(m, 1.0 / m as f64));
        for _ in 0..100_000 {
            let next = sbr_policy_step(&pi, &pair, tau, 0.2).unwrap();
            let moved = (&next.x1 - &pi.x1).amax().max((&next.x2 - &pi.x2).amax());
            pi = next;
            if moved <= 1e-16 {
                break;
            }
        }
        let x = DynamicsState::new(pair.x1() * &pi.x2, pair.x2() * &pi.x1);
        let stepped = param_step(&x, &pair, tau, beta, (&DVector::zeros(n), &DVector::zeros(m))).unwrap();
        prop_assert!((&stepped.x1 - &x.x1).amax() <= 1e-12);
        prop_assert!((&stepped.x2 - &x.x2).amax() <= 1e-12);
    }
}

fn simplex_grid(n: usize, steps: usize) -> Vec<DVector<f64>> {
    fn fill(n: usize, left: usize, steps: usize, prefix: &mut Vec<usize>, out: &mut Vec<DVector<f64>>) {
        if prefix.len() + 1 == n {
            prefix.push(left);
            out.push(DVector::from_iterator(n, prefix.iter().map(|&k| k as f64 / steps as f64)));
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            fill(n, left - k, steps, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(n, steps, steps, &mut Vec::new(), &mut out);
    out
}

fn entropy(u: &DVector<f64>) -> f64 {
    -u.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[test]
fn smoothed_max_matches_simplex_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grid = simplex_grid(3, 1000);
    for _ in 0..20 {
        let y = uniform_vector(&mut rng, 3, 2.0);
        let tau = rng.gen_range(0.1..1.0);
        let closed = smoothed_max(&y, tau);
        let best = grid.iter().map(|u| u.dot(&y) + tau * entropy(u)).fold(f64::NEG_INFINITY, f64::max);
        assert!(best <= closed + 1e-12);
        assert!(closed - best <= 1e-4, "closed {closed} grid {best}");
    }
}

/// `min_ubar max_u {(u - ubar)^T y + tau nu(u) - tau nu(ubar) + |x - B ubar|^2 / (2 mu)}` on a grid.
fn envelope_by_grid(x: &DVector<f64>, y: &DVector<f64>, b: &DMatrix<f64>, cfg: &EnvelopeConfig, steps: usize) -> f64 {
    let grid = simplex_grid(y.len(), steps);
    let inner = grid.iter().map(|u| u.dot(y) + cfg.tau * entropy(u)).fold(f64::NEG_INFINITY, f64::max);
    grid.iter()
        .map(|ubar| inner - ubar.dot(y) - cfg.tau * entropy(ubar) + (x - b * ubar).norm_squared() / (2.0 * cfg.mu))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn lyapunov_matches_nested_simplex_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let pair = general_pair(&mut rng, 3, 2);
        let cfg = EnvelopeConfig::new(1.0);
        let x1 = uniform_vector(&mut rng, 3, 1.0);
        let x2 = uniform_vector(&mut rng, 2, 1.0);
        let parts = lyapunov_parts(&x1, &x2, &pair, &cfg).unwrap();
        let g1 = envelope_by_grid(&x1, &x2, pair.x1(), &cfg, 100);
        let g2 = envelope_by_grid(&x2, &x1, pair.x2(), &cfg, 100);
        // The outer grid minimum can only overshoot; the inner grid maximum can only undershoot.
        let inner_slack = 1e-3;
        for (exact, grid) in [(parts.v1, g1), (parts.v2, g2)] {
            assert!(grid >= exact - inner_slack, "exact {exact} grid {grid}");
            assert!(grid - exact <= 2e-2, "exact {exact} grid {grid}");
        }
    }
}

fn rng_of(s: &DynamicsState, pair: &MatrixGamePair, tau: f64) -> f64 {
    regularized_nash_gap(&s.x1, &s.x2, pair, tau).unwrap()
}

#[test]
fn regularized_gap_decreases_along_smoothed_best_responses() {
    let pair = pennies();
    for tau in [0.1, 0.5, 1.0] {
        let mut s = DynamicsState::new(DVector::from_vec(vec![0.9, 0.1]), DVector::from_vec(vec![0.2, 0.8]));
        let first = rng_of(&s, &pair, tau);
        let mut prev = first;
        for _ in 0..2000 {
            s = sbr_policy_step(&s, &pair, tau, 0.01).unwrap();
            let now = rng_of(&s, &pair, tau);
            assert!(now <= prev + 1e-12, "tau {tau}: {now} after {prev}");
            prev = now;
        }
        assert!(prev < 0.5 * first);
    }
}

#[test]
fn parameter_dynamics_converge_on_pennies() {
    let pair = pennies();
    let tau = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let zero = DVector::zeros(2);
    for _ in 0..10 {
        let mut s = DynamicsState::new(uniform_vector(&mut rng, 2, 5.0), uniform_vector(&mut rng, 2, 5.0));
        for _ in 0..10_000 {
            s = param_step(&s, &pair, tau, 0.05, (&zero, &zero)).unwrap();
        }
        let target = solve_fixed_point(&pair, tau);
        assert!((&s.x1 - &target.x1).amax() <= 1e-6);
        assert!((&s.x2 - &target.x2).amax() <= 1e-6);
    }
}

#[test]
fn regularized_gap_at_point_masses_matches_closed_form() {
    let pair = pennies();
    let tau = 1.0;
    let (e1, e2) = (DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0]));
    // Player one gets payoffs (-1, 1) against e2 and plays the losing action;
    // player two gets payoffs (-1, 1) against e1 and plays the winning action.
    let one = tau * ((-1.0f64).exp() + 1f64.exp()).ln() + 1.0;
    let two = tau * ((-1.0f64).exp() + 1f64.exp()).ln() - 1.0;
    assert!((regularized_nash_gap(&e1, &e2, &pair, tau).unwrap() - (one + two)).abs() < 1e-14);
}

#[test]
fn two_by_two_values_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..1000 {
        let x = uniform_matrix(&mut rng, 2, 2);
        let sol = matrix_game_value(&x).unwrap();
        assert!((sol.value - closed_form_value(&x)).abs() <= 1e-9);
        assert!(sol.certificate_gap <= 1e-9);
    }
}

/// Pure saddle point if one exists, otherwise `(ad - bc)/(a + d - b - c)`.
fn closed_form_value(x: &DMatrix<f64>) -> f64 {
    let lower = (0..2).map(|i| x.row(i).min()).fold(f64::NEG_INFINITY, f64::max);
    let upper = (0..2).map(|j| x.column(j).max()).fold(f64::INFINITY, f64::min);
    if lower == upper {
        return lower;
    }
    let (a, b, c, d) = (x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]);
    (a * d - b * c) / (a + d - b - c)
}
