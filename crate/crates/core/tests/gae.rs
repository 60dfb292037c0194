use mdpo_core::envs::Action;
use mdpo_core::ppo::{compute_gae, Step, Trajectory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn step(reward: f64, value: f64, done: bool) -> Step {
    Step { obs: vec![0.0], action: Action::Discrete(0), reward, value, log_prob: 0.0, done }
}

/// `A_t = Σ_l (γλ)^l δ_{t+l}` summed directly, stopping after a terminal step.
fn brute_force(traj: &Trajectory, gamma: f64, lambda: f64) -> Vec<f64> {
    let s = &traj.steps;
    let n = s.len();
    let delta = |t: usize| {
        let next = if s[t].done {
            0.0
        } else if t + 1 < n {
            s[t + 1].value
        } else {
            traj.bootstrap
        };
        s[t].reward + gamma * next - s[t].value
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..n - t {
                sum += (gamma * lambda).powi(l as i32) * delta(t + l);
                if s[t + l].done {
                    break;
                }
            }
            sum
        })
        .collect()
}

fn random_traj(rng: &mut ChaCha8Rng) -> Trajectory {
    let n = rng.random_range(1..60);
    let terminal = rng.random_bool(0.5);
    let steps = (0..n)
        .map(|t| step(rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0), terminal && t + 1 == n))
        .collect();
    Trajectory { steps, bootstrap: rng.random_range(-3.0..3.0) }
}

#[test]
fn matches_brute_force_on_random_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let traj = random_traj(&mut rng);
        let (gamma, lambda) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (adv, ret) = compute_gae(&traj, gamma, lambda).unwrap();
        for (t, (a, b)) in adv.iter().zip(brute_force(&traj, gamma, lambda)).enumerate() {
            assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            assert_eq!(ret[t], a + traj.steps[t].value);
        }
    }
}

#[test]
fn gamma_zero_gives_one_step_advantage_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let traj = random_traj(&mut rng);
        let (adv, _) = compute_gae(&traj, 0.0, rng.random_range(0.0..1.0)).unwrap();
        for (a, s) in adv.iter().zip(&traj.steps) {
            assert_eq!(*a, s.reward - s.value);
        }
    }
}

#[test]
fn lambda_one_gives_discounted_return_exactly() {
    // Dyadic rewards and γ = 1/2 keep every partial sum exact.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let terminal = rng.random_bool(0.5);
        let steps: Vec<Step> = (0..n)
            .map(|t| step(rng.random_range(-8i32..8) as f64, rng.random_range(-8i32..8) as f64, terminal && t + 1 == n))
            .collect();
        let traj = Trajectory { steps, bootstrap: rng.random_range(-8i32..8) as f64 };
        let (_, ret) = compute_gae(&traj, 0.5, 1.0).unwrap();
        for t in 0..n {
            let mut g = if terminal { 0.0 } else { 0.5f64.powi((n - t) as i32) * traj.bootstrap };
            for l in 0..n - t {
                g += 0.5f64.powi(l as i32) * traj.steps[t + l].reward;
            }
            assert_eq!(ret[t], g, "t={t}");
        }
    }
}

#[test]
fn empty_trajectory_is_rejected() {
    assert!(compute_gae(&Trajectory::default(), 0.9, 0.9).is_err());
}

proptest! {
    #[test]
    fn agrees_with_brute_force(
        rewards in prop::collection::vec(-5.0f64..5.0, 1..40),
        values in prop::collection::vec(-5.0f64..5.0, 40),
        bootstrap in -5.0f64..5.0,
        gamma in 0.0f64..1.0,
        lambda in 0.0f64..1.0,
        terminal: bool,
    ) {
        let n = rewards.len();
        let steps = rewards.iter().zip(&values).enumerate().map(|(t, (&r, &v))| step(r, v, terminal && t + 1 == n)).collect();
        let traj = Trajectory { steps, bootstrap };
        let (adv, _) = compute_gae(&traj, gamma, lambda).unwrap();
        for (a, b) in adv.iter().zip(brute_force(&traj, gamma, lambda)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_is_ignored_after_terminal(rewards in prop::collection::vec(-5.0f64..5.0, 1..20), b1 in -9.0f64..9.0, b2 in -9.0f64..9.0) {
        let n = rewards.len();
        let steps: Vec<Step> = rewards.iter().enumerate().map(|(t, &r)| step(r, 0.3, t + 1 == n)).collect();
        let a = compute_gae(&Trajectory { steps: steps.clone(), bootstrap: b1 }, 0.97, 0.9).unwrap();
        let b = compute_gae(&Trajectory { steps, bootstrap: b2 }, 0.97, 0.9).unwrap();
        prop_assert_eq!(a, b);
    }
}
