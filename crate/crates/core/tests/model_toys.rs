use mdpo_core::envs::{Action, ActionSpace, ObsSpace};
use mdpo_core::model::*;
use mdpo_core::rng::stream;
use mdpo_core::rollout::{RolloutBuffer, Transition};

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn hyper() -> ModelHyper {
    ModelHyper {
        l: 3,
        psi_hidden: vec![8],
        pred_hidden: vec![16],
        trans_hidden: vec![16],
        rew_hidden: vec![16],
        trans_lr: 1e-2,
        rew_lr: 1e-2,
        psi_lr: 1e-3,
        pred_lr: 1e-2,
        model_steps: 400,
        predictor_steps: 400,
        ..ModelHyper::stochastic_game()
    }
}

/// `o' = (o + a) mod 2`, `r = a`.
fn two_state_buffer(round: u64) -> RolloutBuffer {
    let mut ep = Vec::new();
    for t in 0..64 {
        let (o, a) = ((t / 3) % 2, t % 2);
        let o2 = (o + a) % 2;
        ep.push(Transition {
            obs: one_hot(o, 2),
            action: Action::Discrete(a),
            next_obs: one_hot(o2, 2),
            reward: a as f64,
            log_prob: 0.0,
            value: 0.0,
            done: t == 63,
            obs_index: Some(o),
            next_index: Some(o2),
            others: None,
        });
    }
    RolloutBuffer { round, episodes: vec![ep] }
}

#[test]
fn deterministic_two_state_game_is_fit() {
    let mut rng = stream(0, "toy", 0, 0);
    let hp = hyper();
    let mut model = EnvModel::<f64>::new(0, ObsSpace::Discrete(2), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
    let mut buf = ModelBuffer::new(hp.l);
    buf.push(two_state_buffer(0)).unwrap();
    model.train_model(&buf, &mut rng).unwrap();
    for o in 0..2 {
        for a in 0..2 {
            let p = model.predictive(&one_hot(o, 2), &Action::Discrete(a), false).unwrap();
            let NextDist::Categorical(probs) = p.next else { panic!("tabular model") };
            assert!(probs[(o + a) % 2] >= 0.99, "o={o} a={a}: {probs:?}");
            assert!((p.reward - a as f64).abs() < 0.05, "o={o} a={a}: {}", p.reward);
        }
    }
}

fn psi_point(model: &EnvModel<f64>, j: usize, obs: &[f64]) -> Vec<f64> {
    match model.psi_dist(j, obs).unwrap() {
        LatentDist::Point(z) => z,
        d => panic!("expected a point latent, got {d:?}"),
    }
}

#[test]
fn predictor_learns_constant_latents() {
    let mut rng = stream(1, "toy", 0, 0);
    let hp = hyper();
    let mut model = EnvModel::<f64>::new(0, ObsSpace::Discrete(2), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
    for r in 0..3 {
        model.push_latent(r);
    }
    let rep = model.train_predictor(&two_state_buffer(2), &mut rng).unwrap();
    assert!(rep.last_loss < 1e-4, "{rep:?}");
}

#[test]
fn predictor_beats_copy_last_on_linear_drift() {
    let mut rng = stream(2, "toy", 0, 0);
    let hp = hyper();
    let mut model = EnvModel::<f64>::new(0, ObsSpace::Discrete(2), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
    for r in 0..3 {
        model.push_latent(r);
    }
    let drift = [0.4, -0.3, 0.2];
    for (j, psi) in model.psis.iter_mut().enumerate() {
        let bias = psi.net.tensors_mut().pop().unwrap();
        for (b, d) in bias.iter_mut().zip(drift) {
            *b += j as f64 * d;
        }
    }
    let obs: Vec<Vec<f64>> = (0..2).map(|o| one_hot(o, 2)).collect();
    let copy_last: f64 = obs
        .iter()
        .map(|o| psi_point(&model, 1, o).iter().zip(psi_point(&model, 2, o)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / 2.0;
    model.train_predictor(&two_state_buffer(2), &mut rng).unwrap();
    let (loss, _) = model.predictor_objective(&obs, &[vec![], vec![]]).unwrap();
    assert!(loss < 0.05 * copy_last, "predictor {loss} vs copy-last {copy_last}");
}
