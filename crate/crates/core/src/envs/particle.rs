//! Particle tasks: 4-agent Cooperative Navigation and 5-agent Regular Polygon
//! Control.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tabular::EPISODE_LEN;
use super::{Action, ActionSpace, Environment, ObsSpace, Reset, StepResult};
use crate::error::{Error, Result};
use crate::rng::Stream;

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfig {
    pub dt: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub radius: f64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self { dt: 0.1, damping: 0.25, max_speed: 1.0, radius: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub pos: Vec<Vec2>,
    pub vel: Vec<Vec2>,
    pub landmarks: Vec<Vec2>,
    pub radii: Vec<f64>,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl ParticleState {
    pub fn random<R: Rng + ?Sized>(n_agents: usize, n_landmarks: usize, cfg: &ParticleConfig, rng: &mut R) -> Self {
        let mut draw = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let pos = (0..n_agents).map(|_| draw()).collect();
        let landmarks = (0..n_landmarks).map(|_| draw()).collect();
        Self { pos, vel: vec![[0.0; 2]; n_agents], landmarks, radii: vec![cfg.radius; n_agents] }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(&self.vel).chain(&self.landmarks).all(|v| v[0].is_finite() && v[1].is_finite())
    }
}

/// Damped double integrator: `v ← (1 - damping) v + a dt` (speed-clipped),
/// then `p ← p + v dt`. Accelerations are clipped to [-1, 1] per dimension.
pub fn particle_step(state: &ParticleState, accelerations: &[Vec2], cfg: &ParticleConfig) -> Result<ParticleState> {
    if accelerations.len() != state.pos.len() {
        return Err(Error::shape(format!("{} accelerations for {} agents", accelerations.len(), state.pos.len())));
    }
    if accelerations.iter().any(|a| !a[0].is_finite() || !a[1].is_finite()) {
        return Err(Error::numeric("acceleration", "non-finite action"));
    }
    let mut next = state.clone();
    for i in 0..state.pos.len() {
        let a = [accelerations[i][0].clamp(-1.0, 1.0), accelerations[i][1].clamp(-1.0, 1.0)];
        let mut v = [
            (1.0 - cfg.damping) * state.vel[i][0] + a[0] * cfg.dt,
            (1.0 - cfg.damping) * state.vel[i][1] + a[1] * cfg.dt,
        ];
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if speed > cfg.max_speed {
            v[0] *= cfg.max_speed / speed;
            v[1] *= cfg.max_speed / speed;
        }
        next.vel[i] = v;
        next.pos[i] = [state.pos[i][0] + v[0] * cfg.dt, state.pos[i][1] + v[1] * cfg.dt];
    }
    Ok(next)
}

/// Number of unordered agent pairs closer than the sum of their radii.
pub fn collision_count(pos: &[Vec2], radii: &[f64]) -> usize {
    let mut n = 0;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            if dist(pos[i], pos[j]) < radii[i] + radii[j] {
                n += 1;
            }
        }
    }
    n
}

/// `-Σ_landmarks min_agent dist - p_c`.
pub fn coopnav_reward(state: &ParticleState) -> f64 {
    let cover: f64 =
        state.landmarks.iter().map(|&l| state.pos.iter().map(|&p| dist(l, p)).fold(f64::INFINITY, f64::min)).sum();
    -cover - collision_count(&state.pos, &state.radii) as f64
}

/// Area of the regular pentagon with perimeter 10.
pub fn pentagon_max_area() -> f64 {
    5.0 / (PI / 5.0).tan()
}

pub fn bound_penalty(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.9 {
        0.0
    } else if a < 1.0 {
        10.0 * (a - 0.9)
    } else {
        (2.0 * a - 2.0).exp()
    }
}

/// Area of the polygon whose perimeter is rescaled to 10, or 0 when the points
/// (ordered by angle about their centroid) do not form a strictly convex polygon.
pub fn scaled_area(points: &[Vec2]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let mut order: Vec<(f64, Vec2)> = points.iter().map(|&p| ((p[1] - cy).atan2(p[0] - cx), p)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let v: Vec<Vec2> = order.into_iter().map(|(_, p)| p).collect();
    let perimeter: f64 = (0..n).map(|i| dist(v[i], v[(i + 1) % n])).sum();
    if perimeter <= 0.0 {
        return 0.0;
    }
    let scale = 1e-12 * perimeter * perimeter;
    for i in 0..n {
        let (a, b, c) = (v[i], v[(i + 1) % n], v[(i + 2) % n]);
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross <= scale {
            return 0.0;
        }
    }
    let twice_area: f64 = (0..n).map(|i| v[i][0] * v[(i + 1) % n][1] - v[(i + 1) % n][0] * v[i][1]).sum();
    0.5 * twice_area.abs() * (10.0 / perimeter).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolygonReward {
    pub scaled_area: f64,
    pub shape_term: f64,
    pub collisions: usize,
    pub bound: f64,
    pub reward: f64,
}

/// Reward of the pentagon task. The bound penalty covers the four learning
/// agents (indices 0..4); collisions count over all five.
pub fn polygon_reward_parts(state: &ParticleState) -> PolygonReward {
    let s = scaled_area(&state.pos);
    let gap = pentagon_max_area() - s;
    // gap <= 0 only through rounding at the regular pentagon: the reciprocal
    // is unbounded there and the clamp applies.
    let inv = if gap > 0.0 { 1.0 / gap } else { f64::INFINITY };
    let shape_term = s.max(inv).min(1000.0);
    let collisions = collision_count(&state.pos, &state.radii);
    let bound: f64 = state.pos.iter().take(4).map(|p| bound_penalty(p[0]) + bound_penalty(p[1])).sum();
    PolygonReward {
        scaled_area: s,
        shape_term,
        collisions,
        bound,
        reward: shape_term - 4.0 * collisions as f64 - bound,
    }
}

pub fn polygon_reward(state: &ParticleState) -> f64 {
    polygon_reward_parts(state).reward
}

/// Unit acceleration of the fifth agent toward the centroid of the other four.
pub fn fixed_pentagon_policy(state: &ParticleState) -> Vec2 {
    let own = state.pos[4];
    let c = [
        state.pos[..4].iter().map(|p| p[0]).sum::<f64>() / 4.0,
        state.pos[..4].iter().map(|p| p[1]).sum::<f64>() / 4.0,
    ];
    let d = [c[0] - own[0], c[1] - own[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n == 0.0 {
        [0.0, 0.0]
    } else {
        [d[0] / n, d[1] / n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParticleTask {
    CoopNav,
    Polygon,
}

/// Episode driver for both particle tasks.
#[derive(Debug, Clone)]
pub struct ParticleEnv {
    task: ParticleTask,
    cfg: ParticleConfig,
    state: ParticleState,
    t: usize,
    horizon: usize,
    seed: u64,
}

impl ParticleEnv {
    pub fn new(task: ParticleTask, seed: u64) -> Self {
        let (n_agents, n_landmarks) = match task {
            ParticleTask::CoopNav => (4, 4),
            ParticleTask::Polygon => (5, 0),
        };
        let cfg = ParticleConfig::default();
        let state = ParticleState {
            pos: vec![[0.0; 2]; n_agents],
            vel: vec![[0.0; 2]; n_agents],
            landmarks: vec![[0.0; 2]; n_landmarks],
            radii: vec![cfg.radius; n_agents],
        };
        Self { task, cfg, state, t: 0, horizon: EPISODE_LEN, seed }
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn task(&self) -> ParticleTask {
        self.task
    }

    fn learners(&self) -> usize {
        4
    }

    fn observe(&self) -> Vec<Vec<f64>> {
        let s = &self.state;
        (0..self.learners())
            .map(|i| {
                let me = s.pos[i];
                let mut o = vec![me[0], me[1], s.vel[i][0], s.vel[i][1]];
                for l in &s.landmarks {
                    o.extend([l[0] - me[0], l[1] - me[1]]);
                }
                for (j, p) in s.pos.iter().enumerate() {
                    if j != i {
                        o.extend([p[0] - me[0], p[1] - me[1]]);
                    }
                }
                o
            })
            .collect()
    }

    fn reward(&self) -> f64 {
        match self.task {
            ParticleTask::CoopNav => coopnav_reward(&self.state),
            ParticleTask::Polygon => polygon_reward(&self.state),
        }
    }
}

impl Environment for ParticleEnv {
    fn n_agents(&self) -> usize {
        self.learners()
    }

    fn obs_space(&self) -> ObsSpace {
        let n = self.state.pos.len();
        ObsSpace::Continuous(4 + 2 * self.state.landmarks.len() + 2 * (n - 1))
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut Stream) -> Reset {
        self.state = ParticleState::random(self.state.pos.len(), self.state.landmarks.len(), &self.cfg, rng);
        self.t = 0;
        Reset { observations: self.observe(), obs_index: None }
    }

    fn step(&mut self, actions: &[Action], _rng: &mut Stream) -> Result<StepResult> {
        if actions.len() != self.learners() {
            return Err(Error::domain(format!("expected {} actions, got {}", self.learners(), actions.len())));
        }
        if self.t >= self.horizon {
            return Err(Error::contract("step called on a finished episode"));
        }
        let mut acc: Vec<Vec2> = Vec::with_capacity(self.state.pos.len());
        for a in actions {
            match a {
                Action::Continuous(v) if v.len() == 2 => acc.push([v[0], v[1]]),
                _ => return Err(Error::domain("particle tasks take 2-d continuous actions")),
            }
        }
        if self.task == ParticleTask::Polygon {
            acc.push(fixed_pentagon_policy(&self.state));
        }
        self.state = particle_step(&self.state, &acc, &self.cfg)?;
        self.t += 1;
        let reward = self.reward();
        if !reward.is_finite() {
            return Err(Error::numeric("reward", "non-finite particle reward"));
        }
        Ok(StepResult { observations: self.observe(), obs_index: None, reward, done: self.t == self.horizon })
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.task).as_bytes());
        h.update(self.seed.to_le_bytes());
        for v in [self.cfg.dt, self.cfg.damping, self.cfg.max_speed, self.cfg.radius] {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn pinned_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Pinned<'a> {
            task: ParticleTask,
            seed: u64,
            horizon: usize,
            physics: &'a ParticleConfig,
            checksum: String,
        }
        Ok(serde_json::to_string(&Pinned {
            task: self.task,
            seed: self.seed,
            horizon: self.horizon,
            physics: &self.cfg,
            checksum: self.checksum(),
        })?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn state(pos: Vec<Vec2>, landmarks: Vec<Vec2>) -> ParticleState {
        let n = pos.len();
        ParticleState { vel: vec![[0.0; 2]; n], pos, landmarks, radii: vec![0.1; n] }
    }

    fn pentagon(scale: f64, rot: f64, center: Vec2) -> Vec<Vec2> {
        (0..5)
            .map(|k| {
                let a = rot + 2.0 * PI * k as f64 / 5.0;
                [center[0] + scale * a.cos(), center[1] + scale * a.sin()]
            })
            .collect()
    }

    #[test]
    fn integrator_hand_values() {
        let cfg = ParticleConfig::default();
        let s = state(vec![[0.2, -0.3]], vec![]);
        let same = particle_step(&s, &[[0.0, 0.0]], &cfg).unwrap();
        assert_eq!(same.pos, s.pos);
        let moved = particle_step(&s, &[[1.0, 0.0]], &cfg).unwrap();
        assert!((moved.vel[0][0] - 0.1).abs() < 1e-15 && moved.vel[0][1] == 0.0);
        assert!((moved.pos[0][0] - 0.21).abs() < 1e-15);
        let twice = particle_step(&moved, &[[1.0, 0.0]], &cfg).unwrap();
        assert!((twice.vel[0][0] - (0.75 * 0.1 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn speed_is_clipped() {
        let cfg = ParticleConfig { damping: 0.0, ..Default::default() };
        let mut s = state(vec![[0.0, 0.0]], vec![]);
        for _ in 0..200 {
            s = particle_step(&s, &[[50.0, 50.0]], &cfg).unwrap();
            let speed = (s.vel[0][0].powi(2) + s.vel[0][1].powi(2)).sqrt();
            assert!(speed <= cfg.max_speed + 1e-12);
        }
        assert!(particle_step(&s, &[[f64::NAN, 0.0]], &cfg).is_err());
    }

    #[test]
    fn coopnav_on_landmarks_is_zero() {
        let lm = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let s = state(lm.clone(), lm);
        assert_eq!(coopnav_reward(&s), 0.0);
    }

    #[test]
    fn coopnav_stacked_agents() {
        let lm = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let s = state(vec![[0.0, 0.0]; 4], lm);
        assert!((coopnav_reward(&s) - (-3.0 - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn coopnav_invariances() {
        let mut rng = stream(5, "test", 0, 0);
        let s = ParticleState::random(4, 4, &ParticleConfig::default(), &mut rng);
        let r = coopnav_reward(&s);
        let mut shifted = s.clone();
        for p in shifted.pos.iter_mut().chain(shifted.landmarks.iter_mut()) {
            p[0] += 3.5;
            p[1] -= 1.25;
        }
        assert!((coopnav_reward(&shifted) - r).abs() < 1e-12);
        let mut perm = s.clone();
        perm.pos.reverse();
        perm.landmarks.rotate_left(1);
        assert!((coopnav_reward(&perm) - r).abs() < 1e-12);
    }

    #[test]
    fn regular_pentagon_hits_maximum() {
        for (scale, rot) in [(0.5, 0.0), (0.3, 1.1), (0.8, -2.0)] {
            let s = state(pentagon(scale, rot, [0.0, 0.05]), vec![]);
            let parts = polygon_reward_parts(&s);
            assert!((parts.scaled_area - pentagon_max_area()).abs() < 1e-6);
            assert_eq!(parts.collisions, 0);
            assert_eq!(parts.bound, 0.0);
            assert_eq!(parts.reward, 1000.0);
        }
        assert!((pentagon_max_area() - 6.8819).abs() < 1e-4);
    }

    #[test]
    fn collinear_points_score_reciprocal() {
        let pts: Vec<Vec2> = (0..5).map(|i| [-0.8 + 0.4 * i as f64, 0.0]).collect();
        let parts = polygon_reward_parts(&state(pts, vec![]));
        assert_eq!(parts.scaled_area, 0.0);
        assert!((parts.shape_term - 1.0 / pentagon_max_area()).abs() < 1e-12);
        assert!((parts.shape_term - 0.1453).abs() < 1e-4);
        assert_eq!(parts.collisions, 0);
    }

    #[test]
    fn bound_penalty_branches() {
        assert_eq!(bound_penalty(0.5), 0.0);
        assert!((bound_penalty(-0.95) - 0.5).abs() < 1e-12);
        assert!((bound_penalty(1.5) - std::f64::consts::E).abs() < 1e-12);
        let mut pts = pentagon(0.4, 0.0, [0.0, 0.0]);
        pts[0] = [1.5, 0.0];
        let parts = polygon_reward_parts(&state(pts, vec![]));
        assert!((parts.bound - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn coincident_points_have_zero_area() {
        let s = state(vec![[0.3, 0.3]; 5], vec![]);
        assert_eq!(scaled_area(&s.pos), 0.0);
    }

    #[test]
    fn convex_area_is_rigid_motion_invariant() {
        let base = vec![[0.0, 0.0], [0.6, -0.1], [0.9, 0.4], [0.5, 0.8], [-0.1, 0.5]];
        let a = scaled_area(&base);
        assert!(a > 0.0);
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let moved: Vec<Vec2> = base.iter().map(|p| [c * p[0] - s * p[1] + 0.2, s * p[0] + c * p[1] - 0.3]).collect();
        assert!((scaled_area(&moved) - a).abs() < 1e-9);
    }

    #[test]
    fn fixed_policy_direction() {
        let mut pos = vec![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0], [0.0, 0.0]];
        assert_eq!(fixed_pentagon_policy(&state(pos.clone(), vec![])), [0.0, 0.0]);
        pos[4] = [-1.0, 0.0];
        assert_eq!(fixed_pentagon_policy(&state(pos.clone(), vec![])), [1.0, 0.0]);
        pos[4] = [0.3, -0.7];
        let a = fixed_pentagon_policy(&state(pos, vec![]));
        assert!(((a[0] * a[0] + a[1] * a[1]).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn particle_episodes_last_forty_steps() {
        for task in [ParticleTask::CoopNav, ParticleTask::Polygon] {
            let mut env = ParticleEnv::new(task, 0);
            let mut rng = stream(1, "test", 0, 0);
            let r = env.reset(&mut rng);
            assert_eq!(r.observations.len(), 4);
            let ObsSpace::Continuous(d) = env.obs_space() else { panic!() };
            assert_eq!(r.observations[0].len(), d);
            let mut n = 0;
            loop {
                let acts = vec![Action::Continuous(vec![0.3, -0.2]); 4];
                let res = env.step(&acts, &mut rng).unwrap();
                n += 1;
                if res.done {
                    break;
                }
            }
            assert_eq!(n, 40);
        }
    }
}
