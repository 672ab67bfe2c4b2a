//! Continuous point-mass navigation task.
//!
//! A unit mass on a bounded square plane accelerates toward a goal circle.
//! Observations are (px, py, vx, vy); actions are 2-D accelerations clamped
//! to a box. Mostly-straight approach segments dominate the data while
//! turns near walls or after random exploration kicks are rare, which gives
//! the pattern machinery a realistic frequency skew.

use rand::Rng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{Agent, EnvError, Environment, Step};

const DT: f64 = 0.1;
const V_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassEnv {
    /// Arena is the square [−arena_half, arena_half]².
    pub arena_half: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    /// Uniform acceleration noise half-width.
    pub noise_scale: f64,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub max_accel: f64,
    pub max_steps: usize,
    pub gamma: f64,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        Self {
            arena_half: 1.0,
            goal: [0.7, 0.7],
            goal_radius: 0.1,
            noise_scale: 0.02,
            step_penalty: -0.01,
            goal_reward: 1.0,
            max_accel: 1.0,
            max_steps: 120,
            gamma: 0.99,
        }
    }
}

impl PointMassEnv {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.arena_half <= 0.0 {
            return Err(EnvError::Argument("arena_half must be positive".to_string()));
        }
        if self.goal.iter().any(|g| g.abs() >= self.arena_half) {
            return Err(EnvError::Argument(format!("goal {:?} outside arena", self.goal)));
        }
        if self.noise_scale < 0.0 {
            return Err(EnvError::Argument("noise_scale must be >= 0".to_string()));
        }
        if self.goal_radius <= 0.0 || self.max_accel <= 0.0 || self.max_steps == 0 {
            return Err(EnvError::Argument("goal_radius, max_accel, max_steps must be positive".to_string()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::Argument(format!("gamma {} outside (0,1)", self.gamma)));
        }
        Ok(())
    }

    fn at_goal(&self, p: &[f64]) -> bool {
        let dx = p[0] - self.goal[0];
        let dy = p[1] - self.goal[1];
        (dx * dx + dy * dy).sqrt() <= self.goal_radius
    }
}

impl Environment for PointMassEnv {
    fn name(&self) -> &str {
        "pointmass"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        // Start near the corner opposite the default goal, zero velocity.
        let base = -0.8 * self.arena_half;
        let jitter = 0.05 * self.arena_half;
        vec![
            base + rng.gen_range(-jitter..=jitter),
            base + rng.gen_range(-jitter..=jitter),
            0.0,
            0.0,
        ]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let mut accel = [0.0; 2];
        for i in 0..2 {
            let noise = if self.noise_scale > 0.0 {
                rng.gen_range(-self.noise_scale..=self.noise_scale)
            } else {
                0.0
            };
            accel[i] = action[i].clamp(-self.max_accel, self.max_accel) + noise;
        }
        let mut v = [state[2], state[3]];
        let mut p = [state[0], state[1]];
        for i in 0..2 {
            v[i] = (v[i] + DT * accel[i]).clamp(-V_MAX, V_MAX);
            p[i] += DT * v[i];
            if p[i].abs() > self.arena_half {
                p[i] = p[i].clamp(-self.arena_half, self.arena_half);
                v[i] = 0.0;
            }
        }
        let terminal = self.at_goal(&p);
        let reward = self.step_penalty + if terminal { self.goal_reward } else { 0.0 };
        Step { next_state: vec![p[0], p[1], v[0], v[1]], reward, terminal }
    }
}

/// Scripted behavior policy: a PD controller steering toward the goal,
/// mixed with probability-epsilon uniform exploration kicks.
#[derive(Debug, Clone)]
pub struct PointMassPilot {
    pub goal: [f64; 2],
    pub accel: f64,
    pub epsilon: f64,
    pub kp: f64,
    pub kd: f64,
}

impl PointMassPilot {
    pub fn for_env(env: &PointMassEnv, epsilon: f64) -> Self {
        Self { goal: env.goal, accel: env.max_accel, epsilon, kp: 1.5, kd: 0.8 }
    }
}

impl Agent for PointMassPilot {
    fn act(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        if self.epsilon > 0.0 && rng.gen_range(0.0..1.0) < self.epsilon {
            return vec![
                rng.gen_range(-self.accel..=self.accel),
                rng.gen_range(-self.accel..=self.accel),
            ];
        }
        let ax = self.kp * (self.goal[0] - state[0]) - self.kd * state[2];
        let ay = self.kp * (self.goal[1] - state[1]) - self.kd * state[3];
        vec![ax.clamp(-self.accel, self.accel), ay.clamp(-self.accel, self.accel)]
    }
}
