use rand::Rng;

use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Where goals are placed at reset.
#[derive(Clone, Debug, PartialEq)]
pub enum GoalLayout {
    /// Uniform over `[lo, hi]²`.
    Uniform { lo: f64, hi: f64 },
    /// One of the listed sites, jittered by up to `jitter` per axis.
    Sites { sites: Vec<[f64; 2]>, jitter: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    /// Rendered frame side in pixels.
    pub size: usize,
    pub horizon: usize,
    /// Success distance in arena units (the arena is the unit square).
    pub success_radius: f64,
    /// Largest displacement per step and axis.
    pub max_step: f64,
    pub goals: GoalLayout,
    /// Minimum start-to-goal distance at reset.
    pub min_start_distance: f64,
    /// Axis-aligned blocked rectangle `[x0, y0, x1, y1]`.
    pub obstacle: Option<[f64; 4]>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            size: 32,
            horizon: 50,
            success_radius: 0.1,
            max_step: 0.05,
            goals: GoalLayout::Uniform { lo: 0.15, hi: 0.85 },
            min_start_distance: 0.3,
            obstacle: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    /// Displacement of the last step.
    pub vel: [f64; 2],
    pub t: usize,
}

/// What the agent sees: one image per camera view plus proprioception.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub views: Vec<Tensor<f32>>,
    /// Position and last displacement.
    pub proprio: Vec<f32>,
}

pub const PROPRIO_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Point mass in the unit square that must reach a goal drawn in the image.
#[derive(Clone, Debug)]
pub struct ToyEnv {
    pub cfg: EnvConfig,
    pub state: EnvState,
}

const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.15];
const GOAL: [f32; 3] = [0.2, 0.85, 0.3];
const AGENT: [f32; 3] = [0.9, 0.25, 0.2];
const OBSTACLE: [f32; 3] = [0.25, 0.35, 0.9];
/// Half side of the goal zone and radius of the agent disc, in arena units.
const GOAL_HALF: f64 = 0.2;
const AGENT_RADIUS: f64 = 0.08;

impl ToyEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        ToyEnv { cfg, state: EnvState { pos: [0.5; 2], goal: [0.5; 2], vel: [0.0; 2], t: 0 } }
    }

    fn blocked(&self, p: [f64; 2]) -> bool {
        self.cfg.obstacle.is_some_and(|[x0, y0, x1, y1]| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1)
    }

    /// Episode start for `seed`; the same seed always gives the same state.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = stream_rng(seed, Stream::Env, 0);
        let goal = match &self.cfg.goals {
            GoalLayout::Uniform { lo, hi } => [rng.random_range(*lo..=*hi), rng.random_range(*lo..=*hi)],
            GoalLayout::Sites { sites, jitter } => {
                let s = sites[rng.random_range(0..sites.len())];
                let j = *jitter;
                [s[0] + rng.random_range(-j..=j), s[1] + rng.random_range(-j..=j)]
            }
        };
        let pos = loop {
            let p = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            if distance(p, goal) >= self.cfg.min_start_distance && !self.blocked(p) {
                break p;
            }
        };
        self.state = EnvState { pos, goal, vel: [0.0; 2], t: 0 };
        self.observe()
    }

    /// Applies `action` in `[-1, 1]²` (clipped), scaled by the step size.
    /// Returns the new observation and whether the goal is reached.
    pub fn step(&mut self, action: &[f64]) -> Result<(Observation, bool)> {
        if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("action must be {ACTION_DIM} finite values, got {action:?}")));
        }
        let old = self.state.pos;
        let mut next = [0.0; 2];
        for i in 0..2 {
            next[i] = (old[i] + action[i].clamp(-1.0, 1.0) * self.cfg.max_step).clamp(0.0, 1.0);
        }
        if self.blocked(next) {
            next = old;
        }
        let s = &mut self.state;
        s.vel = [next[0] - old[0], next[1] - old[1]];
        s.pos = next;
        s.t += 1;
        Ok((self.observe(), self.success()))
    }

    pub fn success(&self) -> bool {
        distance(self.state.pos, self.state.goal) < self.cfg.success_radius
    }

    pub fn done(&self) -> bool {
        self.success() || self.state.t >= self.cfg.horizon
    }

    pub fn observe(&self) -> Observation {
        let s = &self.state;
        Observation {
            views: vec![render(&self.cfg, s)],
            proprio: vec![s.pos[0] as f32, s.pos[1] as f32, (s.vel[0] / self.cfg.max_step) as f32, (s.vel[1] / self.cfg.max_step) as f32],
        }
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `3×S×S` image of the arena: goal zone square, agent disc on top.
pub fn render(cfg: &EnvConfig, s: &EnvState) -> Tensor<f32> {
    let n = cfg.size;
    let scale = n as f64;
    let (gx, gy) = (s.goal[0] * scale, s.goal[1] * scale);
    let (ax, ay) = (s.pos[0] * scale, s.pos[1] * scale);
    let half = scale * GOAL_HALF;
    let radius = scale * AGENT_RADIUS;
    let mut data = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = BACKGROUND;
            if let Some([x0, y0, x1, y1]) = cfg.obstacle {
                if px >= x0 * scale && px <= x1 * scale && py >= y0 * scale && py <= y1 * scale {
                    color = OBSTACLE;
                }
            }
            if (px - gx).abs() <= half && (py - gy).abs() <= half {
                color = GOAL;
            }
            if (px - ax).powi(2) + (py - ay).powi(2) <= radius * radius {
                color = AGENT;
            }
            for c in 0..3 {
                data[(c * n + y) * n + x] = color[c];
            }
        }
    }
    Tensor::new(vec![3, n, n], data).expect("render shape")
}

/// Proportional controller toward the goal, clipped to the action bounds.
pub fn scripted_expert(cfg: &EnvConfig, s: &EnvState) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        a[i] = ((s.goal[i] - s.pos[i]) / cfg.max_step).clamp(-1.0, 1.0);
    }
    a
}
