//! Agents walking between random waypoints on a flat arena.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Principal point in pixels; the image center when absent.
    pub principal: Option<[f64; 2]>,
    /// Optical center in world meters (z up).
    pub position: [f64; 3],
    /// World point on the optical axis.
    pub look_at: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            id: 0,
            width: 640,
            height: 480,
            focal: 500.0,
            principal: None,
            position: [0.0, 0.0, 2.8],
            look_at: [4.0, 3.0, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub video: String,
    pub num_agents: usize,
    /// Arena extent in meters along x and y, starting at the origin.
    pub arena: [f64; 2],
    pub cameras: Vec<CameraConfig>,
    pub frames: u32,
    pub fps: f64,
    /// Walking speed range in m/s.
    pub speed: [f64; 2],
    /// Probability of pausing at a reached waypoint.
    pub dwell_prob: f64,
    /// Pause duration range in seconds.
    pub dwell: [f64; 2],
    /// Agent box extent (x, y, z) in meters.
    pub agent_size: [f64; 3],
    /// Projected boxes smaller than this many pixels are not visible.
    pub min_visible_area: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let corners = [[0.0, 0.0], [8.0, 0.0], [8.0, 6.0], [0.0, 6.0]];
        Self {
            video: "sim".into(),
            num_agents: 6,
            arena: [8.0, 6.0],
            cameras: corners
                .iter()
                .enumerate()
                .map(|(i, &[x, y])| CameraConfig {
                    id: i as u32,
                    position: [x, y, 2.8],
                    ..CameraConfig::default()
                })
                .collect(),
            frames: 600,
            fps: 15.0,
            speed: [0.6, 1.4],
            dwell_prob: 0.3,
            dwell: [0.5, 2.0],
            agent_size: [0.5, 0.5, 1.7],
            min_visible_area: 150.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(Error::input("simulator needs at least 2 cameras"));
        }
        if !(self.arena[0] > 0.0 && self.arena[1] > 0.0) {
            return Err(Error::input("arena extent must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::input("fps must be positive"));
        }
        if !(0.0 <= self.speed[0] && self.speed[0] <= self.speed[1]) {
            return Err(Error::input("speed range must satisfy 0 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.dwell_prob)
            || !(0.0 <= self.dwell[0] && self.dwell[0] <= self.dwell[1])
        {
            return Err(Error::input("invalid dwell settings"));
        }
        if self.agent_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::input("agent_size must be positive"));
        }
        for c in &self.cameras {
            if c.width == 0 || c.height == 0 || !(c.focal > 0.0) {
                return Err(Error::input(format!(
                    "camera {} has invalid intrinsics",
                    c.id
                )));
            }
            let axis: f64 = (0..3).map(|k| (c.look_at[k] - c.position[k]).powi(2)).sum();
            if !(axis > 0.0) {
                return Err(Error::input(format!(
                    "camera {} looks at its own center",
                    c.id
                )));
            }
        }
        let mut ids: Vec<u32> = self.cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("duplicate camera id"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub time: f64,
    pub pos: [f64; 2],
}

/// Piecewise-linear path of one agent over time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub identity: u32,
    pub keyframes: Vec<Keyframe>,
}

impl Trajectory {
    fn segment(&self, t: f64) -> usize {
        let k = self.keyframes.partition_point(|k| k.time <= t);
        k.clamp(1, self.keyframes.len().max(2) - 1)
    }

    pub fn position(&self, t: f64) -> [f64; 2] {
        if self.keyframes.len() == 1 {
            return self.keyframes[0].pos;
        }
        let i = self.segment(t);
        let (a, b) = (self.keyframes[i - 1], self.keyframes[i]);
        let span = b.time - a.time;
        let s = if span > 0.0 {
            ((t - a.time) / span).clamp(0.0, 1.0)
        } else {
            1.0
        };
        [
            a.pos[0] + s * (b.pos[0] - a.pos[0]),
            a.pos[1] + s * (b.pos[1] - a.pos[1]),
        ]
    }

    /// Unit walking direction at `t`; while paused, the direction of the
    /// last movement, and +x for an agent that never moves.
    pub fn heading(&self, t: f64) -> [f64; 2] {
        let upto = if self.keyframes.len() == 1 {
            1
        } else {
            self.segment(t) + 1
        };
        for i in (1..upto).rev() {
            let (a, b) = (self.keyframes[i - 1].pos, self.keyframes[i].pos);
            let d = [b[0] - a[0], b[1] - a[1]];
            let n = d[0].hypot(d[1]);
            if n > 1e-9 {
                return [d[0] / n, d[1] / n];
            }
        }
        [1.0, 0.0]
    }
}

/// Generates one trajectory per agent covering the configured duration.
pub fn simulate_world(cfg: &WorldConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let duration = cfg.frames as f64 / cfg.fps;
    let margin = 0.5 * cfg.agent_size[0].max(cfg.agent_size[1]);
    let (lo, hi) = (
        [margin, margin],
        [cfg.arena[0] - margin, cfg.arena[1] - margin],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let point = |rng: &mut ChaCha8Rng| -> [f64; 2] {
        [0, 1].map(|k| {
            if hi[k] > lo[k] {
                rng.random_range(lo[k]..hi[k])
            } else {
                cfg.arena[k] / 2.0
            }
        })
    };
    let mut out = Vec::with_capacity(cfg.num_agents);
    for identity in 0..cfg.num_agents as u32 {
        let start = point(&mut rng);
        let mut keyframes = vec![Keyframe {
            time: 0.0,
            pos: start,
        }];
        let mut now = 0.0;
        if cfg.speed[1] > 0.0 {
            while now < duration {
                let from = keyframes.last().unwrap().pos;
                let to = point(&mut rng);
                let speed = rng.random_range(cfg.speed[0]..=cfg.speed[1]).max(1e-3);
                let dist = (to[0] - from[0]).hypot(to[1] - from[1]);
                now += dist / speed;
                keyframes.push(Keyframe { time: now, pos: to });
                if rng.random_bool(cfg.dwell_prob) {
                    now += rng.random_range(cfg.dwell[0]..=cfg.dwell[1]);
                    keyframes.push(Keyframe { time: now, pos: to });
                }
            }
        }
        out.push(Trajectory {
            identity,
            keyframes,
        });
    }
    Ok(out)
}
