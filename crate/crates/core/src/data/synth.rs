use rand::Rng;

use super::VideoClip;
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Disc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub n_sprites: usize,
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    pub length: usize,
    pub size: usize,
    /// Sprite half-extent range in pixels.
    pub radius: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { n_sprites: 1, speed: (0.5, 1.5), length: 32, size: 32, radius: (3.0, 5.0) }
    }
}

/// Sprite center and velocity at one frame, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

struct Sprite {
    shape: Shape,
    radius: f64,
    color: [f32; 3],
    origin: (f64, f64),
    velocity: (f64, f64),
}

/// Folds an unbounded coordinate into `[lo, hi]` by mirror reflection;
/// returns the folded position and the sign applied to the velocity.
fn reflect(u: f64, lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo, 0.0);
    }
    let y = (u - lo).rem_euclid(2.0 * span);
    if y <= span {
        (lo + y, 1.0)
    } else {
        (lo + 2.0 * span - y, -1.0)
    }
}

impl Sprite {
    fn state(&self, t: usize, size: f64) -> SpriteState {
        let (lo, hi) = (self.radius, size - self.radius);
        let (x, sx) = reflect(self.origin.0 + t as f64 * self.velocity.0, lo, hi);
        let (y, sy) = reflect(self.origin.1 + t as f64 * self.velocity.1, lo, hi);
        SpriteState { x, y, vx: sx * self.velocity.0, vy: sy * self.velocity.1 }
    }

    fn covers(&self, s: &SpriteState, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - s.x, py - s.y);
        match self.shape {
            Shape::Rect => dx.abs() <= self.radius && dy.abs() <= self.radius,
            Shape::Disc => dx * dx + dy * dy <= self.radius * self.radius,
        }
    }
}

/// Constant-velocity sprites over a flat background, reflecting at the
/// borders. Later sprites are drawn on top of earlier ones.
pub fn synth_clip<R: Rng + ?Sized>(rng: &mut R, params: &SynthParams) -> Result<VideoClip> {
    if params.length < 2 {
        return Err(Error::InvalidArgument(format!("clip length must be at least 2, got {}", params.length)));
    }
    let size = params.size as f64;
    if params.radius.1 * 2.0 >= size || params.radius.0 <= 0.0 || params.radius.0 > params.radius.1 {
        return Err(Error::InvalidArgument(format!("sprite radius {:?} does not fit a {size} px frame", params.radius)));
    }
    let background = [rng.random_range(0.0..0.3f32); 3];
    let sprites: Vec<Sprite> = (0..params.n_sprites)
        .map(|_| {
            let radius = if params.radius.0 == params.radius.1 { params.radius.0 } else { rng.random_range(params.radius.0..params.radius.1) };
            let speed = if params.speed.0 == params.speed.1 { params.speed.0 } else { rng.random_range(params.speed.0..params.speed.1) };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Sprite {
                shape: if rng.random_bool(0.5) { Shape::Rect } else { Shape::Disc },
                radius,
                color: std::array::from_fn(|_| rng.random_range(0.5..1.0)),
                origin: (rng.random_range(radius..size - radius), rng.random_range(radius..size - radius)),
                velocity: (speed * angle.cos(), speed * angle.sin()),
            }
        })
        .collect();
    let n = params.size;
    let mut frames = Vec::with_capacity(params.length);
    let mut motion = Vec::with_capacity(params.length);
    for t in 0..params.length {
        let states: Vec<SpriteState> = sprites.iter().map(|s| s.state(t, size)).collect();
        let mut data = vec![0.0f32; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut color = background;
                for (s, st) in sprites.iter().zip(&states) {
                    if s.covers(st, px, py) {
                        color = s.color;
                    }
                }
                for c in 0..3 {
                    data[(c * n + y) * n + x] = color[c];
                }
            }
        }
        frames.push(Tensor::new(vec![3, n, n], data)?);
        motion.push(states);
    }
    VideoClip::new(frames, 30.0, Some(motion))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_speed_gives_static_clip() {
        let p = SynthParams { speed: (0.0, 0.0), n_sprites: 3, ..Default::default() };
        let clip = synth_clip(&mut ChaCha8Rng::seed_from_u64(1), &p).unwrap();
        assert!(clip.frames().iter().all(|f| f == &clip.frames()[0]));
    }

    #[test]
    fn displacement_without_wall_contact_is_k_times_velocity() {
        // Slow sprite in a large frame: no wall contact over 10 frames.
        let p = SynthParams { speed: (0.3, 0.3), size: 64, radius: (2.0, 2.0), length: 12, n_sprites: 1 };
        for seed in 0..20 {
            let clip = synth_clip(&mut ChaCha8Rng::seed_from_u64(seed), &p).unwrap();
            let m = clip.motion.as_ref().unwrap();
            let (a, b) = (m[1][0], m[11][0]);
            if a.vx != b.vx || a.vy != b.vy {
                continue;
            }
            assert!((b.x - a.x - 10.0 * a.vx).abs() < 1e-9);
            assert!((b.y - a.y - 10.0 * a.vy).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let p = SynthParams::default();
        let a = synth_clip(&mut ChaCha8Rng::seed_from_u64(5), &p).unwrap();
        let b = synth_clip(&mut ChaCha8Rng::seed_from_u64(5), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sprites_stay_inside_and_reflect() {
        let p = SynthParams { speed: (3.0, 3.0), length: 100, ..Default::default() };
        let clip = synth_clip(&mut ChaCha8Rng::seed_from_u64(2), &p).unwrap();
        let track: Vec<SpriteState> = clip.motion.unwrap().iter().map(|f| f[0]).collect();
        assert!(track.iter().all(|s| s.x >= 0.0 && s.x <= 32.0 && s.y >= 0.0 && s.y <= 32.0));
        assert!(track.windows(2).any(|w| w[0].vx != w[1].vx || w[0].vy != w[1].vy));
    }

    #[test]
    fn rejects_short_clips() {
        let p = SynthParams { length: 1, ..Default::default() };
        assert!(synth_clip(&mut ChaCha8Rng::seed_from_u64(0), &p).is_err());
    }
}
