use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::augment::{random_resized_crop_pair, CropRect};
use super::VideoClip;
use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// How the gap between the current and the future frame is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntervalPolicy {
    Fixed(usize),
    /// Inclusive on both ends.
    Uniform { lo: usize, hi: usize },
}

impl IntervalPolicy {
    pub fn max(&self) -> usize {
        match *self {
            IntervalPolicy::Fixed(k) => k,
            IntervalPolicy::Uniform { hi, .. } => hi,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            IntervalPolicy::Fixed(k) => k,
            IntervalPolicy::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

impl Default for IntervalPolicy {
    fn default() -> Self {
        IntervalPolicy::Fixed(16)
    }
}

impl FromStr for IntervalPolicy {
    type Err = Error;

    /// `16` or `uniform:8:24`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad interval policy `{s}`; expected `K` or `uniform:LO:HI`"));
        if let Some(rest) = s.strip_prefix("uniform:") {
            let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim().parse().map_err(|_| bad())?;
            if lo > hi {
                return Err(bad());
            }
            return Ok(IntervalPolicy::Uniform { lo, hi });
        }
        s.trim().parse().map(IntervalPolicy::Fixed).map_err(|_| bad())
    }
}

impl fmt::Display for IntervalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntervalPolicy::Fixed(k) => write!(f, "{k}"),
            IntervalPolicy::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
        }
    }
}

/// A current/future frame pair drawn from one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub current: Tensor<f32>,
    pub future: Tensor<f32>,
    pub current_index: usize,
    pub interval: usize,
    /// Sprite centers `(x, y)` in output pixels at both frames.
    pub sprites: Option<(Vec<[f64; 2]>, Vec<[f64; 2]>)>,
    /// Crop shared by both frames, if augmentation was applied.
    pub crop: Option<CropRect>,
}

impl ClipPair {
    /// Future minus current center of the first sprite.
    pub fn displacement(&self) -> Option<[f64; 2]> {
        let (c, f) = self.sprites.as_ref()?;
        let (c, f) = (c.first()?, f.first()?);
        Some([f[0] - c[0], f[1] - c[1]])
    }

    /// Direction of [`displacement`](Self::displacement) in `bins` equal
    /// angular sectors, sector 0 centred on +x, counter-clockwise in image
    /// coordinates with y pointing down.
    pub fn direction_bin(&self, bins: usize) -> Option<usize> {
        let [dx, dy] = self.displacement()?;
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        let angle = (-dy).atan2(dx).rem_euclid(std::f64::consts::TAU);
        let width = std::f64::consts::TAU / bins as f64;
        Some(((angle + width / 2.0) / width).floor() as usize % bins)
    }
}

/// Draws an interval from `policy` and a current index uniformly over the
/// valid range.
pub fn sample_frame_pair<R: Rng + ?Sized>(clip: &VideoClip, policy: IntervalPolicy, rng: &mut R) -> Result<ClipPair> {
    if clip.len() <= policy.max() {
        return Err(Error::Data(format!("clip of {} frames is too short for interval {}", clip.len(), policy.max())));
    }
    let k = policy.draw(rng);
    let t = rng.random_range(0..clip.len() - k);
    let centers = |i: usize| -> Option<Vec<[f64; 2]>> {
        clip.motion.as_ref().map(|m| m[i].iter().map(|s| [s.x, s.y]).collect())
    };
    let sprites = centers(t).zip(centers(t + k));
    Ok(ClipPair {
        current: clip.frames()[t].clone(),
        future: clip.frames()[t + k].clone(),
        current_index: t,
        interval: k,
        sprites,
        crop: None,
    })
}

/// Crop settings for training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropConfig {
    pub scale: (f64, f64),
    pub out_size: usize,
}

/// Deterministic source of training pairs.
///
/// Sample `g` of a run comes from epoch `g / n_clips`; each epoch visits
/// every clip once in an order fixed by `(seed, epoch)`, and a fresh frame
/// pair is drawn each time. All randomness for sample `g` is a pure
/// function of `(seed, g)`.
#[derive(Clone, Debug)]
pub struct PairSampler {
    clips: Vec<VideoClip>,
    pub policy: IntervalPolicy,
    pub crop: Option<CropConfig>,
    pub seed: u64,
}

impl PairSampler {
    pub fn new(clips: Vec<VideoClip>, policy: IntervalPolicy, crop: Option<CropConfig>, seed: u64) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("no clips to sample from".into()));
        }
        if let Some(short) = clips.iter().find(|c| c.len() <= policy.max()) {
            return Err(Error::Data(format!("clip of {} frames is too short for interval {}", short.len(), policy.max())));
        }
        Ok(PairSampler { clips, policy, crop, seed })
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, Stream::Epoch, epoch));
        order
    }

    pub fn clip_index(&self, g: u64) -> usize {
        let n = self.clips.len() as u64;
        self.epoch_order(g / n)[(g % n) as usize]
    }

    pub fn sample(&self, g: u64) -> Result<ClipPair> {
        let clip = &self.clips[self.clip_index(g)];
        let mut rng = stream_rng(self.seed, Stream::Pair, g);
        let pair = sample_frame_pair(clip, self.policy, &mut rng)?;
        match self.crop {
            Some(c) => random_resized_crop_pair(&pair, c.scale, c.out_size, &mut rng),
            None => Ok(pair),
        }
    }

    /// Samples `g0 .. g0 + n`.
    pub fn batch(&self, g0: u64, n: usize) -> Result<Vec<ClipPair>> {
        (0..n as u64).map(|i| self.sample(g0 + i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_clip, SynthParams};

    fn clip(len: usize) -> VideoClip {
        let p = SynthParams { length: len, size: 8, radius: (1.0, 2.0), ..Default::default() };
        synth_clip(&mut ChaCha8Rng::seed_from_u64(0), &p).unwrap()
    }

    #[test]
    fn fixed_interval_index_range() {
        let c = clip(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 48];
        for _ in 0..5000 {
            let p = sample_frame_pair(&c, IntervalPolicy::Fixed(16), &mut rng).unwrap();
            assert!(p.current_index <= 47);
            assert_eq!(p.interval, 16);
            assert_eq!(p.future, c.frames()[p.current_index + 16]);
            seen[p.current_index] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn zero_interval_gives_identical_frames() {
        let c = clip(4);
        let p = sample_frame_pair(&c, IntervalPolicy::Fixed(0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p.current, p.future);
    }

    #[test]
    fn uniform_interval_bounds_and_frequencies() {
        let c = clip(40);
        let policy = IntervalPolicy::Uniform { lo: 8, hi: 24 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 25];
        let n = 10_000;
        for _ in 0..n {
            let p = sample_frame_pair(&c, policy, &mut rng).unwrap();
            assert!((8..=24).contains(&p.interval));
            assert!(p.current_index + p.interval < 40);
            counts[p.interval] += 1;
        }
        for &k in &counts[8..=24] {
            assert!((k as f64 / n as f64 - 1.0 / 17.0).abs() < 0.02);
        }
    }

    #[test]
    fn current_index_is_uniform() {
        let c = clip(26);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_frame_pair(&c, IntervalPolicy::Fixed(16), &mut rng).unwrap().current_index] += 1;
        }
        assert!(counts.iter().all(|&k| (k as f64 / n as f64 - 0.1).abs() < 0.02));
    }

    #[test]
    fn short_clip_is_rejected() {
        let c = clip(16);
        assert!(sample_frame_pair(&c, IntervalPolicy::Fixed(16), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn policy_parses() {
        assert_eq!("16".parse::<IntervalPolicy>().unwrap(), IntervalPolicy::Fixed(16));
        let u: IntervalPolicy = "uniform:8:24".parse().unwrap();
        assert_eq!(u, IntervalPolicy::Uniform { lo: 8, hi: 24 });
        assert_eq!(u.to_string().parse::<IntervalPolicy>().unwrap(), u);
        assert!("uniform:9".parse::<IntervalPolicy>().is_err());
        assert!("fast".parse::<IntervalPolicy>().is_err());
    }

    #[test]
    fn direction_bins() {
        let mut p = sample_frame_pair(&clip(4), IntervalPolicy::Fixed(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut with = |dx: f64, dy: f64| {
            p.sprites = Some((vec![[10.0, 10.0]], vec![[10.0 + dx, 10.0 + dy]]));
            p.direction_bin(8)
        };
        assert_eq!(with(1.0, 0.0), Some(0));
        assert_eq!(with(1.0, -1.0), Some(1));
        assert_eq!(with(0.0, -1.0), Some(2));
        assert_eq!(with(-1.0, 0.0), Some(4));
        assert_eq!(with(0.0, 1.0), Some(6));
        assert_eq!(with(1.0, 0.3), Some(0));
        assert_eq!(with(0.0, 0.0), None);
    }

    #[test]
    fn sampler_is_a_pure_function_of_the_index() {
        let clips: Vec<VideoClip> = (0..5).map(|_| clip(24)).collect();
        let s = PairSampler::new(clips, IntervalPolicy::Fixed(8), None, 9).unwrap();
        assert_eq!(s.sample(17).unwrap(), s.sample(17).unwrap());
        let mut epoch: Vec<usize> = (10..15).map(|g| s.clip_index(g)).collect();
        epoch.sort();
        assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
    }
}
