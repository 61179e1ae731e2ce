use std::fmt;
use std::str::FromStr;

use super::{synth_clip, SynthParams, VideoClip};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Recipe for a synthetic dataset; the clips themselves are regenerated
/// rather than stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_clips: usize,
    pub params: SynthParams,
}

impl SynthManifest {
    pub fn generate(&self) -> Result<Vec<VideoClip>> {
        (0..self.n_clips)
            .map(|i| synth_clip(&mut stream_rng(self.seed, Stream::Clip, i as u64), &self.params))
            .collect()
    }
}

impl fmt::Display for SynthManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "n_clips={}", self.n_clips)?;
        writeln!(f, "n_sprites={}", p.n_sprites)?;
        writeln!(f, "speed_min={}", p.speed.0)?;
        writeln!(f, "speed_max={}", p.speed.1)?;
        writeln!(f, "length={}", p.length)?;
        writeln!(f, "size={}", p.size)?;
        writeln!(f, "radius_min={}", p.radius.0)?;
        writeln!(f, "radius_max={}", p.radius.1)
    }
}

impl FromStr for SynthManifest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = SynthManifest { seed: 0, n_clips: 0, params: SynthParams::default() };
        for (n, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest line {}: expected key=value", n + 1)))?;
            let v = v.trim();
            let bad = || Error::Data(format!("manifest line {}: bad value `{v}` for `{}`", n + 1, k.trim()));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            match k.trim() {
                "seed" => m.seed = v.parse().map_err(|_| bad())?,
                "n_clips" => m.n_clips = int()?,
                "n_sprites" => m.params.n_sprites = int()?,
                "speed_min" => m.params.speed.0 = real()?,
                "speed_max" => m.params.speed.1 = real()?,
                "length" => m.params.length = int()?,
                "size" => m.params.size = int()?,
                "radius_min" => m.params.radius.0 = real()?,
                "radius_max" => m.params.radius.1 = real()?,
                other => return Err(Error::Data(format!("manifest line {}: unknown key `{other}`", n + 1))),
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_regenerates_the_same_clips() {
        let m = SynthManifest { seed: 11, n_clips: 3, params: SynthParams { n_sprites: 2, length: 6, ..Default::default() } };
        let back: SynthManifest = m.to_string().parse().unwrap();
        assert_eq!(back, m);
        assert_eq!(back.generate().unwrap(), m.generate().unwrap());
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!("seed=1\ncolour=red\n".parse::<SynthManifest>().is_err());
    }
}
