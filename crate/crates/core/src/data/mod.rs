//! Video clip sources, frame-pair sampling and paired augmentation.

mod augment;
mod ingest;
mod manifest;
mod pairs;
mod synth;

pub use augment::{random_resized_crop_pair, resize_bilinear, CropRect};
pub use ingest::{export_clip, ingest_frames, load_image, save_image};
pub use manifest::SynthManifest;
pub use pairs::{sample_frame_pair, ClipPair, CropConfig, IntervalPolicy, PairSampler};
pub use synth::{synth_clip, Shape, SpriteState, SynthParams};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// An ordered sequence of equally shaped `C×H×W` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Tensor<f32>>,
    pub fps: f32,
    /// Per frame, the state of every sprite (synthetic clips only).
    pub motion: Option<Vec<Vec<SpriteState>>>,
}

impl VideoClip {
    pub fn new(frames: Vec<Tensor<f32>>, fps: f32, motion: Option<Vec<Vec<SpriteState>>>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Data(format!("a clip needs at least 2 frames, got {}", frames.len())));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || frames.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Data("clip frames must share one C×H×W shape".into()));
        }
        if motion.as_ref().is_some_and(|m| m.len() != frames.len()) {
            return Err(Error::Data("motion track length differs from frame count".into()));
        }
        Ok(VideoClip { frames, fps, motion })
    }

    pub fn frames(&self) -> &[Tensor<f32>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }
}

/// Per-channel mean and standard deviation over every frame of every clip.
pub fn channel_stats(clips: &[VideoClip]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = clips.first() else { return (vec![], vec![]) };
    let c = first.frame_shape()[0];
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = 0usize;
    for clip in clips {
        for f in clip.frames() {
            let plane = f.len() / c;
            for (i, &x) in f.data().iter().enumerate() {
                let ch = i / plane;
                sum[ch] += x as f64;
                sq[ch] += (x as f64) * (x as f64);
            }
            count += plane;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-12).sqrt()).collect();
    (mean, std)
}
