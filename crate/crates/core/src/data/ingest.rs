use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::VideoClip;
use crate::numerics::Tensor;
use crate::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Reads a PNG or PPM file as a `3×H×W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit image; the format
/// follows the file extension.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Shape(format!("expected a 3×H×W image, got {:?}", img.shape())));
    };
    let d = img.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    });
    out.save(path).map_err(|e| image_error(path, e))
}

/// Writes every frame of `clip` as `frame_NNNN.ppm` under `dir`.
pub fn export_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_image(&dir.join(format!("frame_{i:04}.ppm")), f)?;
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// One clip per subfolder of `root`, frames in lexicographic file order.
pub fn ingest_frames(root: &Path) -> Result<Vec<VideoClip>> {
    let mut clips = Vec::new();
    for sub in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = sorted_entries(&sub)?
            .into_iter()
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        if files.len() < 2 {
            return Err(Error::Data(format!("{} holds {} frame(s); a clip needs at least 2", sub.display(), files.len())));
        }
        let mut frames: Vec<Tensor<f32>> = Vec::with_capacity(files.len());
        for f in &files {
            let img = load_image(f)?;
            if let Some(first) = frames.first() {
                if first.shape() != img.shape() {
                    return Err(Error::Data(format!(
                        "{} has shape {:?}, expected {:?}",
                        f.display(),
                        img.shape(),
                        first.shape()
                    )));
                }
            }
            frames.push(img);
        }
        clips.push(VideoClip::new(frames, 30.0, None)?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_clip, SynthParams};

    #[test]
    fn empty_directory_gives_no_clips() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_frames(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn single_frame_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let clip = synth_clip(&mut ChaCha8Rng::seed_from_u64(0), &SynthParams { length: 2, ..Default::default() }).unwrap();
        let sub = dir.path().join("a");
        fs::create_dir(&sub).unwrap();
        save_image(&sub.join("0.png"), &clip.frames()[0]).unwrap();
        let err = ingest_frames(dir.path()).unwrap_err();
        assert!(err.to_string().contains("a clip needs at least 2"));
    }

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clips: Vec<VideoClip> = (0..2).map(|_| synth_clip(&mut rng, &SynthParams { length: 5, ..Default::default() }).unwrap()).collect();
        for (i, c) in clips.iter().enumerate() {
            export_clip(c, &dir.path().join(format!("clip_{i}"))).unwrap();
        }
        let back = ingest_frames(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.len(), b.len());
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                assert!(fa.max_abs_diff(fb) <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn ragged_folder_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("clip");
        fs::create_dir(&sub).unwrap();
        save_image(&sub.join("a.png"), &Tensor::zeros(&[3, 4, 4])).unwrap();
        save_image(&sub.join("b.png"), &Tensor::zeros(&[3, 5, 4])).unwrap();
        let err = ingest_frames(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b.png"));
    }
}
