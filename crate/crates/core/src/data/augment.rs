use rand::Rng;

use super::pairs::ClipPair;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Integer crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop covering a `scale` fraction of the area with aspect
/// ratio log-uniform in `[3/4, 4/3]`, falling back to a center crop after
/// ten rejected attempts.
fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, scale: (f64, f64), rng: &mut R) -> CropRect {
    let area = (h * w) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let aspect = rng.random_range(lo..=hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropRect { top, left, height: ch, width: cw };
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < 3.0 / 4.0 {
        ((w as f64 / (3.0 / 4.0)).round() as usize, w)
    } else if ratio > 4.0 / 3.0 {
        (h, (h as f64 * 4.0 / 3.0).round() as usize)
    } else {
        (h, w)
    };
    CropRect { top: (h - ch) / 2, left: (w - cw) / 2, height: ch, width: cw }
}

/// Bilinear resize of a crop of `img` to `out × out`, half-pixel centers,
/// edge-clamped.
pub fn resize_bilinear(img: &Tensor<f32>, crop: CropRect, out: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Shape(format!("expected a C×H×W image, got {:?}", img.shape())));
    };
    if crop.top + crop.height > h || crop.left + crop.width > w || crop.height == 0 || crop.width == 0 {
        return Err(Error::InvalidArgument(format!("crop {crop:?} outside a {h}×{w} image")));
    }
    let axis = |n_in: usize| -> Vec<(usize, usize, f32)> {
        let s = n_in as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(crop.height), axis(crop.width));
    let src = img.data();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |y: usize, x: usize| plane[(crop.top + y) * w + crop.left + x];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    Ok(Tensor::new(vec![c, out, out], data)?)
}

/// Applies one sampled crop to both frames of the pair and maps the
/// sprite centers into output coordinates.
pub fn random_resized_crop_pair<R: Rng + ?Sized>(pair: &ClipPair, scale: (f64, f64), out: usize, rng: &mut R) -> Result<ClipPair> {
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::InvalidArgument(format!("crop scale {scale:?} must satisfy 0 < lo <= hi <= 1")));
    }
    let (h, w) = (pair.current.shape()[1], pair.current.shape()[2]);
    let crop = sample_crop(h, w, scale, rng);
    let (sx, sy) = (out as f64 / crop.width as f64, out as f64 / crop.height as f64);
    let map = |pts: &Vec<[f64; 2]>| -> Vec<[f64; 2]> {
        pts.iter().map(|p| [(p[0] - crop.left as f64) * sx, (p[1] - crop.top as f64) * sy]).collect()
    };
    Ok(ClipPair {
        current: resize_bilinear(&pair.current, crop, out)?,
        future: resize_bilinear(&pair.future, crop, out)?,
        current_index: pair.current_index,
        interval: pair.interval,
        sprites: pair.sprites.as_ref().map(|(c, f)| (map(c), map(f))),
        crop: Some(crop),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pair(seed: u64, size: usize) -> ClipPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[3, size, size], |_| rng.random::<f32>());
        ClipPair {
            current: img(&mut rng),
            future: img(&mut rng),
            current_index: 0,
            interval: 1,
            sprites: Some((vec![[3.0, 4.0]], vec![[5.0, 9.0]])),
            crop: None,
        }
    }

    #[test]
    fn full_scale_same_size_is_identity() {
        let p = pair(0, 16);
        let out = random_resized_crop_pair(&p, (1.0, 1.0), 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.crop, Some(CropRect { top: 0, left: 0, height: 16, width: 16 }));
        assert_eq!(out.current, p.current);
        assert_eq!(out.future, p.future);
        assert_eq!(out.sprites, p.sprites);
    }

    #[test]
    fn both_frames_share_the_crop() {
        let p = pair(1, 32);
        let mut identical = p.clone();
        identical.future = identical.current.clone();
        let a = random_resized_crop_pair(&identical, (0.8, 1.0), 24, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.current, a.future);
        let crop = a.crop.unwrap();
        assert_eq!(resize_bilinear(&p.future, crop, 24).unwrap(), random_resized_crop_pair(&p, (0.8, 1.0), 24, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().future);
    }

    #[test]
    fn displacement_follows_the_crop() {
        let p = pair(2, 32);
        let out = random_resized_crop_pair(&p, (0.8, 1.0), 32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = out.crop.unwrap();
        let d = out.displacement().unwrap();
        assert!((d[0] - 2.0 * 32.0 / c.width as f64).abs() < 1e-12);
        assert!((d[1] - 5.0 * 32.0 / c.height as f64).abs() < 1e-12);
    }

    #[test]
    fn bad_scale_is_rejected() {
        let p = pair(0, 8);
        assert!(random_resized_crop_pair(&p, (0.0, 1.0), 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(random_resized_crop_pair(&p, (0.9, 1.2), 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn crop_is_inside_with_bounded_area(seed in 0u64..10_000, size in 8usize..48) {
            let c = sample_crop(size, size, (0.8, 1.0), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(c.top + c.height <= size && c.left + c.width <= size);
            let frac = (c.height * c.width) as f64 / (size * size) as f64;
            let aspect = c.width as f64 / c.height as f64;
            // Rounding to whole pixels moves area and aspect slightly.
            let slack = 2.5 / size as f64;
            prop_assert!(frac > 0.8 - 2.0 * slack && frac <= 1.0);
            prop_assert!(aspect > 0.75 - slack && aspect < 4.0 / 3.0 + slack);
        }

        #[test]
        fn resize_stays_within_input_range(seed in 0u64..10_000, out in 4usize..40) {
            let p = pair(seed, 16);
            let r = random_resized_crop_pair(&p, (0.8, 1.0), out, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (lo, hi) = p.current.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(r.current.data().iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
        }
    }
}
