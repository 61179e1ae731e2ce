//! CLS attention heatmaps.

use std::path::Path;

use crate::data::{resize_bilinear, save_image, CropRect};
use crate::encoder::Encoder;
use crate::numerics::{ParamStore, Tensor};
use crate::Result;

/// Head-averaged post-softmax attention of the CLS query over the patch
/// tokens at the last encoder layer, unmasked, as a `[gh, gw]` grid.
pub fn cls_attention_grid(encoder: &Encoder, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let probs = encoder.last_layer_attention(params, image)?;
    let &[heads, len, _] = probs.shape() else { unreachable!("attention probs are rank 3") };
    let (gh, gw) = encoder.config().grid();
    let mut grid = vec![0.0f32; gh * gw];
    for h in 0..heads {
        let cls_row = &probs.data()[h * len * len..h * len * len + len];
        for (g, &p) in grid.iter_mut().zip(&cls_row[1..]) {
            *g += p / heads as f32;
        }
    }
    Ok(Tensor::new(vec![gh, gw], grid)?)
}

/// Scales to `[0, 1]`; a constant map becomes all zeros.
pub fn minmax_normalize(t: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    t.map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
}

/// Bilinear upsampling of a `[gh, gw]` map to `size × size`.
pub fn upsample(grid: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let as_image = grid.clone().reshape(&[1, gh, gw])?;
    let up = resize_bilinear(&as_image, CropRect { top: 0, left: 0, height: gh, width: gw }, size)?;
    Ok(up.reshape(&[size, size])?)
}

/// Half-transparent red-to-yellow heat over the image.
pub fn overlay(image: &Tensor<f32>, heat: &Tensor<f32>) -> Tensor<f32> {
    let plane = heat.len();
    let h = heat.data();
    let src = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let (c, j) = (i / plane, i % plane);
        let v = h[j];
        let color = match c {
            0 => v.min(1.0),
            1 => (2.0 * v - 1.0).clamp(0.0, 1.0),
            _ => 0.0,
        };
        0.5 * src[i].clamp(0.0, 1.0) + 0.5 * color
    })
}

/// Normalized heatmap at image resolution plus its overlay, written to
/// `path` (format from the extension).
pub fn write_attention_overlay(encoder: &Encoder, params: &ParamStore<f32>, image: &Tensor<f32>, path: &Path) -> Result<Tensor<f32>> {
    let grid = cls_attention_grid(encoder, params, image)?;
    let heat = upsample(&minmax_normalize(&grid), encoder.config().image_size)?;
    save_image(path, &overlay(image, &heat))?;
    Ok(heat)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::ParamRegistry;

    fn setup() -> (Encoder, ParamStore<f32>, Tensor<f32>) {
        let mut reg = ParamRegistry::new();
        let enc = Encoder::declare(&mut reg, &EncoderConfig { image_size: 16, dim: 32, depth: 2, ..EncoderConfig::desk() }).unwrap();
        let params = ParamStore::init(&reg, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.random());
        (enc, params, img)
    }

    #[test]
    fn grid_shape_and_normalized_range() {
        let (enc, params, img) = setup();
        let grid = cls_attention_grid(&enc, &params, &img).unwrap();
        assert_eq!(grid.shape(), &[4, 4]);
        let sum: f32 = grid.data().iter().sum();
        assert!(sum > 0.0 && sum < 1.0);
        let n = minmax_normalize(&grid);
        assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(n.data().contains(&0.0) && n.data().contains(&1.0));
    }

    #[test]
    fn zeroed_query_key_gives_a_constant_map() {
        let (enc, mut params, img) = setup();
        let last = enc.blocks.last().unwrap();
        for lin in [&last.attn.q, &last.attn.k] {
            params.value_mut(lin.w).data_mut().fill(0.0);
            params.value_mut(lin.b).data_mut().fill(0.0);
        }
        let grid = cls_attention_grid(&enc, &params, &img).unwrap();
        let first = grid.data()[0];
        assert!(grid.data().iter().all(|&x| x == first));
        assert!((first - 1.0 / 17.0).abs() < 1e-6);
    }

    #[test]
    fn overlay_file_is_written() {
        let (enc, params, img) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.png");
        let heat = write_attention_overlay(&enc, &params, &img, &path).unwrap();
        assert_eq!(heat.shape(), &[16, 16]);
        assert_eq!(crate::data::load_image(&path).unwrap().shape(), &[3, 16, 16]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let (enc, params, _) = setup();
        assert!(cls_attention_grid(&enc, &params, &Tensor::zeros(&[3, 8, 8])).is_err());
    }
}
