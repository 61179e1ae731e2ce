//! Image ↔ patch-token conversion, regression targets, fixed positional
//! embeddings and random masking maps.

use rand::Rng;

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

/// Target normalization guard.
pub const TARGET_EPS: f64 = 1e-6;

/// Flattened patches of one frame, in row-major grid order.
///
/// Each row holds a `p × p × C` block with channels fastest, then columns,
/// then rows of the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens<F: Scalar = f32> {
    pub tokens: Tensor<F>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl<F: Scalar> PatchTokens<F> {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

pub fn patchify<F: Scalar>(image: &Tensor<F>, p: usize) -> Result<PatchTokens<F>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected C×H×W image, got {:?}", image.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("image {h}×{w} is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..c {
                        data.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(PatchTokens { tokens: Tensor::new(vec![gh * gw, dim], data)?, grid: (gh, gw), patch_size: p, channels: c })
}

pub fn unpatchify<F: Scalar>(tokens: &PatchTokens<F>) -> Result<Tensor<F>> {
    let (gh, gw) = tokens.grid;
    let (p, c) = (tokens.patch_size, tokens.channels);
    let expected = [gh * gw, p * p * c];
    if tokens.tokens.shape() != expected {
        return Err(Error::Shape(format!(
            "token tensor {:?} does not match grid {gh}×{gw} with patch {p} and {c} channels",
            tokens.tokens.shape()
        )));
    }
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![F::zero(); c * h * w];
    let src = tokens.tokens.data();
    let mut i = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..c {
                        out[(ch * h + y) * w + x] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

/// Standardizes every patch row to zero mean and unit (population) variance.
pub fn normalize_targets<F: Scalar>(tokens: &PatchTokens<F>, eps: f64) -> Result<Tensor<F>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("normalization eps must be positive, got {eps}")));
    }
    let t = &tokens.tokens;
    let d = t.last_dim();
    let df = d as f64;
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.outer_len() {
        let row = t.row(r);
        let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / df;
        let var = row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / df;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|x| F::lit((x.as_f64() - mean) * inv)));
    }
    Ok(Tensor::new(t.shape().to_vec(), out)?)
}

/// One axis of sinusoidal features: `[sin(pos·ω_i) .., cos(pos·ω_i) ..]`,
/// `ω_i = 10000^(-i / (dim/2))`.
fn sincos_1d(dim: usize, pos: f64, out: &mut Vec<f64>) {
    let half = dim / 2;
    let omegas: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64)).collect();
    out.extend(omegas.iter().map(|w| (pos * w).sin()));
    out.extend(omegas.iter().map(|w| (pos * w).cos()));
}

/// Fixed 2-D sine-cosine embeddings `[gh·gw, dim]`; the first half of each
/// row encodes the column index, the second half the row index.
pub fn sincos_posembed_2d<F: Scalar>(gh: usize, gw: usize, dim: usize) -> Result<Tensor<F>> {
    if dim % 4 != 0 {
        return Err(Error::InvalidArgument(format!("positional embedding dim {dim} must be divisible by 4")));
    }
    let mut data = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        for c in 0..gw {
            sincos_1d(dim / 2, c as f64, &mut data);
            sincos_1d(dim / 2, r as f64, &mut data);
        }
    }
    Ok(Tensor::new(vec![gh * gw, dim], data.into_iter().map(F::lit).collect())?)
}

/// Partition of `0..n_tokens` into masked and visible token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingMap {
    n_tokens: usize,
    ratio: f64,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

/// Masked count for ratio `ratio` over `n` tokens, rounding halves up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5).floor() as usize
}

impl MaskingMap {
    /// Map with no masked tokens.
    pub fn empty(n_tokens: usize) -> Self {
        MaskingMap { n_tokens, ratio: 0.0, masked: vec![], visible: (0..n_tokens).collect() }
    }

    pub fn from_masked(n_tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n_tokens) {
            return Err(Error::InvalidArgument(format!("masked index out of range for {n_tokens} tokens")));
        }
        let visible = (0..n_tokens).filter(|i| masked.binary_search(i).is_err()).collect();
        let ratio = if n_tokens == 0 { 0.0 } else { masked.len() as f64 / n_tokens as f64 };
        Ok(MaskingMap { n_tokens, ratio, masked, visible })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Sorted masked indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Sorted visible indices.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Uniform random subset of `round(ρ·N)` tokens, sampled without replacement.
pub fn sample_masking_map<R: Rng + ?Sized>(n_tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskingMap> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("masking ratio {ratio} outside [0, 1]")));
    }
    let count = masked_count(n_tokens, ratio).min(n_tokens);
    let masked = rand::seq::index::sample(rng, n_tokens, count).into_vec();
    let mut map = MaskingMap::from_masked(n_tokens, masked)?;
    map.ratio = ratio;
    Ok(map)
}
