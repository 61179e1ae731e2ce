//! Plain ViT encoder applied to one frame at a time, on visible tokens only.

use crate::nn::{LayerNorm, Linear, SelfBlock, INIT_STD};
use crate::numerics::{Graph, Init, ParamId, ParamKind, ParamRegistry, ParamStore, Scalar, Tensor, Var};
use crate::patching::{patchify, sincos_posembed_2d, MaskingMap};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Per-channel input normalization applied before patch embedding.
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl EncoderConfig {
    /// 32×32 RGB, patch 4 (64 tokens), width 128, 4 blocks of 4 heads.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            pixel_mean: vec![0.0; 3],
            pixel_std: vec![1.0; 3],
        }
    }

    /// ViT-B/16 at 224×224.
    pub fn full() -> Self {
        EncoderConfig { image_size: 224, patch_size: 16, dim: 768, depth: 12, heads: 12, ..Self::desk() }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("encoder dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("encoder dim {} must be divisible by 4", self.dim));
        }
        if self.pixel_mean.len() != self.channels || self.pixel_std.len() != self.channels {
            return bad(format!("pixel statistics must have {} channels", self.channels));
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            return bad("pixel std must be positive".into());
        }
        Ok(())
    }
}

/// Encoder output recorded on a graph for a batch of `B` frames sharing one
/// visible count `V`: `seq` is `[B·(1 + V), d]`, each frame contributing
/// its CLS row followed by its visible tokens in ascending index order.
#[derive(Clone, Debug)]
pub struct EncodedFrame {
    pub seq: Var,
    /// Visible token indices, one list per frame.
    pub visible: Vec<Vec<usize>>,
    /// Attention nodes of every block, first to last.
    pub attention: Vec<Var>,
}

/// Concrete encoder output for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F: Scalar = f32> {
    pub cls: Tensor<F>,
    pub tokens: Tensor<F>,
    pub visible: Vec<usize>,
}

impl EncodedFrame {
    pub fn batch(&self) -> usize {
        self.visible.len()
    }

    /// Rows per frame, `1 + V`.
    pub fn seq_len(&self) -> usize {
        1 + self.visible.first().map_or(0, Vec::len)
    }
}

impl<F: Scalar> EncoderOutput<F> {
    fn from_graph(g: &Graph<F>, frame: &EncodedFrame) -> Self {
        let seq = g.value(frame.seq);
        let d = seq.last_dim();
        let rows = seq.outer_len();
        let cls = Tensor::new(vec![d], seq.row(0).to_vec()).expect("cls row");
        let tokens = Tensor::new(vec![rows - 1, d], seq.data()[d..].to_vec()).expect("token rows");
        EncoderOutput { cls, tokens, visible: frame.visible[0].clone() }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub blocks: Vec<SelfBlock>,
    pub norm: LayerNorm,
    pos: Tensor<f64>,
}

impl Encoder {
    pub fn declare(reg: &mut ParamRegistry, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Linear::declare(reg, "enc.patch_embed", cfg.token_dim(), cfg.dim);
        let cls_token = reg.declare("enc.cls_token", &[1, cfg.dim], Init::Normal { std: INIT_STD }, ParamKind::Token);
        let blocks = (0..cfg.depth)
            .map(|i| SelfBlock::declare(reg, &format!("enc.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect();
        let norm = LayerNorm::declare(reg, "enc.norm", cfg.dim);
        let (gh, gw) = cfg.grid();
        let pos = sincos_posembed_2d(gh, gw, cfg.dim)?;
        Ok(Encoder { cfg: cfg.clone(), patch_embed, cls_token, blocks, norm, pos })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Fixed positional embeddings `[N, d]`.
    pub fn pos_embed(&self) -> &Tensor<f64> {
        &self.pos
    }

    fn check_image<F: Scalar>(&self, image: &Tensor<F>) -> Result<()> {
        let c = &self.cfg;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::Shape(format!("image shape {:?} does not match model input {:?}", image.shape(), expected)));
        }
        Ok(())
    }

    fn normalize_pixels<F: Scalar>(&self, image: &Tensor<F>) -> Tensor<F> {
        let plane = self.cfg.image_size * self.cfg.image_size;
        let (mean, std) = (&self.cfg.pixel_mean, &self.cfg.pixel_std);
        if mean.iter().all(|&m| m == 0.0) && std.iter().all(|&s| s == 1.0) {
            return image.clone();
        }
        let src = image.data();
        Tensor::from_fn(image.shape(), |i| {
            let c = i / plane;
            (src[i] - F::lit(mean[c])) / F::lit(std[c])
        })
    }

    /// Patch embedding with positional embeddings on visible tokens, masked
    /// tokens removed and the CLS token prepended: `[1 + V, d]`.
    pub fn embed<F: Scalar>(&self, g: &mut Graph<F>, image: &Tensor<F>, map: &MaskingMap) -> Result<Var> {
        self.embed_batch(g, std::slice::from_ref(image), std::slice::from_ref(map))
    }

    /// [`Encoder::embed`] for frames stacked along the rows; every map must
    /// leave the same number of tokens visible.
    pub fn embed_batch<F: Scalar>(&self, g: &mut Graph<F>, images: &[Tensor<F>], maps: &[MaskingMap]) -> Result<Var> {
        if images.is_empty() || images.len() != maps.len() {
            return Err(Error::Shape(format!("{} images for {} masking maps", images.len(), maps.len())));
        }
        let v = maps[0].visible().len();
        let mut tokens = Vec::with_capacity(images.len() * v * self.cfg.token_dim());
        let mut pos = Vec::with_capacity(images.len() * v * self.cfg.dim);
        for (image, map) in images.iter().zip(maps) {
            self.check_image(image)?;
            if map.n_tokens() != self.cfg.n_tokens() {
                return Err(Error::Shape(format!(
                    "masking map covers {} tokens but the image has {}",
                    map.n_tokens(),
                    self.cfg.n_tokens()
                )));
            }
            if map.visible().len() != v {
                return Err(Error::Shape("masking maps in one batch must share a visible count".into()));
            }
            let patches = patchify(&self.normalize_pixels(image), self.cfg.patch_size)?;
            tokens.extend_from_slice(patches.tokens.gather_rows(map.visible()).data());
            pos.extend(self.pos.gather_rows(map.visible()).data().iter().map(|&x| F::lit(x)));
        }
        let b = images.len();
        let x = g.constant(Tensor::new(vec![b * v, self.cfg.token_dim()], tokens)?);
        let x = self.patch_embed.forward(g, x)?;
        let pos = g.constant(Tensor::new(vec![b * v, self.cfg.dim], pos)?);
        let x = g.add(x, pos)?;
        let cls = g.param(self.cls_token);
        let pool = g.concat_rows(&[cls, x])?;
        if b == 1 {
            return Ok(pool);
        }
        let order: Vec<usize> = (0..b).flat_map(|i| std::iter::once(0).chain(1 + i * v..1 + (i + 1) * v)).collect();
        Ok(g.gather_rows(pool, &order)?)
    }

    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, image: &Tensor<F>, map: &MaskingMap) -> Result<EncodedFrame> {
        self.encode_batch(g, std::slice::from_ref(image), std::slice::from_ref(map))
    }

    /// Encodes a batch in one pass; attention never crosses frames.
    pub fn encode_batch<F: Scalar>(&self, g: &mut Graph<F>, images: &[Tensor<F>], maps: &[MaskingMap]) -> Result<EncodedFrame> {
        let mut x = self.embed_batch(g, images, maps)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward_segments(g, x, images.len())?;
            attention.push(a);
            x = y;
        }
        let seq = self.norm.forward(g, x)?;
        Ok(EncodedFrame { seq, visible: maps.iter().map(|m| m.visible().to_vec()).collect(), attention })
    }

    /// Encodes with no masking, on a throwaway graph.
    pub fn encode_full<F: Scalar>(&self, params: &ParamStore<F>, image: &Tensor<F>) -> Result<EncoderOutput<F>> {
        let mut g = Graph::new(params);
        let frame = self.encode(&mut g, image, &MaskingMap::empty(self.cfg.n_tokens()))?;
        Ok(EncoderOutput::from_graph(&g, &frame))
    }

    pub fn encode_values<F: Scalar>(&self, params: &ParamStore<F>, image: &Tensor<F>, map: &MaskingMap) -> Result<EncoderOutput<F>> {
        let mut g = Graph::new(params);
        let frame = self.encode(&mut g, image, map)?;
        Ok(EncoderOutput::from_graph(&g, &frame))
    }

    /// Post-softmax attention `[heads, 1+N, 1+N]` of the last block for an unmasked frame.
    pub fn last_layer_attention<F: Scalar>(&self, params: &ParamStore<F>, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new(params);
        let frame = self.encode(&mut g, image, &MaskingMap::empty(self.cfg.n_tokens()))?;
        let last = frame
            .attention
            .last()
            .ok_or_else(|| Error::InvalidArgument("encoder has no attention layers".into()))?;
        Ok(g.attention_probs(*last).expect("attention node"))
    }
}

/// The global CLS representation.
pub fn cls_feature<F: Scalar>(out: &EncoderOutput<F>) -> &Tensor<F> {
    &out.cls
}
