//! Spatial and temporal pixel decoders.
//!
//! The spatial decoder reconstructs masked patches of the current frame from
//! its own visible tokens. The temporal decoder predicts masked patches of
//! the future frame from the future frame's few visible tokens, conditioned
//! on the current-frame encoding.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{EncodedFrame, EncoderConfig};
use crate::nn::{CrossBlock, LayerNorm, Linear, SelfBlock, INIT_STD};
use crate::numerics::{Graph, Init, ParamId, ParamKind, ParamRegistry, Scalar, Tensor, Var};
use crate::patching::{sincos_posembed_2d, MaskingMap};
use crate::{Error, Result};

/// Temporal decoder block design.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderArch {
    /// Self-attention and FFN on the future stream, cross-attention to a
    /// constant current-frame condition.
    SelfCross,
    /// Global self-attention over the concatenated current and future
    /// sequences; both segments are updated.
    JointSelf,
}

impl FromStr for DecoderArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_cross" | "self-cross" => Ok(DecoderArch::SelfCross),
            "joint_self" | "joint-self" => Ok(DecoderArch::JointSelf),
            other => Err(Error::Config(format!("unknown decoder architecture `{other}`"))),
        }
    }
}

impl fmt::Display for DecoderArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderArch::SelfCross => "self_cross",
            DecoderArch::JointSelf => "joint_self",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub spatial_depth: usize,
    pub temporal_depth: usize,
    pub arch: DecoderArch,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig { dim: 64, heads: 4, mlp_ratio: 4, spatial_depth: 2, temporal_depth: 2, arch: DecoderArch::SelfCross }
    }

    /// 8 layers, 16 heads, width 512.
    pub fn full() -> Self {
        DecoderConfig { dim: 512, heads: 16, mlp_ratio: 4, spatial_depth: 8, temporal_depth: 8, arch: DecoderArch::SelfCross }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!("decoder dim {} must be divisible by 4", self.dim)));
        }
        Ok(())
    }
}

/// Pixel predictions for the masked positions of one frame.
#[derive(Clone, Debug)]
pub struct DecodedPrediction {
    /// `[M, p²C]`, rows in ascending masked-index order, frames in batch order.
    pub predictions: Var,
    /// Masked token index of every prediction row.
    pub masked: Vec<usize>,
}

/// Condition stream observed at the input of every temporal decoder layer.
#[derive(Clone, Debug)]
pub struct TemporalTrace<F: Scalar> {
    /// Graph handle of the key/value stream per layer (self-cross only).
    pub kv_vars: Vec<Var>,
    /// Values of the current-frame segment entering each layer.
    pub condition: Vec<Tensor<F>>,
    /// The projected condition before the first layer.
    pub projected: Tensor<F>,
}

#[derive(Clone, Debug)]
enum TemporalBlocks {
    SelfCross(Vec<CrossBlock>),
    JointSelf(Vec<SelfBlock>),
}

#[derive(Clone, Debug)]
pub struct SpatialDecoder {
    pub embed: Linear,
    pub blocks: Vec<SelfBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct TemporalDecoder {
    pub embed: Linear,
    pub cond_embed: Linear,
    pub cond_norm: LayerNorm,
    blocks: TemporalBlocks,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl TemporalDecoder {
    pub fn arch(&self) -> DecoderArch {
        match self.blocks {
            TemporalBlocks::SelfCross(_) => DecoderArch::SelfCross,
            TemporalBlocks::JointSelf(_) => DecoderArch::JointSelf,
        }
    }
}

/// Both decoders plus the shared learnable mask token.
#[derive(Clone, Debug)]
pub struct Decoders {
    cfg: DecoderConfig,
    n_tokens: usize,
    pub mask_token: ParamId,
    pub spatial: SpatialDecoder,
    pub temporal: TemporalDecoder,
    /// `[1 + N, d_dec]`, zero row for CLS.
    pos: Tensor<f64>,
}

impl Decoders {
    pub fn declare(reg: &mut ParamRegistry, enc: &EncoderConfig, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (d_enc, d, out) = (enc.dim, cfg.dim, enc.token_dim());
        let mask_token = reg.declare("dec.mask_token", &[1, d], Init::Normal { std: INIT_STD }, ParamKind::Token);
        let spatial = SpatialDecoder {
            embed: Linear::declare(reg, "dec_s.embed", d_enc, d),
            blocks: (0..cfg.spatial_depth)
                .map(|i| SelfBlock::declare(reg, &format!("dec_s.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
                .collect(),
            norm: LayerNorm::declare(reg, "dec_s.norm", d),
            head: Linear::declare(reg, "dec_s.head", d, out),
        };
        let embed = Linear::declare(reg, "dec_t.embed", d_enc, d);
        let cond_embed = Linear::declare(reg, "dec_t.cond_embed", d_enc, d);
        let cond_norm = LayerNorm::declare(reg, "dec_t.cond_norm", d);
        let blocks = match cfg.arch {
            DecoderArch::SelfCross => TemporalBlocks::SelfCross(
                (0..cfg.temporal_depth)
                    .map(|i| CrossBlock::declare(reg, &format!("dec_t.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
                    .collect(),
            ),
            DecoderArch::JointSelf => TemporalBlocks::JointSelf(
                (0..cfg.temporal_depth)
                    .map(|i| SelfBlock::declare(reg, &format!("dec_t.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
                    .collect(),
            ),
        };
        let temporal = TemporalDecoder {
            embed,
            cond_embed,
            cond_norm,
            blocks,
            norm: LayerNorm::declare(reg, "dec_t.norm", d),
            head: Linear::declare(reg, "dec_t.head", d, out),
        };
        let (gh, gw) = enc.grid();
        let grid_pos = sincos_posembed_2d::<f64>(gh, gw, d)?;
        let mut pos = vec![0.0; d];
        pos.extend_from_slice(grid_pos.data());
        let pos = Tensor::new(vec![1 + gh * gw, d], pos)?;
        Ok(Decoders { cfg: cfg.clone(), n_tokens: gh * gw, mask_token, spatial, temporal, pos })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn check_maps(&self, enc: &EncodedFrame, maps: &[MaskingMap]) -> Result<()> {
        let ok = maps.len() == enc.batch()
            && maps.iter().zip(&enc.visible).all(|(m, v)| m.n_tokens() == self.n_tokens && m.visible() == v.as_slice());
        if !ok {
            return Err(Error::Shape("masking map does not match the encoder's visible tokens".into()));
        }
        Ok(())
    }

    /// Projects encoder tokens to decoder width, places the shared mask
    /// token at every masked position and adds fixed positional
    /// embeddings: `[1 + N, d_dec]` with CLS first.
    pub fn assemble_decoder_input<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        embed: &Linear,
        enc: &EncodedFrame,
        map: &MaskingMap,
    ) -> Result<Var> {
        self.assemble_batch(g, embed, enc, std::slice::from_ref(map))
    }

    /// Batched assembly: `[B·(1 + N), d_dec]`, one full grid per frame.
    pub fn assemble_batch<F: Scalar>(&self, g: &mut Graph<F>, embed: &Linear, enc: &EncodedFrame, maps: &[MaskingMap]) -> Result<Var> {
        self.check_maps(enc, maps)?;
        let projected = embed.forward(g, enc.seq)?;
        let len = enc.seq_len();
        let mask_row = maps.len() * len;
        let mask = g.param(self.mask_token);
        let pool = g.concat_rows(&[projected, mask])?;
        let mut order = Vec::with_capacity(maps.len() * (1 + self.n_tokens));
        for (b, map) in maps.iter().enumerate() {
            order.push(b * len);
            let mut rank = 0;
            for i in 0..self.n_tokens {
                if map.is_masked(i) {
                    order.push(mask_row);
                } else {
                    rank += 1;
                    order.push(b * len + rank);
                }
            }
        }
        let full = g.gather_rows(pool, &order)?;
        let pos = g.constant(self.tiled_pos(maps.len()));
        Ok(g.add(full, pos)?)
    }

    fn tiled_pos<F: Scalar>(&self, batch: usize) -> Tensor<F> {
        let d = self.cfg.dim;
        let one = self.pos.data();
        let data = (0..batch).flat_map(|_| one.iter().map(|&x| F::lit(x))).collect();
        Tensor::new(vec![batch * (1 + self.n_tokens), d], data).expect("tiled positions")
    }

    /// Reads out masked rows; frame `b` occupies rows `b·stride + offset ..`.
    #[allow(clippy::too_many_arguments)]
    fn predict_masked<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        norm: &LayerNorm,
        head: &Linear,
        seq: Var,
        stride: usize,
        offset: usize,
        maps: &[MaskingMap],
    ) -> Result<DecodedPrediction> {
        let x = norm.forward(g, seq)?;
        let mut rows = Vec::new();
        let mut masked = Vec::new();
        for (b, map) in maps.iter().enumerate() {
            rows.extend(map.masked().iter().map(|&i| b * stride + offset + i));
            masked.extend_from_slice(map.masked());
        }
        let x = g.gather_rows(x, &rows)?;
        let predictions = head.forward(g, x)?;
        Ok(DecodedPrediction { predictions, masked })
    }

    /// Reconstructs masked current-frame patches from `z_c` alone.
    pub fn spatial_decode<F: Scalar>(&self, g: &mut Graph<F>, z_c: &EncodedFrame, map_c: &MaskingMap) -> Result<DecodedPrediction> {
        self.spatial_decode_batch(g, z_c, std::slice::from_ref(map_c))
    }

    pub fn spatial_decode_batch<F: Scalar>(&self, g: &mut Graph<F>, z_c: &EncodedFrame, maps: &[MaskingMap]) -> Result<DecodedPrediction> {
        let dec = &self.spatial;
        let mut x = self.assemble_batch(g, &dec.embed, z_c, maps)?;
        for block in &dec.blocks {
            x = block.forward_segments(g, x, maps.len())?.0;
        }
        self.predict_masked(g, &dec.norm, &dec.head, x, 1 + self.n_tokens, 1, maps)
    }

    /// Current-frame condition: projection to decoder width plus positional
    /// embeddings at the visible positions, then LayerNorm.
    fn condition<F: Scalar>(&self, g: &mut Graph<F>, z_c: &EncodedFrame) -> Result<Var> {
        let dec = &self.temporal;
        let x = dec.cond_embed.forward(g, z_c.seq)?;
        let mut rows = Vec::with_capacity(z_c.batch() * z_c.seq_len());
        for visible in &z_c.visible {
            rows.push(0);
            rows.extend(visible.iter().map(|&i| i + 1));
        }
        let pos = g.constant(self.pos.gather_rows(&rows).cast());
        let x = g.add(x, pos)?;
        dec.cond_norm.forward(g, x)
    }

    /// Predicts masked future-frame patches conditioned on `z_c`.
    pub fn temporal_decode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        z_c: &EncodedFrame,
        z_f: &EncodedFrame,
        map_f: &MaskingMap,
    ) -> Result<(DecodedPrediction, TemporalTrace<F>)> {
        self.temporal_decode_batch(g, z_c, z_f, std::slice::from_ref(map_f))
    }

    /// Batched temporal decoding; frame `b` of `z_f` is conditioned on frame
    /// `b` of `z_c` only.
    pub fn temporal_decode_batch<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        z_c: &EncodedFrame,
        z_f: &EncodedFrame,
        maps_f: &[MaskingMap],
    ) -> Result<(DecodedPrediction, TemporalTrace<F>)> {
        if z_c.batch() != z_f.batch() {
            return Err(Error::Shape(format!("{} current frames for {} future frames", z_c.batch(), z_f.batch())));
        }
        let dec = &self.temporal;
        let b = maps_f.len();
        let full = 1 + self.n_tokens;
        let query = self.assemble_batch(g, &dec.embed, z_f, maps_f)?;
        let cond = self.condition(g, z_c)?;
        let projected = g.value(cond).clone();
        let mut trace = TemporalTrace { kv_vars: vec![], condition: vec![], projected };
        match &dec.blocks {
            TemporalBlocks::SelfCross(blocks) => {
                let mut x = query;
                for block in blocks {
                    trace.kv_vars.push(cond);
                    trace.condition.push(g.value(cond).clone());
                    x = block.forward_segments(g, x, cond, b)?;
                }
                let pred = self.predict_masked(g, &dec.norm, &dec.head, x, full, 1, maps_f)?;
                Ok((pred, trace))
            }
            TemporalBlocks::JointSelf(blocks) => {
                let len_c = z_c.seq_len();
                let stride = len_c + full;
                let mut x = g.concat_rows(&[cond, query])?;
                if b > 1 {
                    let order: Vec<usize> = (0..b)
                        .flat_map(|i| (i * len_c..(i + 1) * len_c).chain(b * len_c + i * full..b * len_c + (i + 1) * full))
                        .collect();
                    x = g.gather_rows(x, &order)?;
                }
                let cond_rows: Vec<usize> = (0..b).flat_map(|i| i * stride..i * stride + len_c).collect();
                for block in blocks {
                    trace.condition.push(g.value(x).gather_rows(&cond_rows));
                    x = block.forward_segments(g, x, b)?.0;
                }
                let pred = self.predict_masked(g, &dec.norm, &dec.head, x, stride, len_c + 1, maps_f)?;
                Ok((pred, trace))
            }
        }
    }
}
