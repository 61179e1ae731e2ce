//! Encoder plus dual decoders, wired for one (current, future) frame pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoders::{DecodedPrediction, DecoderConfig, Decoders, TemporalTrace};
use crate::encoder::{EncodedFrame, Encoder, EncoderConfig};
use crate::numerics::{Graph, ParamRegistry, ParamStore, Scalar, Tensor};
use crate::patching::MaskingMap;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig { encoder: EncoderConfig::desk(), decoder: DecoderConfig::desk() }
    }

    pub fn full() -> Self {
        ModelConfig { encoder: EncoderConfig::full(), decoder: DecoderConfig::full() }
    }
}

pub struct PairOutput<F: Scalar> {
    pub z_c: EncodedFrame,
    pub z_f: EncodedFrame,
    pub pred_c: Option<DecodedPrediction>,
    pub pred_f: DecodedPrediction,
    pub trace: TemporalTrace<F>,
}

#[derive(Clone, Debug)]
pub struct StpModel {
    cfg: ModelConfig,
    registry: ParamRegistry,
    pub encoder: Encoder,
    pub decoders: Decoders,
}

impl StpModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut registry = ParamRegistry::new();
        let encoder = Encoder::declare(&mut registry, &cfg.encoder)?;
        let decoders = Decoders::declare(&mut registry, &cfg.encoder, &cfg.decoder)?;
        Ok(StpModel { cfg: cfg.clone(), registry, encoder, decoders })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    /// Fresh `f32` parameters; other precisions are obtained by casting so
    /// that every precision starts from the same values.
    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        ParamStore::init(&self.registry, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Encodes both frames with the shared encoder and runs both decoders.
    /// With `spatial == false` the spatial decoder is skipped.
    pub fn forward_pair<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        current: &Tensor<F>,
        future: &Tensor<F>,
        map_c: &MaskingMap,
        map_f: &MaskingMap,
        spatial: bool,
    ) -> Result<PairOutput<F>> {
        self.forward_batch(
            g,
            std::slice::from_ref(current),
            std::slice::from_ref(future),
            std::slice::from_ref(map_c),
            std::slice::from_ref(map_f),
            spatial,
        )
    }

    /// [`StpModel::forward_pair`] for a batch of pairs on one graph. Pairs
    /// never interact; prediction rows are stacked in batch order.
    pub fn forward_batch<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        current: &[Tensor<F>],
        future: &[Tensor<F>],
        maps_c: &[MaskingMap],
        maps_f: &[MaskingMap],
        spatial: bool,
    ) -> Result<PairOutput<F>> {
        let z_c = self.encoder.encode_batch(g, current, maps_c)?;
        let z_f = self.encoder.encode_batch(g, future, maps_f)?;
        let pred_c = if spatial { Some(self.decoders.spatial_decode_batch(g, &z_c, maps_c)?) } else { None };
        let (pred_f, trace) = self.decoders.temporal_decode_batch(g, &z_c, &z_f, maps_f)?;
        Ok(PairOutput { z_c, z_f, pred_c, pred_f, trace })
    }
}
