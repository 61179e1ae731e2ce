use std::thread;

use sha2::{Digest, Sha256};

use super::loss::{stp_loss, LossParts};
use super::optim::{adamw_step, AdamState, AdamWConfig};
use super::schedule::Schedule;
use crate::data::{ClipPair, CropConfig, IntervalPolicy, PairSampler};
use crate::model::{ModelConfig, StpModel};
use crate::numerics::{Gradients, Graph, NumericsError, ParamStore, Scalar, Tensor};
use crate::patching::{normalize_targets, patchify, sample_masking_map, MaskingMap, TARGET_EPS};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub rho_c: f64,
    pub rho_f: f64,
    /// Train the spatial decoder on the current frame.
    pub spatial_prediction: bool,
    pub interval: IntervalPolicy,
    pub crop: Option<CropConfig>,
    pub seed: u64,
    /// Samples per forward/backward graph; 0 puts the whole batch on one
    /// graph. Changes floating-point summation order, so it is part of the
    /// run identity.
    pub micro_batch: usize,
    /// Worker threads over micro-batches; results do not depend on this value.
    pub threads: usize,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            adamw: AdamWConfig::default(),
            batch_size: 32,
            total_steps: 1000,
            warmup_steps: 100,
            lambda_s: 1.0,
            lambda_t: 1.0,
            rho_c: 0.75,
            rho_f: 0.95,
            spatial_prediction: true,
            interval: IntervalPolicy::Fixed(16),
            crop: Some(CropConfig { scale: (0.8, 1.0), out_size: 32 }),
            seed: 0,
            micro_batch: 0,
            threads: 1,
        }
    }

    /// Batch 4096 for 50 epochs with 5 warmup epochs.
    pub fn full(steps_per_epoch: u64) -> Self {
        TrainConfig {
            batch_size: 4096,
            total_steps: 50 * steps_per_epoch,
            warmup_steps: 5 * steps_per_epoch,
            crop: Some(CropConfig { scale: (0.8, 1.0), out_size: 224 }),
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { base_lr: self.base_lr, warmup_steps: self.warmup_steps, total_steps: self.total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return fail(format!("warmup {} exceeds total steps {}", self.warmup_steps, self.total_steps));
        }
        if self.lambda_s < 0.0 || self.lambda_t < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        for (name, r) in [("rho_c", self.rho_c), ("rho_f", self.rho_f)] {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("{name} = {r} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Normalized target patches of `image` at the masked positions of `map`.
pub fn masked_targets<F: Scalar>(image: &Tensor<F>, patch: usize, map: &MaskingMap) -> Result<Tensor<F>> {
    let tokens = patchify(image, patch)?;
    Ok(normalize_targets(&tokens, TARGET_EPS)?.gather_rows(map.masked()))
}

/// Builds the full objective for one pair on `g`.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective<F: Scalar>(
    model: &StpModel,
    g: &mut Graph<F>,
    current: &Tensor<F>,
    future: &Tensor<F>,
    map_c: &MaskingMap,
    map_f: &MaskingMap,
    spatial: bool,
    lambda_s: f64,
    lambda_t: f64,
) -> Result<LossParts> {
    batch_objective(
        model,
        g,
        std::slice::from_ref(current),
        std::slice::from_ref(future),
        std::slice::from_ref(map_c),
        std::slice::from_ref(map_f),
        spatial,
        lambda_s,
        lambda_t,
    )
}

/// Objective averaged over a batch of pairs built on one graph. All maps of
/// one frame role share a ratio, so every pair contributes equally.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<F: Scalar>(
    model: &StpModel,
    g: &mut Graph<F>,
    current: &[Tensor<F>],
    future: &[Tensor<F>],
    maps_c: &[MaskingMap],
    maps_f: &[MaskingMap],
    spatial: bool,
    lambda_s: f64,
    lambda_t: f64,
) -> Result<LossParts> {
    let p = model.config().encoder.patch_size;
    let out = model.forward_batch(g, current, future, maps_c, maps_f, spatial)?;
    let stack = |images: &[Tensor<F>], maps: &[MaskingMap]| -> Result<Tensor<F>> {
        let parts = images.iter().zip(maps).map(|(i, m)| masked_targets(i, p, m)).collect::<Result<Vec<_>>>()?;
        let rows = parts.iter().map(|t| t.shape()[0]).sum();
        let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(Tensor::new(vec![rows, model.config().encoder.token_dim()], data)?)
    };
    let t_c = stack(current, maps_c)?;
    let t_f = stack(future, maps_f)?;
    stp_loss(g, out.pred_c.as_ref(), &out.pred_f, &t_c, &t_f, lambda_s, lambda_t)
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub total: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub lr: f64,
}

struct ChunkResult {
    spatial: f64,
    temporal: f64,
    grads: Gradients<f32>,
}

/// Model, parameters and optimizer state of one pre-training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: StpModel,
    pub params: ParamStore<f32>,
    pub opt: AdamState<f32>,
    pub cfg: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = StpModel::new(model_cfg)?;
        let params = model.init_params(cfg.seed);
        let opt = AdamState::new(model.registry());
        Ok(Trainer { model, params, opt, cfg, step: 0 })
    }

    /// Digest of everything that determines the loss trace; the thread
    /// count is excluded.
    pub fn config_digest(&self) -> u64 {
        let cfg = TrainConfig { threads: 0, ..self.cfg.clone() };
        text_digest(&format!("{:?}\n{:?}", self.model.config(), cfg))
    }

    /// Masking maps for global sample index `g`.
    pub fn masks(&self, g: u64) -> Result<(MaskingMap, MaskingMap)> {
        let n = self.model.config().encoder.n_tokens();
        let mut rng = stream_rng(self.cfg.seed, Stream::Mask, g);
        let map_c = sample_masking_map(n, self.cfg.rho_c, &mut rng)?;
        let map_f = sample_masking_map(n, self.cfg.rho_f, &mut rng)?;
        Ok((map_c, map_f))
    }

    /// Forward and backward for one micro-batch starting at global index
    /// `first`. The loss is scaled by `weight` so that summed chunk
    /// gradients give the batch mean.
    fn run_chunk(&self, pairs: &[ClipPair], first: u64, weight: f64) -> Result<ChunkResult> {
        let mut maps_c = Vec::with_capacity(pairs.len());
        let mut maps_f = Vec::with_capacity(pairs.len());
        for i in 0..pairs.len() {
            let (c, f) = self.masks(first + i as u64)?;
            maps_c.push(c);
            maps_f.push(f);
        }
        let current: Vec<Tensor<f32>> = pairs.iter().map(|p| p.current.clone()).collect();
        let future: Vec<Tensor<f32>> = pairs.iter().map(|p| p.future.clone()).collect();
        let diverged = |e: Error| match e {
            Error::Numerics(NumericsError::NonFinite { op }) => {
                Error::Diverged(format!("non-finite value in {op} at step {} samples {first}..", self.step))
            }
            e => e,
        };
        let mut g = Graph::new(&self.params);
        let parts = batch_objective(
            &self.model,
            &mut g,
            &current,
            &future,
            &maps_c,
            &maps_f,
            self.cfg.spatial_prediction,
            self.cfg.lambda_s,
            self.cfg.lambda_t,
        )
        .map_err(diverged)?;
        let total = g.value(parts.total).item() as f64;
        if !total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {} samples {first}.. (spatial {}, temporal {})",
                self.step, parts.spatial, parts.temporal
            )));
        }
        let scaled = g.scale(parts.total, weight as f32)?;
        let grads = g.backward(scaled).map_err(|e| diverged(e.into()))?;
        Ok(ChunkResult { spatial: parts.spatial * weight, temporal: parts.temporal * weight, grads })
    }

    /// One optimizer step on `batch`, whose samples carry global indices
    /// `step·B ..`. Micro-batch gradients are summed in order, so the
    /// result is the same for any thread count.
    pub fn train_step(&mut self, batch: &[ClipPair]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let base = self.step * self.cfg.batch_size as u64;
        let n = batch.len();
        let size = if self.cfg.micro_batch == 0 { n } else { self.cfg.micro_batch.min(n) };
        let chunks: Vec<(u64, &[ClipPair])> =
            batch.chunks(size).enumerate().map(|(c, pairs)| (base + (c * size) as u64, pairs)).collect();
        let weight = |pairs: &[ClipPair]| pairs.len() as f64 / n as f64;
        let threads = self.cfg.threads.clamp(1, chunks.len());
        let results: Vec<ChunkResult> = if threads == 1 {
            chunks.iter().map(|&(first, pairs)| self.run_chunk(pairs, first, weight(pairs))).collect::<Result<_>>()?
        } else {
            let per = chunks.len().div_ceil(threads);
            let this = &*self;
            thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .chunks(per)
                    .map(|group| {
                        s.spawn(move || {
                            group.iter().map(|&(first, pairs)| this.run_chunk(pairs, first, weight(pairs))).collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<Vec<_>>>>()
            })?
            .into_iter()
            .flatten()
            .collect()
        };
        self.params.zero_grads();
        let (mut spatial, mut temporal) = (0.0, 0.0);
        for r in &results {
            spatial += r.spatial;
            temporal += r.temporal;
            r.grads.accumulate_into(&mut self.params);
        }
        let lr = self.cfg.schedule().lr_at(self.step);
        adamw_step(&mut self.params, &mut self.opt, lr, &self.cfg.adamw, 1.0);
        self.params.zero_grads();
        let total = self.cfg.lambda_s * spatial + self.cfg.lambda_t * temporal;
        let stats = StepStats { step: self.step, total, spatial, temporal, lr };
        self.step += 1;
        Ok(stats)
    }

    /// Runs steps until `until` (exclusive), calling `on_step` after each.
    pub fn fit(&mut self, sampler: &PairSampler, until: u64, mut on_step: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        let mut out = Vec::new();
        while self.step < until {
            let batch = sampler.batch(self.step * self.cfg.batch_size as u64, self.cfg.batch_size)?;
            let stats = self.train_step(&batch)?;
            on_step(&stats);
            out.push(stats);
        }
        Ok(out)
    }
}

/// SHA-256 over a canonical text rendering, truncated to 64 bits.
pub fn text_digest(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
