//! Flat key=value run configuration.
//!
//! Values are resolved in order: built-in defaults, then a config file,
//! then `STP_<KEY>` environment variables, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{channel_stats, ingest_frames, CropConfig, IntervalPolicy, SynthManifest, SynthParams, VideoClip};
use crate::decoders::{DecoderArch, DecoderConfig};
use crate::downstream::{EnvConfig, PolicyConfig};
use crate::model::ModelConfig;
use crate::training::{text_digest, AdamWConfig, TrainConfig};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "STP_";

/// Every accepted key, its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("preset", "desk", "model size preset: desk or full"),
    ("image_size", "", "input side in pixels (preset default if empty)"),
    ("patch_size", "", "patch side in pixels"),
    ("enc_dim", "", "encoder width"),
    ("enc_depth", "", "encoder blocks"),
    ("enc_heads", "", "encoder attention heads"),
    ("dec_dim", "", "decoder width"),
    ("dec_heads", "", "decoder attention heads"),
    ("dec_spatial_depth", "", "spatial decoder blocks"),
    ("dec_temporal_depth", "", "temporal decoder blocks"),
    ("dec_arch", "self_cross", "temporal decoder design: self_cross or joint_self"),
    ("pixel_mean", "auto", "per-channel mean: auto (from the corpus) or comma list"),
    ("pixel_std", "auto", "per-channel std: auto (from the corpus) or comma list"),
    ("batch_size", "32", "pairs per optimizer step"),
    ("steps", "1000", "optimizer steps"),
    ("warmup_steps", "100", "linear warmup steps"),
    ("base_lr", "0.00015", "peak learning rate"),
    ("weight_decay", "0.05", "decoupled weight decay"),
    ("beta1", "0.9", "AdamW first-moment decay"),
    ("beta2", "0.95", "AdamW second-moment decay"),
    ("lambda_s", "1", "spatial loss weight"),
    ("lambda_t", "1", "temporal loss weight"),
    ("rho_c", "0.75", "current-frame masking ratio"),
    ("rho_f", "0.95", "future-frame masking ratio"),
    ("spatial_prediction", "true", "train the spatial decoder"),
    ("interval", "16", "frame interval: K or uniform:LO:HI"),
    ("crop", "0.8,1.0", "random-resized-crop scale range, or none"),
    ("seed", "0", "run seed"),
    ("micro_batch", "0", "samples per graph, 0 for the whole batch"),
    ("threads", "1", "worker threads over micro-batches (results do not depend on it)"),
    ("data", "synth", "synth, frames:<dir> or manifest:<file>"),
    ("synth_clips", "500", "synthetic clips"),
    ("synth_length", "32", "frames per synthetic clip"),
    ("synth_sprites", "1", "sprites per synthetic clip"),
    ("synth_speed_min", "0.5", "sprite speed range, pixels per frame"),
    ("synth_speed_max", "1.5", ""),
    ("synth_seed", "0", "synthetic dataset seed"),
    ("out_dir", "runs/default", "run directory"),
    ("probe_clips", "1000", "held-out clips for the motion probe"),
    ("probe_seed", "1000", "seed of the probe dataset"),
    ("probe_iterations", "500", "probe optimizer iterations"),
    ("bc_demos", "50", "expert demonstrations"),
    ("bc_demo_seed", "100000", "first demo episode seed"),
    ("bc_episodes", "25", "evaluation episodes per base seed"),
    ("bc_seeds", "0,1000,2000", "evaluation base seeds"),
    ("bc_epochs", "100", "policy training epochs"),
    ("bc_lr", "0.001", "policy learning rate"),
    ("bc_history", "1", "policy frame history"),
];

/// Keys that do not change what a checkpoint contains.
const RUN_ONLY: &[&str] = &["threads", "out_dir"];

fn is_downstream(key: &str) -> bool {
    key.starts_with("probe_") || key.starts_with("bc_")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match self.values.get_mut(&key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e| Error::Config(format!("`{key}` = `{raw}`: {e}")))
    }

    fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.get(key).is_empty() { Ok(None) } else { self.parse(key).map(Some) }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `STP_<KEY>` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), &v).map_err(|e| Error::Config(format!("environment {k}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Digest over the keys that shape the model and its training.
    pub fn digest(&self) -> u64 {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| !RUN_ONLY.contains(&k.as_str()) && !is_downstream(k))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        text_digest(&text)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    fn channel_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            "auto" => Ok(None),
            raw => raw
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("`{key}` = `{raw}`: {e}"))))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Replaces `auto` pixel statistics with values measured on `clips`.
    pub fn resolve_pixel_stats(&mut self, clips: &[VideoClip]) -> Result<()> {
        if self.get("pixel_mean") == "auto" || self.get("pixel_std") == "auto" {
            let (mean, std) = channel_stats(clips);
            let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
            if self.get("pixel_mean") == "auto" {
                self.set("pixel_mean", &join(&mean))?;
            }
            if self.get("pixel_std") == "auto" {
                self.set("pixel_std", &join(&std))?;
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = match self.get("preset") {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let e = &mut m.encoder;
        macro_rules! over {
            ($field:expr, $key:literal) => {
                if let Some(v) = self.parse_opt($key)? {
                    $field = v;
                }
            };
        }
        over!(e.image_size, "image_size");
        over!(e.patch_size, "patch_size");
        over!(e.dim, "enc_dim");
        over!(e.depth, "enc_depth");
        over!(e.heads, "enc_heads");
        let c = e.channels;
        for (key, slot) in [("pixel_mean", &mut e.pixel_mean), ("pixel_std", &mut e.pixel_std)] {
            if let Some(v) = self.channel_list(key)? {
                if v.len() != c {
                    return Err(Error::Config(format!("`{key}` needs {c} values, got {}", v.len())));
                }
                *slot = v;
            }
        }
        if e.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("pixel_std values must be positive".into()));
        }
        let d: &mut DecoderConfig = &mut m.decoder;
        over!(d.dim, "dec_dim");
        over!(d.heads, "dec_heads");
        over!(d.spatial_depth, "dec_spatial_depth");
        over!(d.temporal_depth, "dec_temporal_depth");
        d.arch = self.parse::<DecoderArch>("dec_arch")?;
        m.encoder.validate()?;
        m.decoder.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let image_size = self.model()?.encoder.image_size;
        let crop = match self.get("crop") {
            "none" => None,
            raw => {
                let (lo, hi) = raw.split_once(',').ok_or_else(|| Error::Config(format!("`crop` = `{raw}`: expected LO,HI or none")))?;
                let p = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("`crop` = `{raw}`: {e}")));
                Some(CropConfig { scale: (p(lo)?, p(hi)?), out_size: image_size })
            }
        };
        let cfg = TrainConfig {
            base_lr: self.parse("base_lr")?,
            adamw: AdamWConfig {
                beta1: self.parse("beta1")?,
                beta2: self.parse("beta2")?,
                weight_decay: self.parse("weight_decay")?,
                ..AdamWConfig::default()
            },
            batch_size: self.parse("batch_size")?,
            total_steps: self.parse("steps")?,
            warmup_steps: self.parse("warmup_steps")?,
            lambda_s: self.parse("lambda_s")?,
            lambda_t: self.parse("lambda_t")?,
            rho_c: self.parse("rho_c")?,
            rho_f: self.parse("rho_f")?,
            spatial_prediction: self.parse("spatial_prediction")?,
            interval: self.parse::<IntervalPolicy>("interval")?,
            crop,
            seed: self.parse("seed")?,
            micro_batch: self.parse("micro_batch")?,
            threads: self.parse("threads")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_manifest(&self, seed_key: &str, clips_key: &str) -> Result<SynthManifest> {
        Ok(SynthManifest {
            seed: self.parse(seed_key)?,
            n_clips: self.parse(clips_key)?,
            params: SynthParams {
                n_sprites: self.parse("synth_sprites")?,
                speed: (self.parse("synth_speed_min")?, self.parse("synth_speed_max")?),
                length: self.parse("synth_length")?,
                size: self.model()?.encoder.image_size,
                ..SynthParams::default()
            },
        })
    }

    /// Training clips named by the `data` key.
    pub fn load_clips(&self) -> Result<Vec<VideoClip>> {
        let data = self.get("data");
        let clips = if data == "synth" {
            self.synth_manifest("synth_seed", "synth_clips")?.generate()?
        } else if let Some(dir) = data.strip_prefix("frames:") {
            ingest_frames(Path::new(dir))?
        } else if let Some(file) = data.strip_prefix("manifest:") {
            let path = Path::new(file);
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<SynthManifest>()?.generate()?
        } else {
            return Err(Error::Config(format!("`data` = `{data}`: expected synth, frames:<dir> or manifest:<file>")));
        };
        if clips.is_empty() {
            return Err(Error::Data(format!("data source `{data}` holds no clips")));
        }
        Ok(clips)
    }

    pub fn policy(&self) -> Result<PolicyConfig> {
        let m = self.model()?;
        Ok(PolicyConfig {
            history: self.parse("bc_history")?,
            lr: self.parse("bc_lr")?,
            epochs: self.parse("bc_epochs")?,
            seed: self.parse("seed")?,
            ..PolicyConfig::desk(m.encoder.dim)
        })
    }

    pub fn env(&self) -> Result<EnvConfig> {
        Ok(EnvConfig { size: self.model()?.encoder.image_size, ..EnvConfig::default() })
    }

    pub fn bc_seeds(&self) -> Result<Vec<u64>> {
        let raw = self.get("bc_seeds");
        raw.split(',').map(|s| s.trim().parse().map_err(|e| Error::Config(format!("`bc_seeds` = `{raw}`: {e}")))).collect()
    }
}
