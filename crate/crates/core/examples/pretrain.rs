//! Pre-trains the desk model on synthetic clips and saves a checkpoint.
//!
//! cargo run --release --example pretrain -- [steps] [checkpoint]

use stp::data::{PairSampler, SynthManifest, SynthParams};
use stp::model::ModelConfig;
use stp::training::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let path = args.next().unwrap_or_else(|| "runs/pretrain_example.stpc".into());

    let clips = SynthManifest { seed: 0, n_clips: 64, params: SynthParams::default() }.generate()?;
    let cfg = TrainConfig { batch_size: 8, total_steps: steps, warmup_steps: steps / 10, base_lr: 1.5e-3, ..TrainConfig::desk() };
    let sampler = PairSampler::new(clips, cfg.interval, cfg.crop, cfg.seed)?;
    let mut trainer = Trainer::new(&ModelConfig::desk(), cfg)?;
    println!("{} parameters", trainer.params.numel());
    trainer.fit(&sampler, steps, |s| {
        if s.step % 10 == 0 || s.step + 1 == steps {
            println!("step {:4} total {:.4} spatial {:.4} temporal {:.4} lr {:.2e}", s.step, s.total, s.spatial, s.temporal, s.lr);
        }
    })?;
    if let Some(dir) = std::path::Path::new(&path).parent() {
        std::fs::create_dir_all(dir)?;
    }
    trainer.save(path.as_ref(), trainer.config_digest())?;
    println!("saved {path}");
    Ok(())
}
