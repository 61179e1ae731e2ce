//! Interrupts a run, resumes it from the checkpoint and checks that the
//! loss trace matches the uninterrupted run exactly.
//!
//! cargo run --release --example checkpoint_resume

use stp::data::{PairSampler, SynthManifest, SynthParams};
use stp::model::ModelConfig;
use stp::training::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clips = SynthManifest { seed: 2, n_clips: 16, params: SynthParams::default() }.generate()?;
    let model = ModelConfig { decoder: stp::decoders::DecoderConfig { spatial_depth: 1, temporal_depth: 1, ..stp::decoders::DecoderConfig::desk() }, ..ModelConfig::desk() };
    let cfg = TrainConfig { batch_size: 4, total_steps: 10, warmup_steps: 2, base_lr: 1e-3, ..TrainConfig::desk() };
    let sampler = PairSampler::new(clips, cfg.interval, cfg.crop, cfg.seed)?;

    let mut straight = Trainer::new(&model, cfg.clone())?;
    let full = straight.fit(&sampler, 10, |_| {})?;

    let dir = std::env::temp_dir().join("stp_resume_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ckpt.stpc");
    let mut first = Trainer::new(&model, cfg.clone())?;
    let mut trace = first.fit(&sampler, 6, |_| {})?;
    first.save(&path, first.config_digest())?;

    let mut resumed = Trainer::new(&model, cfg)?;
    resumed.load(&path, resumed.config_digest(), false)?;
    println!("resumed at step {}", resumed.step);
    trace.extend(resumed.fit(&sampler, 10, |_| {})?);
    for (a, b) in full.iter().zip(&trace) {
        println!("step {:2} uninterrupted {:.6} resumed {:.6}", a.step, a.total, b.total);
    }
    assert_eq!(full, trace);
    println!("traces identical");
    Ok(())
}
