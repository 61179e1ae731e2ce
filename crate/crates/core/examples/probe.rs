//! Linear motion-direction probe on frozen CLS features, for a checkpoint
//! (if given) and for the same encoder at random initialization.
//!
//! cargo run --release --example probe -- [checkpoint]

use stp::data::{IntervalPolicy, PairSampler, SynthManifest, SynthParams};
use stp::downstream::{motion_probe, ProbeConfig};
use stp::model::ModelConfig;
use stp::training::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut trainer = Trainer::new(&ModelConfig::desk(), TrainConfig::desk())?;
    let random = trainer.params.clone();
    if let Some(path) = std::env::args().nth(1) {
        trainer.load(path.as_ref(), 0, true)?;
    }
    let clips = SynthManifest { seed: 1000, n_clips: 120, params: SynthParams::default() }.generate()?;
    let pairs = PairSampler::new(clips, IntervalPolicy::Fixed(16), None, 1000)?.batch(0, 120)?;
    let cfg = ProbeConfig { iterations: 200, ..ProbeConfig::default() };
    for (name, params) in [("checkpoint", &trainer.params), ("random init", &random)] {
        let r = motion_probe(&trainer.model.encoder, params, &pairs, &cfg)?;
        println!("{name:12} train {:.3} test {:.3} ({} / {} pairs)", r.train_accuracy, r.test_accuracy, r.n_train, r.n_test);
    }
    Ok(())
}
