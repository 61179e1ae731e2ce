//! Writes the last-layer CLS attention heatmap of a frame as a PNG overlay.
//!
//! cargo run --release --example attention_map -- [checkpoint] [out.png]

use stp::data::{SynthManifest, SynthParams};
use stp::model::ModelConfig;
use stp::training::{TrainConfig, Trainer};
use stp::viz::{cls_attention_grid, write_attention_overlay};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut trainer = Trainer::new(&ModelConfig::desk(), TrainConfig::desk())?;
    if let Some(path) = args.next().filter(|p| p != "-") {
        trainer.load(path.as_ref(), 0, true)?;
    }
    let out = args.next().unwrap_or_else(|| "runs/attention_example.png".into());
    let clip = &SynthManifest { seed: 3, n_clips: 1, params: SynthParams::default() }.generate()?[0];
    let frame = &clip.frames()[0];
    let grid = cls_attention_grid(&trainer.model.encoder, &trainer.params, frame)?;
    println!("attention grid {:?}", grid.shape());
    for r in 0..grid.shape()[0] {
        let row: Vec<String> = grid.row(r).iter().map(|v| format!("{:.3}", v)).collect();
        println!("  {}", row.join(" "));
    }
    if let Some(dir) = std::path::Path::new(&out).parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_attention_overlay(&trainer.model.encoder, &trainer.params, frame, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
