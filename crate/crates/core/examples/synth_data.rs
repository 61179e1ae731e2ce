//! Generates a small synthetic corpus, writes it as frame folders and
//! reads it back through the folder ingest path.
//!
//! cargo run --example synth_data -- [out_dir]

use std::path::PathBuf;

use stp::data::{export_clip, ingest_frames, SynthManifest, SynthParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/synth_example".into()));
    let manifest = SynthManifest { seed: 7, n_clips: 4, params: SynthParams { length: 20, ..SynthParams::default() } };
    let clips = manifest.generate()?;
    for (i, clip) in clips.iter().enumerate() {
        export_clip(clip, &out.join(format!("clip_{i:04}")))?;
        let start = clip.motion.as_ref().map(|m| m[0][0]);
        println!("clip {i}: {} frames, sprite at t=0 {start:?}", clip.len());
    }
    std::fs::write(out.join("manifest.txt"), manifest.to_string())?;
    let back = ingest_frames(&out)?;
    println!("re-ingested {} clips of {} frames from {}", back.len(), back[0].len(), out.display());
    Ok(())
}
