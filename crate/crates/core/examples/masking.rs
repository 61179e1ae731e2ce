//! Patchify a frame, draw current/future masking maps and build the
//! normalized reconstruction targets.
//!
//! cargo run --example masking

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stp::data::{SynthManifest, SynthParams};
use stp::patching::{masked_count, normalize_targets, patchify, sample_masking_map, sincos_posembed_2d, unpatchify};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clip = &SynthManifest { seed: 1, n_clips: 1, params: SynthParams::default() }.generate()?[0];
    let frame = &clip.frames()[0];
    let tokens = patchify(frame, 4)?;
    println!("frame {:?} -> {} tokens of {} values", frame.shape(), tokens.n_tokens(), tokens.token_dim());
    assert_eq!(&unpatchify(&tokens)?, frame);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (role, rho) in [("current", 0.75), ("future", 0.95)] {
        let m = sample_masking_map(tokens.n_tokens(), rho, &mut rng)?;
        println!("{role}: rho {rho} masks {} (round(rho*N) = {}), visible {:?}", m.masked().len(), masked_count(64, rho), m.visible());
    }
    let targets = normalize_targets(&tokens, 1e-6)?;
    let row = targets.row(0);
    let mean = row.iter().sum::<f32>() / row.len() as f32;
    println!("normalized target row 0: mean {mean:.2e}");
    let pos = sincos_posembed_2d::<f32>(8, 8, 128)?;
    println!("position table {:?}", pos.shape());
    Ok(())
}
