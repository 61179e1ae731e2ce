//! Resolves a run configuration the way the `stp` binary does: defaults,
//! then a key=value file, then `STP_*` environment variables.
//!
//! STP_BATCH_SIZE=8 cargo run --example run_config -- [config file]

use stp::config::{RunConfig, ENV_PREFIX, KEYS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    if let Some(path) = std::env::args().nth(1) {
        cfg.apply_file(path.as_ref())?;
    }
    cfg.apply_env(std::env::vars())?;
    println!("{} keys, environment prefix {ENV_PREFIX}", KEYS.len());
    print!("{}", cfg.to_text());
    let train = cfg.train()?;
    let model = cfg.model()?;
    println!("encoder: {} tokens of {} values, width {}, batch {}, digest {:016x}", model.encoder.n_tokens(), model.encoder.token_dim(), model.encoder.dim, train.batch_size, cfg.digest());
    Ok(())
}
