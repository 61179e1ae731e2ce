//! Scripted-expert demos in the toy reaching environment, an MLP policy on
//! frozen encoder features, and rollouts against expert and random play.
//!
//! cargo run --release --example behavior_cloning -- [checkpoint]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stp::downstream::{
    bc_train, collect_demos, rollout_eval, BcController, EnvConfig, Expert, PolicyConfig, RandomController,
};
use stp::model::ModelConfig;
use stp::training::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut trainer = Trainer::new(&ModelConfig::desk(), TrainConfig::desk())?;
    if let Some(path) = std::env::args().nth(1) {
        trainer.load(path.as_ref(), 0, true)?;
    }
    let env = EnvConfig::default();
    println!("expert success {:.2}", rollout_eval(&env, &mut Expert(env.clone()), 20, 0)?);
    println!("random success {:.2}", rollout_eval(&env, &mut RandomController(ChaCha8Rng::seed_from_u64(0)), 20, 0)?);

    let demos = collect_demos(&env, 20, 100_000)?;
    let cfg = PolicyConfig { epochs: 40, ..PolicyConfig::desk(trainer.model.config().encoder.dim) };
    let (policy, report) = bc_train(&trainer.model.encoder, &trainer.params, &demos, &cfg)?;
    println!("policy trained on {} samples, final mse {:.4}", report.samples, report.final_mse);
    let mut ctl = BcController::new(&policy, &trainer.model.encoder, &trainer.params);
    println!("policy success {:.2}", rollout_eval(&env, &mut ctl, 20, 0)?);
    Ok(())
}
