//! Trains an exit policy on the planted-feature environment and compares it
//! with a coin-flip policy.
//!
//!     cargo run --release -p earlyexit-core --example planted_ppo -- [total_steps] [learning_rate]

use earlyexit_core::exitenv::{Action, PlantedEnvConfig, PlantedExitEnv, RewardConfig};
use earlyexit_core::ppo::{self, PPOConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> earlyexit_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let total_steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let learning_rate = args.next().and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let cfg = PPOConfig { total_steps, learning_rate, ..PPOConfig::small() };

    let mut env = PlantedExitEnv::new(PlantedEnvConfig::default(), RewardConfig::default())?;
    let out = ppo::train(&mut env, &cfg, |steps, d, c| {
        if steps % 20_480 < cfg.rollout_buffer_size {
            println!(
                "{steps:>7} steps  entropy {:.3}  moving avg {:.3}",
                d.entropy,
                c.map_or(f64::NAN, |c| c.moving_average)
            );
        }
    })?;

    let fresh = || PlantedExitEnv::new(PlantedEnvConfig { seed: 99, ..Default::default() }, RewardConfig::default());
    let trained = ppo::evaluate_policy(&mut fresh()?, 200, |h| {
        if out.last.action_probs(h)[1] >= 0.5 {
            Action::Exit
        } else {
            Action::Continue
        }
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let coin = ppo::evaluate_policy(&mut fresh()?, 200, |_| {
        if rng.random_bool(0.5) {
            Action::Exit
        } else {
            Action::Continue
        }
    })?;
    println!("trained: {trained:?}");
    println!("coin:    {coin:?}");
    Ok(())
}
