//! Enumerates the learned prior of a small-code model and checks that it sums
//! to one, before and after a short training run.
//!
//! `cargo run --release --example prior_check -- [iters]`

use sdn::data::{Dataset, DatasetDescriptor, Split};
use sdn::eval::prior_brute_force_check;
use sdn::trainer::Trainer;
use sdn::TrainConfig;

fn main() -> sdn::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let mut config = TrainConfig::tiny();
    config.d_z = 10;
    let data = Dataset::build(&DatasetDescriptor::from_config(&config))?;
    let sets = data.fixed_sets(Split::Test, config.set_size)?;
    let mut trainer = Trainer::new(config)?;
    for stage in ["random", "trained"] {
        if stage == "trained" {
            for _ in 0..iters {
                trainer.train_step(&data)?;
            }
        }
        let r = prior_brute_force_check(&trainer.model, Some(&sets))?;
        println!(
            "{stage:>8}: sum over 2^{} codes = {:.12}, observed support {} codes with mass {:.3e}, renormalized >= prior: {}",
            r.d_z,
            r.total_mass,
            r.support.len(),
            r.support_mass,
            r.renormalization_dominates()
        );
    }
    Ok(())
}
