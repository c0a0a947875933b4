//! Code-match rate and set-size curve of a checkpoint against an untrained
//! model of the same shape.
//!
//! `cargo run --release --example consistency -- runs/desk/final.sdn`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdn::data::{Dataset, DatasetDescriptor, Split};
use sdn::eval::{code_match_rate, set_size_consistency};
use sdn::model::{Arch, Group, Model};
use sdn::trainer::load_model;

fn main() -> sdn::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "runs/desk/final.sdn".into());
    let (config, trained) = load_model(path.as_ref())?;
    let untrained = Model::<f32>::init(Arch::from_config(&config), config.seed)?;
    let data = Dataset::build(&DatasetDescriptor::from_config(&config))?;
    let sets = data.fixed_sets(Split::Test, config.set_size)?;
    let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k <= config.set_size).collect();
    // Trained encoder and energy with the untrained generator: separates what
    // the generator learned from how the codes themselves moved.
    let mut mixed = trained.clone();
    for (k, v) in &untrained.params {
        if Group::of(k) == Group::Psi {
            mixed.params.insert(k.clone(), v.clone());
        }
    }
    mixed.sn.extend(untrained.sn.iter().filter(|(k, _)| Group::of(k) == Group::Psi).map(|(k, v)| (k.clone(), v.clone())));
    mixed.bn.extend(untrained.bn.iter().map(|(k, v)| (k.clone(), v.clone())));
    for (name, model) in [("untrained", &untrained), ("trained", &trained), ("trained encoder, untrained generator", &mixed)] {
        let m = code_match_rate(model, &sets, config.set_size, &mut ChaCha8Rng::seed_from_u64(0))?;
        println!("{name}: code_match_rate {:.4} over {} test sets", m.mean, m.per_set.len());
        for p in set_size_consistency(model, &sets, &ks, config.set_size, 0)?.points {
            println!("  k={} mean_hamming {:.3} consistency {:.4}", p.k, p.mean_hamming, p.mean_consistency);
        }
    }
    Ok(())
}
