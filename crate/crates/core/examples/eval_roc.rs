//! Trains the verification embedder and prints AUC per condition.
//!
//! `cargo run --release --example eval_roc -- runs/desk/final.sdn`

use sdn::data::{Dataset, DatasetDescriptor, Split};
use sdn::eval::{roc_suite, Embedder, EmbedderConfig, RocSuiteConfig};
use sdn::trainer::load_model;

fn main() -> sdn::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "runs/desk/final.sdn".into());
    let (config, model) = load_model(path.as_ref())?;
    let data = Dataset::build(&DatasetDescriptor::from_config(&config))?;
    let t = std::time::Instant::now();
    let (embedder, acc) = Embedder::train(&data, &EmbedderConfig::default())?;
    println!("embedder held-out top-1 {acc:.3} ({:.1?})", t.elapsed());
    let sets = data.fixed_sets(Split::Test, config.set_size)?;
    let cfg = RocSuiteConfig { label_noise: vec![0.125, 0.25, 0.5], ..RocSuiteConfig::default() };
    for (condition, curve) in roc_suite(&model, &embedder, &sets, &cfg)? {
        println!("{condition:>16}  AUC {:.4}", curve.auc);
    }
    Ok(())
}
