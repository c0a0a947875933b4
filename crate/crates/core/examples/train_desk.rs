//! Trains the desk configuration and writes checkpoints and metrics.
//!
//! `cargo run --release --example train_desk -- [out_dir] [iters]`

use std::path::PathBuf;

use sdn::trainer::run_training;
use sdn::TrainConfig;

fn main() -> sdn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut config = TrainConfig::default();
    config.out_dir = args.next().map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from);
    if let Some(iters) = args.next() {
        config.iters = iters.parse().map_err(|_| sdn::Error::Config(format!("bad iteration count {iters}")))?;
    }
    let t = std::time::Instant::now();
    let out = run_training(&config, None, None)?;
    let last = out.history.last();
    println!("trained {} steps in {:.1?}", out.trainer.step, t.elapsed());
    if let Some(r) = last {
        println!("final loss_psi {:.4} loss_theta {:.4} code_match_rate {:.3}", r.loss_psi, r.loss_theta, r.code_match_rate);
    }
    println!("checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}
