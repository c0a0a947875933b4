//! Draws set codes from the learned prior and writes one generated set per code.
//!
//! `cargo run --release --example sample_sets -- runs/desk/final.sdn out/samples`

use sdn::trainer::load_model;
use sdn::workflows::sample_to_dir;

fn main() -> sdn::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "runs/desk/final.sdn".into());
    let out = args.next().unwrap_or_else(|| "out/samples".into());
    let (config, model) = load_model(ckpt.as_ref())?;
    let codes = sample_to_dir(&model, 6, config.set_size, 0, out.as_ref())?;
    for (i, c) in codes.iter().enumerate() {
        println!("set_{i:03} {c}");
    }
    println!("wrote {} sets of {} to {out}", codes.len(), config.set_size);
    Ok(())
}
