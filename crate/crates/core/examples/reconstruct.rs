//! Encodes held-out sprite sets and generates a new set from each code.
//!
//! Writes the inputs under `<out>/input` so the `sdn reconstruct` CLI can be
//! pointed at the same layout.
//!
//! `cargo run --release --example reconstruct -- runs/desk/final.sdn out/recon`

use std::path::Path;

use sdn::data::{Dataset, DatasetDescriptor, Split};
use sdn::model::encode_sets;
use sdn::trainer::load_model;
use sdn::workflows::reconstruct_dir;

fn main() -> sdn::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "runs/desk/final.sdn".into());
    let out = args.next().unwrap_or_else(|| "out/recon".into());
    let out = Path::new(&out);
    let (config, model) = load_model(ckpt.as_ref())?;
    let mut data = Dataset::build(&DatasetDescriptor::from_config(&config))?;
    let keep: Vec<usize> = data.split(Split::Test).iter().copied().take(4).collect();
    data.identities = keep.iter().map(|&i| data.identities[i].clone()).collect();
    data.write_dir(&out.join("input"))?;

    let recon = reconstruct_dir(&model, &out.join("input"), &out.join("output"), 0)?;
    data.train = (0..data.identities.len()).collect();
    let all_views = data.fixed_sets(Split::Train, data.min_views(Split::Train))?;
    let direct = encode_sets(&model, &all_views.flat(), all_views.set_size())?;
    for ((name, code), z) in recon.iter().zip(&direct) {
        println!("{name}: {code} (matches in-memory encoding: {})", code == z);
    }
    println!("generated sets in {}", out.join("output").display());
    Ok(())
}
