//! Finite-difference checks for every autodiff operator, then for a small
//! hand-built network.
//!
//! `cargo run --release --example gradcheck_tour`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdn_autograd::selfcheck::{check_all_operators, random_tensor};
use sdn_autograd::{grad_check, Graph};

fn main() -> Result<(), sdn_autograd::Error> {
    let t = std::time::Instant::now();
    let checks = check_all_operators(20, 0, 1e-3)?;
    for c in &checks {
        println!("{:<24} {:>3} instances  max rel err {:.2e}", c.name, c.instances, c.max_rel_error);
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!("{} operators, worst {worst:.2e}, {:.1?}", checks.len(), t.elapsed());

    // tanh(W2 · leaky_relu(W1 · x)) summed, differentiated with respect to W1.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[5, 4]);
    let w2 = random_tensor(&mut rng, &[3, 6]);
    let w1 = random_tensor(&mut rng, &[6, 4]);
    let err = grad_check(
        |g: &mut Graph<f64>, w1| {
            let xv = g.leaf(x.clone());
            let w2v = g.leaf(w2.clone());
            let h = g.linear(xv, w1, None)?;
            let h = g.leaky_relu(h, 0.2);
            let y = g.linear(h, w2v, None)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        },
        &w1,
        1e-5,
    )?;
    println!("two-layer network: max rel err {err:.2e}");
    Ok(())
}
