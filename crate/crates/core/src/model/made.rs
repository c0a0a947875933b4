//! MADE connectivity masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Binary masks for a MADE network over `d_z` bits in natural order.
#[derive(Clone, Debug, PartialEq)]
pub struct MadeMasks {
    pub d_z: usize,
    /// Bit `order[i]` is the `i`-th variable of the factorization.
    pub order: Vec<usize>,
    /// Degrees of each hidden layer's units.
    pub degrees: Vec<Vec<usize>>,
    /// One `[out, in]` row-major 0/1 mask per layer, hidden layers first.
    pub masks: Vec<Vec<u8>>,
    pub shapes: Vec<(usize, usize)>,
}

impl MadeMasks {
    /// `composite[i][j] > 0` iff some path connects input `j` to output `i`.
    pub fn composite(&self) -> Vec<Vec<u64>> {
        let mut acc: Vec<Vec<u64>> = (0..self.d_z).map(|j| (0..self.d_z).map(|k| u64::from(j == k)).collect()).collect();
        // acc is [cols_so_far, d_z]; start as identity over inputs.
        for (mask, &(out, inp)) in self.masks.iter().zip(&self.shapes) {
            let mut next = vec![vec![0u64; self.d_z]; out];
            for (o, row) in next.iter_mut().enumerate() {
                for i in 0..inp {
                    if mask[o * inp + i] != 0 {
                        for (r, &a) in row.iter_mut().zip(&acc[i]) {
                            *r += a;
                        }
                    }
                }
            }
            acc = next;
        }
        acc
    }
}

/// Builds masks for hidden layers of the given sizes plus the output layer.
///
/// Hidden degrees are drawn uniformly from `[min_prev, max(1, d_z - 1)]`.
pub fn build_made_masks(d_z: usize, hidden: &[usize], seed: u64) -> Result<MadeMasks> {
    if d_z == 0 {
        return Err(Error::Invalid("MADE needs d_z >= 1".into()));
    }
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::Invalid(format!("MADE hidden sizes must be positive, got {hidden:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = (d_z - 1).max(1);
    let mut prev: Vec<usize> = (1..=d_z).collect();
    let mut degrees = Vec::new();
    let mut masks = Vec::new();
    let mut shapes = Vec::new();
    for &h in hidden {
        let lo = (*prev.iter().min().expect("non-empty layer")).min(top);
        let deg: Vec<usize> = (0..h).map(|_| rng.random_range(lo..=top)).collect();
        let mut m = vec![0u8; h * prev.len()];
        for (k, &dk) in deg.iter().enumerate() {
            for (j, &dj) in prev.iter().enumerate() {
                m[k * prev.len() + j] = u8::from(dk >= dj);
            }
        }
        masks.push(m);
        shapes.push((h, prev.len()));
        degrees.push(deg.clone());
        prev = deg;
    }
    let mut m = vec![0u8; d_z * prev.len()];
    for i in 0..d_z {
        for (k, &dk) in prev.iter().enumerate() {
            m[i * prev.len() + k] = u8::from(i + 1 > dk);
        }
    }
    masks.push(m);
    shapes.push((d_z, prev.len()));
    Ok(MadeMasks { d_z, order: (0..d_z).collect(), degrees, masks, shapes })
}
