//! Renders every shape kind in its canonical pose followed by random views.
//!
//! `cargo run --release --example render_sprites -- out/sprites.png`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdn::data::image_io::{tile_row, write_png};
use sdn::data::sprites::{foreground_fraction, render_view, ShapeKind, SpriteIdentity, ViewParams, HUES, SCALES};
use sdn_autograd::Tensor;

const SIZE: usize = 32;
const VIEWS: usize = 7;

fn main() -> sdn::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/sprites.png".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    for (k, kind) in ShapeKind::ALL.into_iter().enumerate() {
        let id = SpriteIdentity::from_combo(k * HUES * SCALES.len() * 2 + 7 * 6 + 3);
        let mut views = vec![ViewParams::CANONICAL];
        views.extend((0..VIEWS).map(|_| ViewParams::sample(&id, &mut rng)));
        let mut pixels = Vec::new();
        for v in &views {
            let img = render_view(&id, v, SIZE)?;
            print!("{:.2} ", foreground_fraction(&img));
            pixels.extend(img.into_data());
        }
        println!("<- {} coverage", kind.name());
        rows.push(tile_row(&Tensor::new(&[views.len(), 3, SIZE, SIZE], pixels)?)?);
    }
    // Stack rows vertically: channel planes are contiguous per row image.
    let w = SIZE * (VIEWS + 1);
    let mut sheet = vec![0f32; 3 * SIZE * rows.len() * w];
    for (r, row) in rows.iter().enumerate() {
        for c in 0..3 {
            let src = &row.data()[c * SIZE * w..(c + 1) * SIZE * w];
            let dst = (c * rows.len() + r) * SIZE * w;
            sheet[dst..dst + SIZE * w].copy_from_slice(src);
        }
    }
    if let Some(dir) = std::path::Path::new(&out).parent() {
        std::fs::create_dir_all(dir).map_err(|e| sdn::Error::Data(format!("{}: {e}", dir.display())))?;
    }
    write_png(out.as_ref(), &Tensor::new(&[3, SIZE * rows.len(), w], sheet)?)?;
    println!("wrote {out}");
    Ok(())
}
