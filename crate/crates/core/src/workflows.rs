//! File-level tasks behind the command line: sampling, reconstruction and
//! dataset synthesis.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdn_autograd::Tensor;

use crate::data::{image_io, load_image_dataset, Dataset, DatasetDescriptor};
use crate::eval::generate_sets;
use crate::model::{encode_set, prior_samples, Model, SetCode};
use crate::{DataSource, Error, Result};

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_set(dir: &Path, images: &Tensor<f32>, from: usize, n: usize) -> Result<()> {
    mkdir(dir)?;
    let per = images.len() / images.shape()[0];
    let s = &images.shape()[1..];
    for i in 0..n {
        let t = Tensor::new(s, images.data()[(from + i) * per..(from + i + 1) * per].to_vec())?;
        image_io::write_png(&dir.join(format!("{i:03}.png")), &t)?;
    }
    Ok(())
}

/// Draws `sets` codes from the prior and writes `n` generated images for each
/// to `out/set_###/`, plus `codes.txt`.
pub fn sample_to_dir(model: &Model<f32>, sets: usize, n: usize, seed: u64, out: &Path) -> Result<Vec<SetCode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = prior_samples(model, sets, &mut rng)?;
    let images = generate_sets(model, &codes, n, &mut rng)?;
    mkdir(out)?;
    let mut listing = String::new();
    for (k, c) in codes.iter().enumerate() {
        write_set(&out.join(format!("set_{k:03}")), &images, k * n, n)?;
        let _ = writeln!(listing, "set_{k:03} {c}");
    }
    std::fs::write(out.join("codes.txt"), listing).map_err(|e| Error::io(out, e))?;
    Ok(codes)
}

/// Encodes each input set and writes as many generated images as it had.
///
/// `input` is either one set (image files directly inside) or a dataset root
/// with one sub-directory per set.
pub fn reconstruct_dir(model: &Model<f32>, input: &Path, out: &Path, seed: u64) -> Result<Vec<(String, SetCode)>> {
    let size = model.arch.image_size;
    let sets: Vec<(String, Tensor<f32>)> = {
        let desc = DatasetDescriptor {
            source: DataSource::Directory(input.into()),
            identities: 0,
            views: 0,
            train_fraction: 1.0,
            seed: 0,
            image_size: size,
        };
        let as_root = if load_image_dataset(input)?.is_empty() {
            None
        } else {
            Some(Dataset::from_directory(input, &desc)?)
        };
        match as_root {
            Some(d) => d
                .identities
                .iter()
                .map(|i| {
                    let n = i.views.len();
                    Ok((i.name.clone(), Tensor::new(&[n, 3, size, size], i.views.concat())?))
                })
                .collect::<Result<_>>()?,
            None => {
                let mut files: Vec<_> = std::fs::read_dir(input)
                    .map_err(|e| Error::io(input, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                let mut views = Vec::new();
                for f in files {
                    match image_io::read_image(&f).and_then(|i| image_io::to_tensor(&i, size)) {
                        Ok(t) => views.extend(t.into_data()),
                        Err(e) => log::warn!("skipping {}: {e}", f.display()),
                    }
                }
                if views.is_empty() {
                    return Err(Error::Data(format!("{}: no readable images", input.display())));
                }
                let n = views.len() / (3 * size * size);
                let name = input.file_name().map_or("set".into(), |s| s.to_string_lossy().into_owned());
                vec![(name, Tensor::new(&[n, 3, size, size], views)?)]
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mkdir(out)?;
    let mut listing = String::new();
    let mut result = Vec::new();
    for (name, images) in sets {
        let code = encode_set(model, &images)?;
        let n = images.shape()[0];
        let gen = generate_sets(model, std::slice::from_ref(&code), n, &mut rng)?;
        write_set(&out.join(&name), &gen, 0, n)?;
        let _ = writeln!(listing, "{name} {code}");
        result.push((name, code));
    }
    std::fs::write(out.join("codes.txt"), listing).map_err(|e| Error::io(out, e))?;
    Ok(result)
}

/// Renders a synthetic sprite dataset into the directory layout.
pub fn synth_to_dir(identities: usize, views: usize, seed: u64, size: usize, out: &Path) -> Result<Dataset> {
    let desc = DatasetDescriptor {
        source: DataSource::Synthetic,
        identities,
        views,
        train_fraction: 1.0,
        seed,
        image_size: size,
    };
    let d = Dataset::synthetic(&desc)?;
    d.write_dir(out)?;
    Ok(d)
}
