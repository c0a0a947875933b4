//! Image-set datasets: procedural sprites or a directory of identities.

pub mod image_io;
pub mod sprites;

use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_autograd::Tensor;

use crate::config::{DataSource, TrainConfig};
use crate::{Error, Result};
use sprites::{render_view, view_params, SpriteIdentity};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDescriptor {
    pub source: DataSource,
    pub identities: usize,
    pub views: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl DatasetDescriptor {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            source: c.data.clone(),
            identities: c.identities,
            views: c.views,
            train_fraction: c.train_fraction,
            seed: c.data_seed,
            image_size: c.image_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// All stored views of one identity, each `3·S·S` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub name: String,
    pub views: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub identities: Vec<Identity>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Synthetic datasets may reuse views when a set needs more than exist.
    pub resample_views: bool,
}

/// `N` sets of `n` images, `[N, n, 3, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch {
    pub images: Tensor<f32>,
    pub identity_ids: Vec<usize>,
}

impl SetBatch {
    pub fn new(images: Tensor<f32>, identity_ids: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 5 || s[0] != identity_ids.len() {
            return Err(Error::Invalid(format!("set batch needs [N, n, C, H, W] with N labels, got {s:?}")));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid("set batch pixels must lie in [-1, 1]".into()));
        }
        Ok(Self { images, identity_ids })
    }

    pub fn num_sets(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn set_size(&self) -> usize {
        self.images.shape()[1]
    }

    /// All images as `[N·n, 3, S, S]`.
    pub fn flat(&self) -> Tensor<f32> {
        let s = self.images.shape();
        self.images.clone().reshape(&[s[0] * s[1], s[2], s[3], s[4]]).expect("same length")
    }

    /// Set `i` as `[n, 3, S, S]`.
    pub fn set(&self, i: usize) -> Tensor<f32> {
        let s = self.images.shape();
        Tensor::new(&s[1..], self.images.row(i).to_vec()).expect("row shape")
    }
}

fn split_counts(total: usize, fraction: f64) -> usize {
    let k = (total as f64 * fraction).round() as usize;
    if total >= 2 {
        k.clamp(1, total - 1)
    } else {
        k.min(total)
    }
}

impl Dataset {
    pub fn build(desc: &DatasetDescriptor) -> Result<Self> {
        match &desc.source {
            DataSource::Synthetic => Self::synthetic(desc),
            DataSource::Directory(root) => Self::from_directory(root, desc),
        }
    }

    /// Renders `identities × views` sprites; the first identities form the train split.
    pub fn synthetic(desc: &DatasetDescriptor) -> Result<Self> {
        if desc.identities == 0 || desc.views == 0 {
            return Err(Error::Data("synthetic dataset needs identities and views".into()));
        }
        let mut identities = Vec::with_capacity(desc.identities);
        for id in 0..desc.identities {
            let sprite = SpriteIdentity::from_id(desc.seed, id)?;
            let views = (0..desc.views)
                .map(|v| Ok(render_view(&sprite, &view_params(desc.seed, id, v)?, desc.image_size)?.into_data()))
                .collect::<Result<Vec<_>>>()?;
            identities.push(Identity { name: format!("id{id:03}"), views });
        }
        let k = split_counts(desc.identities, desc.train_fraction);
        Ok(Self {
            image_size: desc.image_size,
            identities,
            train: (0..k).collect(),
            test: (k..desc.identities).collect(),
            resample_views: true,
        })
    }

    /// Loads `root/<identity>/<images>`; identities are split after a seeded shuffle.
    pub fn from_directory(root: &Path, desc: &DatasetDescriptor) -> Result<Self> {
        let index = load_image_dataset(root)?;
        let mut identities = Vec::new();
        for (name, paths) in index {
            let mut views = Vec::new();
            for p in paths {
                match image_io::read_image(&p).and_then(|img| image_io::to_tensor(&img, desc.image_size)) {
                    Ok(t) => views.push(t.into_data()),
                    Err(e) => log::warn!("skipping {}: {e}", p.display()),
                }
            }
            if views.is_empty() {
                log::warn!("identity {name} has no readable images; excluded");
            } else {
                identities.push(Identity { name, views });
            }
        }
        let mut order: Vec<usize> = (0..identities.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(desc.seed));
        let k = split_counts(identities.len(), desc.train_fraction);
        let mut train = order[..k].to_vec();
        let mut test = order[k..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self { image_size: desc.image_size, identities, train, test, resample_views: false })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn image_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn min_views(&self, split: Split) -> usize {
        self.split(split).iter().map(|&i| self.identities[i].views.len()).min().unwrap_or(0)
    }

    fn pick_views(&self, id: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let avail = self.identities[id].views.len();
        if n <= avail {
            Ok(index::sample(rng, avail, n).into_vec())
        } else if self.resample_views {
            Ok((0..n).map(|_| rng.random_range(0..avail)).collect())
        } else {
            Err(Error::Data(format!(
                "identity {} has {avail} views, a set needs {n}",
                self.identities[id].name
            )))
        }
    }

    /// `N` distinct identities from the split, `n` random views each.
    pub fn sample_set_batch(&self, split: Split, sets: usize, n: usize, rng: &mut impl Rng) -> Result<SetBatch> {
        let pool = self.split(split);
        if sets == 0 || n == 0 {
            return Err(Error::Invalid("a batch needs at least one set of one image".into()));
        }
        if pool.len() < sets {
            return Err(Error::Data(format!("split has {} identities, batch needs {sets}", pool.len())));
        }
        let chosen: Vec<usize> = index::sample(rng, pool.len(), sets).into_iter().map(|i| pool[i]).collect();
        let mut data = Vec::with_capacity(sets * n * self.image_len());
        for &id in &chosen {
            for v in self.pick_views(id, n, rng)? {
                data.extend_from_slice(&self.identities[id].views[v]);
            }
        }
        let s = self.image_size;
        SetBatch::new(Tensor::new(&[sets, n, 3, s, s], data)?, chosen)
    }

    /// Every identity of the split with its first `n` views, in split order.
    pub fn fixed_sets(&self, split: Split, n: usize) -> Result<SetBatch> {
        let pool = self.split(split);
        if pool.is_empty() {
            return Err(Error::Data("split has no identities".into()));
        }
        if n == 0 || n > self.min_views(split) {
            return Err(Error::Data(format!("need {n} views per identity, smallest has {}", self.min_views(split))));
        }
        let mut data = Vec::with_capacity(pool.len() * n * self.image_len());
        for &id in pool {
            for v in &self.identities[id].views[..n] {
                data.extend_from_slice(v);
            }
        }
        let s = self.image_size;
        SetBatch::new(Tensor::new(&[pool.len(), n, 3, s, s], data)?, pool.to_vec())
    }

    pub fn view(&self, id: usize, v: usize) -> Tensor<f32> {
        let s = self.image_size;
        Tensor::new(&[3, s, s], self.identities[id].views[v].clone()).expect("view shape")
    }

    /// Writes the dataset as `root/<identity>/<view>.png`.
    pub fn write_dir(&self, root: &Path) -> Result<()> {
        for ident in &self.identities {
            let dir = root.join(&ident.name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (v, pixels) in ident.views.iter().enumerate() {
                let s = self.image_size;
                let t = Tensor::new(&[3, s, s], pixels.clone())?;
                image_io::write_png(&dir.join(format!("{v:03}.png")), &t)?;
            }
        }
        Ok(())
    }
}

/// Identity directories under `root` and their image files, both sorted by name.
/// Directories without image files are dropped.
pub fn load_image_dataset(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "ppm"))
            })
            .collect();
        files.sort();
        if !files.is_empty() {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((name, files));
        }
    }
    Ok(out)
}
