use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdn::data::image_io::{byte_to_unit, read_image, to_tensor, write_png, Rgb8};
use sdn::data::sprites::{
    foreground_fraction, render_view, view_params, ShapeKind, SpriteIdentity, ViewParams, HUES, IDENTITY_SPACE, SCALES,
};
use sdn::data::{load_image_dataset, Dataset, DatasetDescriptor, Split};
use sdn::DataSource;
use sdn_autograd::Tensor;

fn synthetic(identities: usize, views: usize, seed: u64, size: usize) -> DatasetDescriptor {
    DatasetDescriptor {
        source: DataSource::Synthetic,
        identities,
        views,
        train_fraction: 0.75,
        seed,
        image_size: size,
    }
}

fn golden_path(kind: ShapeKind) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{}_32.f32", kind.name()))
}

/// Hue 0, middle scale, no stroke.
fn canonical(kind_index: usize) -> SpriteIdentity {
    SpriteIdentity::from_combo(kind_index * HUES * SCALES.len() * 2 + 2)
}

#[test]
fn canonical_views_match_golden_files() {
    let bless = std::env::var_os("SDN_BLESS").is_some();
    for (k, kind) in ShapeKind::ALL.into_iter().enumerate() {
        let id = canonical(k);
        assert_eq!(id.shape, kind);
        let img = render_view(&id, &ViewParams::CANONICAL, 32).unwrap();
        let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = golden_path(kind);
        if bless {
            fs::write(&path, &bytes).unwrap();
        }
        let golden = fs::read(&path).unwrap_or_else(|_| panic!("missing {}; rerun with SDN_BLESS=1", path.display()));
        assert!(golden == bytes, "{} differs from its golden image", kind.name());
    }
}

#[test]
fn regeneration_is_bitwise_identical() {
    let a = Dataset::synthetic(&synthetic(12, 5, 3, 32)).unwrap();
    let b = Dataset::synthetic(&synthetic(12, 5, 3, 32)).unwrap();
    assert!(a.identities.iter().zip(&b.identities).all(|(x, y)| x.views == y.views));
    assert_eq!((a.train.clone(), a.test.clone()), (b.train, b.test));
    let c = Dataset::synthetic(&synthetic(12, 5, 4, 32)).unwrap();
    assert!(a.identities.iter().zip(&c.identities).any(|(x, y)| x.views != y.views));
}

#[test]
fn sprites_cover_a_moderate_share_of_the_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for combo in 0..IDENTITY_SPACE {
        let id = SpriteIdentity::from_combo(combo);
        for view in [ViewParams::CANONICAL, ViewParams::sample(&id, &mut rng), ViewParams::sample(&id, &mut rng)] {
            let img = render_view(&id, &view, 32).unwrap();
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let f = foreground_fraction(&img);
            lo = lo.min(f);
            hi = hi.max(f);
        }
    }
    assert!(lo >= 0.05 && hi <= 0.60, "coverage range [{lo}, {hi}]");
}

#[test]
fn sampled_views_stay_in_frame() {
    for id in 0..IDENTITY_SPACE {
        let sprite = SpriteIdentity::from_id(9, id).unwrap();
        let v = view_params(9, id, 3).unwrap();
        let m = ViewParams::max_shift(sprite.scale);
        assert!(v.shift.iter().all(|s| s.abs() <= m));
        assert!((0.0..std::f64::consts::TAU).contains(&v.angle));
    }
    assert!(SpriteIdentity::from_id(0, IDENTITY_SPACE).is_err());
}

#[test]
fn batches_hold_one_identity_per_set() {
    let d = Dataset::synthetic(&synthetic(8, 10, 1, 32)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = d.sample_set_batch(Split::Train, 2, 8, &mut rng).unwrap();
    assert_eq!(b.images.shape(), &[2, 8, 3, 32, 32]);
    assert_ne!(b.identity_ids[0], b.identity_ids[1]);
    for (s, &id) in b.identity_ids.iter().enumerate() {
        assert!(d.train.contains(&id));
        let set = b.set(s);
        for img in set.data().chunks(d.image_len()) {
            assert!(d.identities[id].views.iter().any(|v| v == img));
        }
    }
    assert!(d.sample_set_batch(Split::Train, 7, 8, &mut rng).is_err());
}

#[test]
fn identities_are_drawn_uniformly() {
    let d = Dataset::synthetic(&synthetic(16, 2, 1, 16)).unwrap();
    let pool = d.train.len();
    let (batches, sets) = (10_000usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = vec![0usize; d.identities.len()];
    for _ in 0..batches {
        for id in d.sample_set_batch(Split::Train, sets, 1, &mut rng).unwrap().identity_ids {
            counts[id] += 1;
        }
    }
    // Each identity joins a batch with probability sets/pool, independently per batch.
    let p = sets as f64 / pool as f64;
    let mean = batches as f64 * p;
    let sd = (batches as f64 * p * (1.0 - p)).sqrt();
    // Sum of squared z-scores against its own 3σ band; a per-identity 3σ test
    // across the whole pool would trip on chance alone.
    let chi2: f64 = d.train.iter().map(|&id| ((counts[id] as f64 - mean) / sd).powi(2)).sum();
    let df = pool as f64;
    assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 {chi2} over {pool} identities");
    assert!(d.test.iter().all(|&id| counts[id] == 0));
}

#[test]
fn splits_are_disjoint() {
    for seed in 0..4 {
        let d = Dataset::synthetic(&synthetic(20, 1, seed, 16)).unwrap();
        assert_eq!(d.train.len() + d.test.len(), 20);
        assert!(d.train.iter().all(|i| !d.test.contains(i)));
    }
}

fn write_identity_dirs(root: &Path, identities: usize, files: usize, size: usize) {
    for i in 0..identities {
        let dir = root.join(format!("person{i}"));
        fs::create_dir_all(&dir).unwrap();
        for f in 0..files {
            let img = Tensor::full(&[3, size, size], (i * files + f) as f32 / 40.0 - 0.5);
            write_png(&dir.join(format!("{f:02}.png")), &img).unwrap();
        }
    }
}

#[test]
fn loader_indexes_identity_directories() {
    let root = tempfile::tempdir().unwrap();
    write_identity_dirs(root.path(), 3, 10, 8);
    fs::write(root.path().join("person0/notes.txt"), "not an image").unwrap();
    fs::create_dir(root.path().join("empty")).unwrap();
    let index = load_image_dataset(root.path()).unwrap();
    assert_eq!(index.len(), 3);
    assert!(index.iter().all(|(_, paths)| paths.len() == 10));
}

#[test]
fn unreadable_files_are_skipped() {
    let root = tempfile::tempdir().unwrap();
    write_identity_dirs(root.path(), 2, 3, 8);
    fs::write(root.path().join("person1/03.png"), b"\x89PNG broken").unwrap();
    fs::create_dir(root.path().join("ghost")).unwrap();
    fs::write(root.path().join("ghost/00.png"), b"junk").unwrap();
    let mut desc = synthetic(0, 0, 0, 8);
    desc.source = DataSource::Directory(root.path().to_path_buf());
    let d = Dataset::build(&desc).unwrap();
    assert_eq!(d.identities.len(), 2);
    assert!(d.identities.iter().all(|i| i.views.len() == 3));
}

#[test]
fn empty_root_yields_nothing_to_evaluate() {
    let root = tempfile::tempdir().unwrap();
    assert!(load_image_dataset(root.path()).unwrap().is_empty());
    let mut desc = synthetic(0, 0, 0, 16);
    desc.source = DataSource::Directory(root.path().to_path_buf());
    let d = Dataset::build(&desc).unwrap();
    assert!(d.identities.is_empty());
    assert!(d.fixed_sets(Split::Test, 1).is_err());
}

#[test]
fn directory_sets_cannot_exceed_available_views() {
    let root = tempfile::tempdir().unwrap();
    write_identity_dirs(root.path(), 4, 3, 8);
    let mut desc = synthetic(0, 0, 0, 8);
    desc.source = DataSource::Directory(root.path().to_path_buf());
    desc.train_fraction = 1.0;
    let d = Dataset::build(&desc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(d.sample_set_batch(Split::Train, 2, 3, &mut rng).is_ok());
    assert!(d.sample_set_batch(Split::Train, 2, 4, &mut rng).is_err());
}

#[test]
fn pixel_bytes_map_affinely_to_unit_range() {
    assert_eq!(byte_to_unit(0), -1.0);
    assert_eq!(byte_to_unit(255), 1.0);
    assert_eq!(byte_to_unit(128), (2.0 * 128.0 / 255.0 - 1.0) as f32);
}

#[test]
fn loaded_images_are_resized_to_the_config_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.png");
    let img = Tensor::from_fn(&[3, 64, 64], |i| if i < 64 * 64 { 1.0 } else { -1.0 });
    write_png(&path, &img).unwrap();
    let small = to_tensor(&read_image(&path).unwrap(), 32).unwrap();
    assert_eq!(small.shape(), &[3, 32, 32]);
    assert!(small.data()[..32 * 32].iter().all(|&v| v == 1.0));
    assert!(small.data()[32 * 32..].iter().all(|&v| v == -1.0));
    let odd = Rgb8 { width: 5, height: 7, pixels: vec![200; 5 * 7 * 3] };
    let t = to_tensor(&odd, 16).unwrap();
    assert!(t.data().iter().all(|&v| (v - byte_to_unit(200)).abs() < 1e-6));
}

#[test]
fn synthetic_datasets_roundtrip_through_the_directory_layout() {
    let root = tempfile::tempdir().unwrap();
    let d = Dataset::synthetic(&synthetic(4, 3, 5, 16)).unwrap();
    d.write_dir(root.path()).unwrap();
    let mut desc = synthetic(0, 0, 0, 16);
    desc.source = DataSource::Directory(root.path().to_path_buf());
    let back = Dataset::build(&desc).unwrap();
    assert_eq!(back.identities.len(), 4);
    for (a, b) in d.identities.iter().zip(&back.identities) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.views.iter().zip(&b.views) {
            assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1.0 / 255.0 + 1e-6));
        }
    }
}
