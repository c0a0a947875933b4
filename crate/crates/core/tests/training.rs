use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sdn::checkpoint::Checkpoint;
use sdn::data::{Dataset, DatasetDescriptor, Split};
use sdn::model::Group;
use sdn::trainer::{run_training, step_rng, Trainer, METRICS_HEADER};
use sdn::{DataSource, Error, TrainConfig};
use sdn_autograd::Tensor;

fn config(out: &Path, iters: u64) -> TrainConfig {
    let mut c = TrainConfig::tiny();
    c.iters = iters;
    c.out_dir = out.to_path_buf();
    c
}

fn data(c: &TrainConfig) -> Dataset {
    Dataset::build(&DatasetDescriptor::from_config(c)).unwrap()
}

fn group_state(t: &Trainer, group: Group) -> (BTreeMap<String, Tensor<f32>>, Vec<String>) {
    let params = t.model.params.iter().filter(|(k, _)| Group::of(k) == group).map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut aux: Vec<String> =
        t.model.sn.iter().filter(|(k, _)| Group::of(k) == group).map(|(k, v)| format!("{k}{v:?}")).collect();
    aux.extend(t.model.bn.iter().filter(|(k, _)| Group::of(k) == group).map(|(k, v)| format!("{k}{v:?}")));
    (params, aux)
}

#[test]
fn each_half_step_touches_only_its_own_group() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), 1);
    let d = data(&c);
    let mut t = Trainer::new(c.clone()).unwrap();
    let mut rng = step_rng(c.seed, 0);
    let batch = d.sample_set_batch(Split::Train, c.batch_sets, c.set_size, &mut rng).unwrap();

    let theta = group_state(&t, Group::Theta);
    let psi = group_state(&t, Group::Psi);
    let (_, codes) = t.psi_step(&batch, &mut rng).unwrap();
    assert_eq!(group_state(&t, Group::Theta), theta);
    assert_ne!(group_state(&t, Group::Psi).0, psi.0);
    assert_eq!((t.adam_g.t, t.adam_d.t), (1, 0));

    let psi = group_state(&t, Group::Psi);
    t.theta_step(&batch, &codes, &mut rng).unwrap();
    assert_eq!(group_state(&t, Group::Psi), psi);
    assert_ne!(group_state(&t, Group::Theta).0, theta.0);
    assert_eq!((t.adam_g.t, t.adam_d.t), (1, 1));
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(config(dir.path(), 1)).unwrap();
    let before = t.model.params.clone();
    let zeros: BTreeMap<String, Tensor<f32>> =
        before.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
    t.adam_d.step(&mut t.model.params, &zeros).unwrap();
    assert_eq!(t.model.params, before);
    assert_eq!(t.adam_d.t, 1);
    assert!(t.adam_d.v.values().all(|v| v.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), 3);
    let d = data(&c);
    let run = || {
        let mut t = Trainer::new(c.clone()).unwrap();
        let rows: Vec<String> = (0..3).map(|_| t.train_step(&d).unwrap().csv()).collect();
        (rows, t.to_checkpoint().to_bytes().unwrap())
    };
    assert_eq!(run(), run());
    let mut other = c.clone();
    other.seed = 1;
    let mut t = Trainer::new(other).unwrap();
    assert_ne!(t.train_step(&d).unwrap().csv(), run().0[0]);
}

#[test]
fn split_resume_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = run_training(&config(a.path(), 8), None, None).unwrap();
    let half = run_training(&config(b.path(), 4), None, None).unwrap();
    let resumed = run_training(&config(b.path(), 8), Some(&half.final_checkpoint), None).unwrap();
    assert_eq!(resumed.trainer.step, 8);
    assert_eq!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(b.path().join("metrics.csv")).unwrap());
    // Configs differ only in out_dir.
    let (x, y) = (Checkpoint::load(&full.final_checkpoint).unwrap(), Checkpoint::load(&resumed.final_checkpoint).unwrap());
    assert_eq!((x.tensors, x.seed, x.step), (y.tensors, y.seed, y.step));
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 4);
    c.checkpoint_every = 2;
    c.log_every = 2;
    run_training(&c, None, None).unwrap();
    for name in ["ckpt_000002.sdn", "ckpt_000004.sdn", "final.sdn"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let ckpt = Checkpoint::load(&dir.path().join("ckpt_000002.sdn")).unwrap();
    assert_eq!(ckpt.step, 2);
    assert_eq!(TrainConfig::parse(&ckpt.config).unwrap().iters, 4);
}

#[test]
fn zero_iterations_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&config(dir.path(), 0), None, None).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap().trim_end(), METRICS_HEADER);
    let t = Trainer::load(&out.final_checkpoint).unwrap();
    assert_eq!(t.step, 0);
    assert_eq!(t.model.params, Trainer::new(config(dir.path(), 0)).unwrap().model.params);
}

#[test]
fn empty_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 2);
    c.data = DataSource::Directory(root.path().to_path_buf());
    assert!(run_training(&c, None, None).is_err());
    assert!(!dir.path().join("final.sdn").exists());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&config(dir.path(), 2), None, None).unwrap();
    let bytes = fs::read(&out.final_checkpoint).unwrap();
    let t = Trainer::load(&out.final_checkpoint).unwrap();
    assert_eq!(t.to_checkpoint().to_bytes().unwrap(), bytes);
    assert_eq!(t.model.params, out.trainer.model.params);
    assert_eq!(t.adam_g, out.trainer.adam_g);
    assert_eq!(t.adam_d, out.trainer.adam_d);
    assert_eq!(t.model.sn, out.trainer.model.sn);
    assert_eq!(t.model.bn, out.trainer.model.bn);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&config(dir.path(), 1), None, None).unwrap();
    let mut bytes = fs::read(&out.final_checkpoint).unwrap();
    let bad = dir.path().join("bad.sdn");
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    fs::write(&bad, &wrong).unwrap();
    assert!(matches!(Trainer::load(&bad), Err(Error::Checkpoint(_))));
    bytes.truncate(bytes.len() / 2);
    fs::write(&bad, &bytes).unwrap();
    assert!(matches!(Trainer::load(&bad), Err(Error::Checkpoint(_))));
    let mut ckpt = Checkpoint::load(&out.final_checkpoint).unwrap();
    ckpt.tensors.insert("param/enc.extra".into(), Tensor::zeros(&[1]));
    assert!(Trainer::from_checkpoint(&ckpt).is_err());
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(TrainConfig::load(&dir.join("desk.conf")).unwrap(), TrainConfig::default());
    let mut tiny = TrainConfig::tiny();
    tiny.out_dir = "runs/tiny".into();
    assert_eq!(TrainConfig::load(&dir.join("tiny.conf")).unwrap(), tiny);
}
