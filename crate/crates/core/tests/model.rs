use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn::model::{
    aggregate_codes, build_made_masks, encode_set, encode_sets, generate_set, image_energy, prior_log_prob,
    prior_log_probs, prior_sample, prior_samples, Arch, Forward, GeneratorNoise, Mode, Model, SetCode,
};
use sdn::TrainConfig;
use sdn_autograd::{Graph, Tensor};

fn tiny(d_z: usize) -> Arch {
    let mut c = TrainConfig::tiny();
    c.d_z = d_z;
    Arch::from_config(&c)
}

fn images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 3, size, size], |_| rng.random_range(-1.0..=1.0))
}

fn zero_prior(m: &mut Model<f64>) {
    for (k, t) in m.params.iter_mut() {
        if k.starts_with("prior.") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

#[test]
fn stub_codes_aggregate_by_mean_then_sign() {
    let mut g = Graph::<f64>::new();
    let c = g.leaf(Tensor::new(&[2, 2], vec![0.5, -0.5, -0.1, -0.5]).unwrap());
    let z = aggregate_codes(&mut g, c, 2).unwrap();
    assert_eq!(g.value(z).data(), &[1.0, -1.0]);
    let z1 = aggregate_codes(&mut g, c, 1).unwrap();
    assert_eq!(g.value(z1).data(), &[1.0, -1.0, -1.0, -1.0]);
}

#[test]
fn empty_or_ragged_sets_are_rejected() {
    let m = Model::<f32>::init(tiny(8), 0).unwrap();
    let x = images(&mut ChaCha8Rng::seed_from_u64(0), 6, 16);
    assert!(encode_sets(&m, &x, 0).is_err());
    assert!(encode_sets(&m, &x, 4).is_err());
    assert_eq!(encode_sets(&m, &x, 3).unwrap().len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn set_code_ignores_order(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::<f32>::init(tiny(8), seed).unwrap();
        let x = images(&mut rng, n, 16);
        let z = encode_set(&m, &x).unwrap();
        let per = x.len() / n;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<f32> = order.iter().flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec()).collect();
        let y = Tensor::new(x.shape(), shuffled).unwrap();
        prop_assert_eq!(encode_set(&m, &y).unwrap(), z);
    }
}

#[test]
fn energy_with_silent_networks_is_squared_norm() {
    let mut m = Model::<f64>::init(tiny(8), 1).unwrap();
    for k in ["dec.out.w", "dec.out.b", "unary.fc2.w", "unary.fc2.b"] {
        let t = m.params.get_mut(k).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = images(&mut rng, 1, 16).cast::<f64>();
    let z = SetCode::from_index(37, 8);
    let e = image_energy(&m, &x, &z).unwrap();
    let norm: f64 = x.data().iter().map(|v| v * v).sum();
    assert!((e - norm).abs() < 1e-9, "{e} vs {norm}");
}

#[test]
fn energy_is_reconstruction_plus_unary() {
    let m = Model::<f64>::init(tiny(8), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = images(&mut rng, 1, 16).cast::<f64>();
    let z = SetCode::from_index(200, 8);
    let mut f = Forward::frozen(&m, Mode::INFERENCE).unwrap();
    let xv = f.g.leaf(x.clone());
    let zv = f.g.leaf(Tensor::new(&[1, 8], z.values()).unwrap());
    let c = f.image_codes(xv).unwrap();
    let d = f.decode(zv, c).unwrap();
    let u = f.unary(c).unwrap();
    let recon: f64 = x.data().iter().zip(f.g.value(d).data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let expected = recon + f.g.value(u).item();
    let e = image_energy(&m, &x, &z).unwrap();
    assert!((e - expected).abs() < 1e-6);
    assert!(recon >= 0.0);
}

#[test]
fn generation_is_deterministic_bounded_and_noise_sensitive() {
    let m = Model::<f32>::init(tiny(8), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = SetCode::from_index(11, 8);
    let noise = GeneratorNoise::sample(&mut rng, 2, m.arch.d_noise);
    let a = generate_set(&m, &z, &noise).unwrap();
    let b = generate_set(&m, &z, &noise).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let per = a.len() / 2;
    let gap: f32 = a.data()[..per].iter().zip(&a.data()[per..]).map(|(p, q)| (p - q) * (p - q)).sum();
    assert!(gap > 0.0);
    assert!(generate_set(&m, &SetCode::from_index(1, 4), &noise).is_err());
}

#[test]
fn zero_weight_prior_is_uniform() {
    let mut m = Model::<f64>::init(tiny(2), 0).unwrap();
    zero_prior(&mut m);
    for i in 0..4 {
        let lp = prior_log_prob(&m, &SetCode::from_index(i, 2)).unwrap();
        assert!((lp - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn prior_sums_to_one_over_all_codes() {
    for seed in 0..3 {
        let m = Model::<f64>::init(tiny(10), seed).unwrap();
        let codes: Vec<SetCode> = (0..1024).map(|i| SetCode::from_index(i, 10)).collect();
        let total: f64 = prior_log_probs(&m, &codes).unwrap().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6, "seed {seed}: {total}");
    }
}

#[test]
fn made_logits_ignore_current_and_later_bits() {
    let d = 6;
    let mut m = Model::<f64>::init(tiny(d), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (k, t) in m.params.iter_mut() {
        if k.starts_with("prior.") && k.ends_with(".b") {
            *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.5..0.5));
        }
    }
    let z = SetCode::from_index(0b101101, d);
    for i in 0..d {
        let mut f = Forward::frozen(&m, Mode::INFERENCE).unwrap();
        let zv = f.g.leaf(Tensor::new(&[1, d], z.values()).unwrap());
        let logits = f.prior_logits(zv).unwrap();
        let pick = f.g.leaf(Tensor::from_fn(&[1, d], |j| if j == i { 1.0 } else { 0.0 }));
        let li = f.g.mul(logits, pick).unwrap();
        let li = f.g.sum(li);
        let grads = f.g.backward(li, &[zv]).unwrap();
        let row = grads.get(zv).unwrap().data();
        for (j, &v) in row.iter().enumerate() {
            if j >= i {
                assert_eq!(v, 0.0, "logit {i} depends on bit {j}");
            }
        }
        if i > 0 {
            assert!(row[..i].iter().any(|&v| v != 0.0), "logit {i} sees no earlier bit");
        }
    }
    assert!(build_made_masks(d, &[], 0).is_err());
}

#[test]
fn uniform_prior_samples_fair_bits() {
    let mut m = Model::<f64>::init(tiny(10), 0).unwrap();
    zero_prior(&mut m);
    let n = 100_000;
    let samples = prior_samples(&m, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for i in 0..10 {
        let ones = samples.iter().filter(|s| s.bits()[i] == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }
}

#[test]
fn prior_samples_follow_the_enumerated_distribution() {
    let d = 8;
    let m = Model::<f64>::init(tiny(d), 4).unwrap();
    let codes: Vec<SetCode> = (0..256).map(|i| SetCode::from_index(i, d)).collect();
    let p: Vec<f64> = prior_log_probs(&m, &codes).unwrap().iter().map(|v| v.exp()).collect();
    let n = 100_000;
    let mut counts = vec![0usize; 256];
    for s in prior_samples(&m, n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap() {
        let idx = s.bits().iter().enumerate().fold(0, |a, (i, &b)| a | (usize::from(b > 0) << i));
        counts[idx] += 1;
    }
    // Pearson statistic against its own 3σ band (df = 255).
    let chi2: f64 = counts.iter().zip(&p).map(|(&c, &q)| (c as f64 - n as f64 * q).powi(2) / (n as f64 * q)).sum();
    let df: f64 = 255.0;
    assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 {chi2}");
}

#[test]
fn prior_sampling_is_seeded() {
    let m = Model::<f32>::init(tiny(12), 0).unwrap();
    let a = prior_sample(&m, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, prior_sample(&m, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
}

#[test]
fn set_codes_are_strictly_binary() {
    assert!(SetCode::new(vec![1, 0, -1]).is_err());
    assert!(SetCode::from_values(&[1.0f32, 0.5]).is_err());
    assert_eq!(SetCode::from_signs(&[0.0f32, -0.0, -1e-9]).bits(), &[1, 1, -1]);
}

/// Finite differences through whole networks, spectral norm vectors held fixed.
#[test]
fn model_gradients_match_finite_differences() {
    let mut c = TrainConfig::tiny();
    c.self_attention = true;
    let mut m = Model::<f64>::init(Arch::from_config(&c), 11).unwrap();
    for name in ["enc.attn.gamma", "gen.attn.gamma"] {
        m.params.insert(name.into(), Tensor::scalar(0.7));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = images(&mut rng, 4, 16).cast::<f64>();
    let noise = Tensor::from_fn(&[4, c.d_noise], |_| rng.random_range(-1.0..1.0));
    let z = Tensor::from_fn(&[4, c.d_z], |i| if (i * 7) % 3 == 0 { 1.0 } else { -1.0 });
    let probe = Tensor::from_fn(&[4, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
    let mode = Mode { advance: None, batch_stats: true, update_running: false };
    let loss = |m: &Model<f64>| -> (f64, std::collections::BTreeMap<String, Tensor<f64>>) {
        let mut f = Forward::frozen(m, mode).unwrap();
        let xv = f.g.leaf(x.clone());
        let zv = f.g.leaf(z.clone());
        let nv = f.g.leaf(noise.clone());
        let gen = f.generate(zv, nv).unwrap();
        let both = f.g.add(gen, xv).unwrap();
        let cod = f.image_codes(both).unwrap();
        let (recon, unary) = f.energy_terms(xv, zv, cod).unwrap();
        let pv = f.g.leaf(probe.clone());
        let gp = f.g.mul(gen, pv).unwrap();
        let terms = [f.g.sum(recon), f.g.sum(unary), f.g.sum(gp), f.g.sum(cod)];
        let mut total = terms[0];
        for t in &terms[1..] {
            total = f.g.add(total, *t).unwrap();
        }
        let grads = f.g.backward_params(total, |_| true).unwrap();
        (f.g.value(total).item(), grads)
    };
    let (_, grads) = loss(&m);
    let h = 1e-5;
    let names = [
        "enc.conv0.w", "enc.attn.q.w", "enc.attn.v.w", "enc.attn.gamma", "enc.head.w", "dec.fc.w", "dec.conv1.w",
        "unary.fc1.w", "gen.fc.w", "gen.bn0.gamma", "gen.attn.k.w", "gen.attn.gamma", "gen.out.w",
    ];
    for name in names {
        let g = &grads[name];
        for probe_idx in [0, g.len() / 2, g.len() - 1] {
            let orig = m.params[name].data()[probe_idx];
            m.params.get_mut(name).unwrap().data_mut()[probe_idx] = orig + h;
            let up = loss(&m).0;
            m.params.get_mut(name).unwrap().data_mut()[probe_idx] = orig - h;
            let down = loss(&m).0;
            m.params.get_mut(name).unwrap().data_mut()[probe_idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.data()[probe_idx];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            assert!(rel < 1e-4, "{name}[{probe_idx}]: autodiff {a} vs fd {fd}");
        }
    }
}
