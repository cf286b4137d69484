use proptest::prelude::*;

use varsig::model::{kl_divergence, GaussianLatent, Method, Model, ModelConfig, Noise, Objective, Stats};
use varsig::physics::fresnel::Field;
use varsig::physics::{FresnelConfig, FresnelModel, PhysicsConfig, StreakingConfig, StreakingModel, VideoCsConfig, VideoCsModel};
use varsig::rng::SplitMix64;
use varsig::train::{Example, Trainer};
use varsig::types::ForwardModel;

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    d / b.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()))
}

fn small_streaking() -> StreakingModel {
    StreakingModel::new(StreakingConfig {
        n_energy: 16,
        n_delay: 5,
        steps_per_delay: 12,
        ..Default::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn streak_traces_are_nonnegative_and_cep_invariant(seed in any::<u64>(), cep in -10.0f64..10.0) {
        let sm = small_streaking();
        let (x, r) = sm.random_phases(&mut SplitMix64::new(seed));
        let a = sm.apply_flat(&sm.signal_from_phases(&x, &r).unwrap()).unwrap();
        prop_assert!(a.iter().all(|v| *v >= 0.0));
        let mut x2 = x;
        x2.k[0] += cep;
        let b = sm.apply_flat(&sm.signal_from_phases(&x2, &r).unwrap()).unwrap();
        prop_assert!(rel_diff(&b, &a) < 1e-9);
    }

    #[test]
    fn arbitrary_streaking_signals_give_nonnegative_traces(seed in any::<u64>()) {
        let sm = small_streaking();
        let mut rng = SplitMix64::new(seed);
        let f: Vec<f64> = (0..sm.signal_len()).map(|_| rng.normal()).collect();
        prop_assert!(sm.apply_flat(&f).unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn video_compression_is_linear_with_exact_adjoint(
        seed in any::<u64>(),
        mask_seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let vm = VideoCsModel::new(VideoCsConfig { n: 6, mask_seed, ..Default::default() }).unwrap();
        let mut rng = SplitMix64::new(seed);
        let f1 = rng.normals(vm.signal_len());
        let f2 = rng.normals(vm.signal_len());
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let (g1, g2) = (vm.compress(&f1).unwrap(), vm.compress(&f2).unwrap());
        let want: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        for (x, y) in vm.compress(&mix).unwrap().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        prop_assert_eq!(vm.compress(&f1).unwrap(), vm.as_matrix().matvec(&f1));

        let y = rng.normals(vm.measurement_len());
        let lhs: f64 = g1.iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = f1.iter().zip(vm.adjoint(&y).unwrap()).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn fresnel_is_linear_and_holograms_nonnegative(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let fm = FresnelModel::new(FresnelConfig { n: 16, ..Default::default() }).unwrap();
        let mut rng = SplitMix64::new(seed);
        let mut field = || Field { re: rng.normals(256), im: rng.normals(256) };
        let (e1, e2) = (field(), field());
        let mix = Field {
            re: e1.re.iter().zip(&e2.re).map(|(x, y)| a * x + b * y).collect(),
            im: e1.im.iter().zip(&e2.im).map(|(x, y)| a * x + b * y).collect(),
        };
        let flat = |e: &Field| -> Vec<f64> { e.re.iter().chain(&e.im).copied().collect() };
        let d1 = flat(&fm.propagate(&e1).unwrap());
        let d2 = flat(&fm.propagate(&e2).unwrap());
        let want: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(rel_diff(&flat(&fm.propagate(&mix).unwrap()), &want) < 1e-12);

        let f: Vec<f64> = e1.re.iter().map(|v| v.abs()).collect();
        prop_assert!(fm.apply_flat(&f).unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_only_at_equality(
        q in prop::collection::vec((-3.0f64..3.0, 0.1f64..3.0), 1..8),
        shift in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let lat = |v: &[(f64, f64)]| GaussianLatent {
            mean: v.iter().map(|p| p.0).collect(),
            stddev: v.iter().map(|p| p.1).collect(),
        };
        let qq = lat(&q);
        prop_assert!(kl_divergence(&qq, &qq).unwrap().abs() < 1e-12);
        let moved: Vec<(f64, f64)> = q.iter().zip(&shift).map(|(p, s)| (p.0 + s, p.1 * (1.0 + 0.3 * s))).collect();
        let kl = kl_divergence(&qq, &lat(&moved)).unwrap();
        prop_assert!(kl >= 0.0);
        if shift[..q.len()].iter().any(|s| s.abs() > 1e-6) {
            prop_assert!(kl > 0.0);
        }
    }
}

#[test]
fn retrieval_and_inference_share_one_decoder() {
    let vcfg = VideoCsConfig {
        n: 8,
        mask_seed: 2,
        ..Default::default()
    };
    let vm = VideoCsModel::new(vcfg.clone()).unwrap();
    let mut rng = SplitMix64::new(1);
    let ex: Vec<Example> = (0..4)
        .map(|_| {
            let f: Vec<f64> = (0..vm.signal_len()).map(|_| rng.next_f64()).collect();
            let g = vm.apply_flat(&f).unwrap();
            Example { f, g }
        })
        .collect();
    let cfg = ModelConfig {
        latent_dim: 4,
        recurrences: 2,
        enc_channels: [4, 4, 4],
        dec_channels: [4, 4],
        z_channels: 2,
        lstm_hidden: 3,
        batch_size: 2,
        ..Default::default()
    };
    let model = Model::new(cfg, Method::Variational, PhysicsConfig::VideoCs(vcfg), Stats::identity()).unwrap();
    let mut tr = Trainer::new(model);
    tr.run_epoch(&ex).unwrap();
    let mut m = tr.model;

    let dec: Vec<usize> = (0..m.params().len()).filter(|&p| m.params().name(p).starts_with("dec.")).collect();
    assert!(!dec.is_empty());
    let names: std::collections::BTreeSet<&str> = (0..m.params().len()).map(|p| m.params().name(p)).collect();
    assert_eq!(names.len(), m.params().len());

    // Nudging any decoder tensor moves both the training loss (inference
    // branch) and a prior sample (retrieval branch).
    let noise = Noise::draw(m.config(), &mut SplitMix64::new(5));
    let (f, g) = (&ex[0].f, &ex[0].g);
    for p in dec {
        let base_loss = m.loss(f, g, &noise, Objective::Elbo).unwrap().loss;
        let base_ret = m.retrieve_instances(g, 1, 9).unwrap();
        let saved = m.params().value(p).to_vec();
        for v in m.params_mut().value_mut(p).iter_mut() {
            *v += 0.05;
        }
        assert_ne!(m.loss(f, g, &noise, Objective::Elbo).unwrap().loss, base_loss, "{}", m.params().name(p));
        assert_ne!(m.retrieve_instances(g, 1, 9).unwrap(), base_ret, "{}", m.params().name(p));
        m.params_mut().value_mut(p).copy_from_slice(&saved);
    }
}
