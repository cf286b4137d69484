use varsig::model::{kl_divergence, GaussianLatent, Method, Model, ModelConfig, Noise, Objective, Stats};
use varsig::physics::{PhysicsConfig, VideoCsConfig};
use varsig::rng::SplitMix64;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        recurrences: 2,
        enc_channels: [4, 4, 4],
        dec_channels: [4, 4],
        z_channels: 2,
        lstm_hidden: 3,
        seed: 5,
        ..Default::default()
    }
}

fn video8() -> PhysicsConfig {
    PhysicsConfig::VideoCs(VideoCsConfig {
        n: 8,
        ..Default::default()
    })
}

/// A tiny model with every parameter perturbed so no gradient path is
/// trivially zero (the last decoder layer starts at zero).
fn perturbed(cfg: ModelConfig) -> Model {
    let mut m = Model::new(cfg, Method::Variational, video8(), Stats::identity()).unwrap();
    let mut rng = SplitMix64::new(77);
    let n = m.params().len();
    for p in 0..n {
        for v in m.params_mut().value_mut(p).iter_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    m
}

fn example(m: &Model) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::new(3);
    let f: Vec<f64> = (0..8 * 8 * 3 * 4).map(|_| rng.next_f64()).collect();
    let g = m.forward_model().apply_flat(&f).unwrap();
    (f, g)
}

fn fd_check(obj: Objective) {
    let mut m = perturbed(tiny_cfg());
    let (f, g) = example(&m);
    let noise = Noise::draw(m.config(), &mut SplitMix64::new(11));
    let (_, grads) = m.loss_and_grad(&f, &g, &noise, obj).unwrap();
    let mut coords = Vec::new();
    for (p, gr) in grads.iter().enumerate() {
        if let Some(gr) = gr {
            for (i, &v) in gr.iter().enumerate() {
                if v != 0.0 {
                    coords.push((p, i, v));
                }
            }
        }
    }
    assert!(coords.len() > 100);
    let mut rng = SplitMix64::new(obj as u64 + 1);
    rng.shuffle(&mut coords);
    let h = 1e-5;
    for &(p, i, ad) in coords.iter().take(20) {
        let x0 = m.params().value(p)[i];
        m.params_mut().value_mut(p)[i] = x0 + h;
        let lp = m.loss(&f, &g, &noise, obj).unwrap().loss;
        m.params_mut().value_mut(p)[i] = x0 - h;
        let lm = m.loss(&f, &g, &noise, obj).unwrap().loss;
        m.params_mut().value_mut(p)[i] = x0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
        assert!(rel < 1e-4, "{obj:?} {} [{i}]: autodiff {ad} vs fd {fd}", m.params().name(p));
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    fd_check(Objective::Elbo);
}

#[test]
fn consistency_gradient_matches_finite_differences() {
    fd_check(Objective::Consistency);
}

#[test]
fn hybrid_gradient_matches_finite_differences() {
    fd_check(Objective::Hybrid);
}

#[test]
fn hybrid_interpolates_components() {
    let m = perturbed(tiny_cfg());
    let (f, g) = example(&m);
    let noise = Noise::draw(m.config(), &mut SplitMix64::new(1));
    let t = m.loss(&f, &g, &noise, Objective::Hybrid).unwrap();
    let (e, c) = (t.elbo.unwrap(), t.consistency.unwrap());
    assert!((t.loss + 0.5 * (e + c)).abs() <= 1e-12 * t.loss.abs());
    assert_eq!(m.loss(&f, &g, &noise, Objective::Elbo).unwrap().loss, -e);
    assert_eq!(m.loss(&f, &g, &noise, Objective::Consistency).unwrap().loss, -c);

    for (gamma, want) in [(1.0, -e), (0.0, -c)] {
        let mg = perturbed(ModelConfig { gamma, ..tiny_cfg() });
        let l = mg.loss(&f, &g, &noise, Objective::Hybrid).unwrap().loss;
        assert!((l - want).abs() <= 1e-12 * want.abs(), "gamma {gamma}");
    }
}

#[test]
fn alpha_and_beta_scale_their_terms() {
    let (m, m2) = (
        perturbed(tiny_cfg()),
        perturbed(ModelConfig {
            alpha: 2.0,
            beta: 2.0,
            ..tiny_cfg()
        }),
    );
    let (f, g) = example(&m);
    let noise = Noise::draw(m.config(), &mut SplitMix64::new(2));
    let a = m.loss(&f, &g, &noise, Objective::Hybrid).unwrap();
    let b = m2.loss(&f, &g, &noise, Objective::Hybrid).unwrap();
    assert_eq!(a.kl, b.kl);
    assert!((a.recon.unwrap() - 2.0 * b.recon.unwrap()).abs() <= 1e-12 * a.recon.unwrap());
    assert!((a.consistency.unwrap() - 2.0 * b.consistency.unwrap()).abs() <= 1e-12 * a.consistency.unwrap().abs());
}

#[test]
fn elbo_matches_hand_assembly() {
    let cfg = ModelConfig {
        recurrences: 1,
        ..tiny_cfg()
    };
    let m = perturbed(cfg);
    let (f, g) = example(&m);
    let noise = Noise::draw(m.config(), &mut SplitMix64::new(4));
    let q = m.recognition_encode(&f, &g).unwrap();
    let p = m.prior_encode(&g).unwrap();
    let kl = kl_divergence(&q, &p).unwrap();
    let (deltas, kl_graph) = m.inference_increments(&f, &g, &noise.q[0]).unwrap();
    assert!((kl - kl_graph).abs() <= 1e-12 * kl.max(1.0));
    let rec: f64 = f.iter().zip(&deltas[0]).map(|(a, b)| (a - b) * (a - b)).sum();
    let t = m.loss(&f, &g, &noise, Objective::Elbo).unwrap();
    let want = -kl - rec;
    assert!((t.elbo.unwrap() - want).abs() <= 1e-10 * want.abs());
}

#[test]
fn recurrence_telescopes() {
    let m = perturbed(ModelConfig {
        recurrences: 3,
        ..tiny_cfg()
    });
    let (_, g) = example(&m);
    let inst = m.retrieve_instances(&g, 1, 8).unwrap();
    let eps = SplitMix64::derive(8, &[varsig::rng::tag("instance"), 0]).normals(4 * 3);
    let deltas = m.retrieval_increments(&g, &eps).unwrap();
    assert_eq!(deltas.len(), 3);
    let sum: Vec<f64> = (0..deltas[0].len())
        .map(|i| deltas[0][i] + deltas[1][i] + deltas[2][i])
        .collect();
    assert_eq!(inst[0].as_flat(), sum.as_slice());
}

#[test]
fn single_recurrence_output_is_the_first_increment() {
    let m = perturbed(ModelConfig {
        recurrences: 1,
        ..tiny_cfg()
    });
    let (_, g) = example(&m);
    let eps = vec![0.2; 4];
    let d = m.retrieval_increments(&g, &eps).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d, m.retrieval_increments(&g, &eps).unwrap());
}

#[test]
fn encoders_are_deterministic_with_positive_stddev() {
    for dim in [8, 32, 128] {
        let m = Model::new(
            ModelConfig {
                latent_dim: dim,
                ..tiny_cfg()
            },
            Method::Variational,
            video8(),
            Stats::identity(),
        )
        .unwrap();
        let mut rng = SplitMix64::new(dim as u64);
        for _ in 0..if dim == 8 { 1000 } else { 5 } {
            let f: Vec<f64> = (0..768).map(|_| rng.normal()).collect();
            let g: Vec<f64> = (0..192).map(|_| rng.normal()).collect();
            let q = m.recognition_encode(&f, &g).unwrap();
            let p = m.prior_encode(&g).unwrap();
            assert_eq!(q.dim(), dim);
            assert_eq!(p.dim(), dim);
            assert!(q.stddev.iter().chain(&p.stddev).all(|&s| s > 0.0));
        }
        let g = vec![0.1; 192];
        assert_eq!(m.prior_encode(&g).unwrap(), m.prior_encode(&g).unwrap());
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let m = perturbed(tiny_cfg());
    let err = m.prior_encode(&[0.0; 10]).unwrap_err();
    assert_eq!(err.kind(), "shape");
    let err = m.recognition_encode(&[0.0; 10], &[0.0; 192]).unwrap_err();
    assert_eq!(err.kind(), "shape");
}

#[test]
fn nan_parameters_block_retrieval() {
    let mut m = perturbed(tiny_cfg());
    m.params_mut().value_mut(0)[0] = f64::NAN;
    let err = m.retrieve_instances(&[0.0; 192], 1, 0).unwrap_err();
    assert_eq!(err.kind(), "state");
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = SplitMix64::new(21);
    let mut draw = || GaussianLatent {
        mean: (0..4).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        stddev: (0..4).map(|_| rng.uniform(0.7, 1.3)).collect(),
    };
    let (q, p) = (draw(), draw());
    let logpdf = |x: &[f64], d: &GaussianLatent| -> f64 {
        x.iter()
            .zip(d.mean.iter().zip(&d.stddev))
            .map(|(x, (m, s))| -((x - m) / s).powi(2) / 2.0 - s.ln())
            .sum()
    };
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z = q.sample(&rng.normals(4)).unwrap();
        acc += logpdf(&z, &q) - logpdf(&z, &p);
    }
    let mc = acc / n as f64;
    let exact = kl_divergence(&q, &p).unwrap();
    assert!((mc - exact).abs() < 1e-2, "mc {mc} exact {exact}");
    assert!(exact > 0.0);
}

#[test]
fn sample_moments_match_the_latent() {
    let lat = GaussianLatent {
        mean: vec![1.5],
        stddev: vec![0.7],
    };
    let mut rng = SplitMix64::new(5);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| lat.sample(&[rng.normal()]).unwrap()[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = 0.7 / (n as f64).sqrt();
    let se_var = 0.49 * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - 1.5).abs() < 3.0 * se_mean);
    assert!((var - 0.49).abs() < 3.0 * se_var);
}
