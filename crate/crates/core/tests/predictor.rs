use advtraj_core::autodiff::{gradient_check, AutodiffError};
use advtraj_core::nn::{Activation, Adam, AdamConfig};
use advtraj_core::predictor::checkpoint::{self, Model};
use advtraj_core::predictor::{
    context_values, kl_rows, predict_mode, predict_with_noise, sample_predictions, Arch, Batch, CganModel, CvaeModel,
    Family, Gaussian, Predictor, LOGSIG_CLAMP,
};
use advtraj_core::scene::generate::{generate_synthetic, Behavior, BehaviorMix, GenConfig, LaneFamily};
use advtraj_core::scene::Scene;
use advtraj_core::{Graph, Tensor};
use proptest::prelude::*;

fn toy_scene() -> Scene {
    let history = vec![
        vec![[0.0, 0.0], [1.0, 0.1], [2.0, 0.1], [3.1, 0.2]],
        vec![[5.0, 3.0], [5.5, 2.5], [6.0, 2.1], [6.4, 1.5]],
    ];
    let future = vec![
        vec![[4.0, 0.2], [5.1, 0.3], [6.0, 0.3]],
        vec![[6.9, 1.0], [7.2, 0.4], [7.8, 0.0]],
    ];
    Scene::new(0.5, history, future, vec![]).unwrap()
}

fn small_arch(kind: Family) -> Arch {
    Arch { hidden: 12, embed: 6, latent: 3, ..Arch::new(kind, 4, 3) }
}

fn cruise_scenes(n: usize, seed: u64) -> Vec<Scene> {
    let cfg = GenConfig {
        families: vec![LaneFamily::Straight],
        behaviors: BehaviorMix::only(Behavior::Cruise),
        ..GenConfig::default()
    };
    (0..n).map(|i| generate_synthetic(&cfg, seed + i as u64).unwrap()).collect()
}

fn single_agent_scene() -> Scene {
    Scene::new(0.5, vec![vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]], vec![vec![[4.0, 0.0], [5.0, 0.0], [6.0, 0.0]]], vec![]).unwrap()
}

#[test]
fn encoder_is_deterministic_and_pools_zero_without_neighbors() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 1).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    assert_eq!(context_values(&m, &b, &b.x).unwrap(), context_values(&m, &Batch::new(&[&toy_scene()]).unwrap(), &b.x).unwrap());
    let single = single_agent_scene();
    let b = Batch::new(&[&single]).unwrap();
    let c = context_values(&m, &b, &b.x).unwrap();
    let e = m.arch().embed;
    assert!(c.data()[e..2 * e].iter().all(|&v| v == 0.0));
    assert!(c.data()[..e].iter().any(|&v| v != 0.0));
}

#[test]
fn batching_scenes_does_not_mix_them() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 2).unwrap();
    let (a, b2) = (toy_scene(), single_agent_scene());
    let both = Batch::new(&[&a, &b2]).unwrap();
    let ca = context_values(&m, &Batch::new(&[&a]).unwrap(), &Batch::new(&[&a]).unwrap().x).unwrap();
    let cb = context_values(&m, &both, &both.x).unwrap();
    for (u, v) in ca.data().iter().zip(cb.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

/// Context drift grows linearly when the first layers are scaled by c
/// under an identity activation.
#[test]
fn context_drift_is_unbounded_in_weight_scale() {
    let arch = Arch { activation: Activation::Identity, ..small_arch(Family::Cvae) };
    let base = CvaeModel::new(arch, 3).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let delta = Tensor::from_fn(b.x.shape(), |i| if i < 8 { 0.1 * ((i % 3) as f64 - 1.0) } else { 0.0 }).unwrap();
    let xd = b.x.zip_map(&delta, |a, d| a + d).unwrap();
    let drift = |c: f64| {
        let mut m = base.clone();
        for name in ["enc.self.l1.w", "enc.pair.l1.w"] {
            let t = m.params_mut().get_mut(name).unwrap();
            *t = t.map(|v| v * c).unwrap();
        }
        let d = context_values(&m, &b, &xd).unwrap().zip_map(&context_values(&m, &b, &b.x).unwrap(), |p, q| p - q).unwrap();
        d.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let d1 = drift(1.0);
    assert!(d1 > 0.0);
    for c in [10.0, 100.0, 1000.0] {
        let ratio = drift(c) / d1;
        assert!((ratio / c - 1.0).abs() < 1e-9, "ratio {ratio} at c {c}");
    }
}

#[test]
fn prior_and_posterior_behave() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 4).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let run = || {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, false);
        let x = g.constant(b.x.clone());
        let y = g.constant(b.y.clone());
        let c = m.encode(&mut g, &p, x, &b).unwrap();
        let pr = m.prior(&mut g, &p, c).unwrap();
        let q = m.posterior_of(&mut g, &p, c, x, y, &b).unwrap();
        let sig: Vec<f64> = g.value(pr.logsig).data().iter().map(|l| l.exp()).collect();
        assert!(sig.iter().all(|&s| (1e-4..=1e4).contains(&s)));
        let kl_self = kl_rows(&mut g, q, q).unwrap();
        assert!(g.value(kl_self).data().iter().all(|&v| v.abs() < 1e-12));
        (g.value(q.mu).clone(), g.value(q.logsig).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn kl_of_shifted_unit_gaussian_is_half() {
    let mut g = Graph::new();
    let q = Gaussian { mu: g.constant(Tensor::full(&[1, 1], 1.0)), logsig: g.constant(Tensor::zeros(&[1, 1])) };
    let p = Gaussian { mu: g.constant(Tensor::zeros(&[1, 1])), logsig: g.constant(Tensor::zeros(&[1, 1])) };
    let kl = kl_rows(&mut g, q, p).unwrap();
    assert!((g.value(kl).data()[0] - 0.5).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_is_non_negative(mq in -5.0..5.0f64, lq in -LOGSIG_CLAMP..LOGSIG_CLAMP, mp in -5.0..5.0f64, lp in -3.0..3.0f64) {
        let mut g = Graph::new();
        let q = Gaussian { mu: g.constant(Tensor::full(&[1, 1], mq)), logsig: g.constant(Tensor::full(&[1, 1], lq)) };
        let p = Gaussian { mu: g.constant(Tensor::full(&[1, 1], mp)), logsig: g.constant(Tensor::full(&[1, 1], lp)) };
        let kl = kl_rows(&mut g, q, p).unwrap();
        let v = g.value(kl).data()[0];
        let oracle = lp - lq + ((2.0 * lq).exp() + (mq - mp).powi(2)) / (2.0 * (2.0 * lp).exp()) - 0.5;
        prop_assert!(v >= -1e-12);
        prop_assert!((v - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
    }

    #[test]
    fn decoded_outputs_translate_with_history(vx in -50.0..50.0f64, vy in -50.0..50.0f64) {
        let m = CvaeModel::new(small_arch(Family::Cvae), 5).unwrap();
        let s = toy_scene();
        let shifted = Scene::new(
            0.5,
            s.history().iter().map(|a| a.iter().map(|p| [p[0] + vx, p[1] + vy]).collect()).collect(),
            s.future().to_vec(),
            vec![],
        ).unwrap();
        let (p0, p1) = (sample_predictions(&m, &s, 3, 9).unwrap(), sample_predictions(&m, &shifted, 3, 9).unwrap());
        for (a, b) in p0.candidates().iter().flatten().flatten().zip(p1.candidates().iter().flatten().flatten()) {
            prop_assert!((a[0] + vx - b[0]).abs() < 1e-9 && (a[1] + vy - b[1]).abs() < 1e-9);
        }
    }
}

fn zero_params(m: &mut impl Predictor, prefix: &str) {
    let names: Vec<String> = m.params().names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let t = m.params_mut().get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
}

#[test]
fn zero_decoder_predicts_stationary_agents() {
    let mut m = CvaeModel::new(small_arch(Family::Cvae), 6).unwrap();
    zero_params(&mut m, "dec.l2");
    let s = toy_scene();
    let pred = sample_predictions(&m, &s, 4, 1).unwrap();
    for cand in pred.candidates() {
        for (i, agent) in cand.iter().enumerate() {
            let last = s.history()[i][3];
            assert!(agent.iter().all(|p| *p == last));
        }
    }
}

#[test]
fn sampling_is_seeded_and_spread() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 7).unwrap();
    let s = toy_scene();
    assert_eq!(sample_predictions(&m, &s, 5, 3).unwrap(), sample_predictions(&m, &s, 5, 3).unwrap());
    let b = Batch::new(&[&s]).unwrap();
    let zero = predict_with_noise(&m, &b, &b.x, &[Tensor::zeros(&[2, 3])]).unwrap().remove(0);
    let mode = predict_mode(&m, &b, &b.x).unwrap();
    let flat: Vec<f64> = zero.candidate(0).iter().flatten().flatten().copied().collect();
    assert_eq!(flat, mode.data());
    let mut spread = 0.0;
    for seed in 0..5 {
        let p = sample_predictions(&m, &s, 4, seed).unwrap();
        for a in 0..4 {
            for c in a + 1..4 {
                spread += p.candidate(a)[0].iter().zip(&p.candidate(c)[0]).map(|(u, v)| (u[0] - v[0]).hypot(u[1] - v[1])).sum::<f64>();
            }
        }
    }
    assert!(spread > 0.0);
}

#[test]
fn decode_gradient_wrt_latent_matches_finite_differences() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 8).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let z0 = Tensor::from_fn(&[2, 3], |i| 0.3 * i as f64 - 0.7).unwrap();
    let rep = gradient_check(
        |g: &mut Graph, z| {
            let p = m.params().bind(g, false);
            let x = g.constant(b.x.clone());
            let c = m.encode(g, &p, x, &b).map_err(unwrap_ad)?;
            let out = m.decode(g, &p, c, z, x, &b).map_err(unwrap_ad)?;
            let y = g.constant(b.y.clone());
            let d = g.sub(out, y)?;
            Ok(g.sqnorm(d))
        },
        &z0,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

fn unwrap_ad(e: advtraj_core::predictor::PredictorError) -> AutodiffError {
    match e {
        advtraj_core::predictor::PredictorError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

/// Finite-difference check of a scene-summed loss w.r.t. one parameter.
fn param_check<M: Predictor>(m: &M, name: &str, loss: impl Fn(&M, &mut Graph, &advtraj_core::nn::Bound) -> advtraj_core::Var) -> f64 {
    let point = m.params().get(name).unwrap().clone();
    let rep = gradient_check(
        |g: &mut Graph, v| {
            let bound = m.params().bind(g, false).with_var(name, v);
            Ok(loss(m, g, &bound))
        },
        &point,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed, "{name}: {rep:?}");
    rep.max_rel_error
}

#[test]
fn cvae_loss_gradient_matches_finite_differences() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 10).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    for name in ["enc.self.l1.w", "enc.pair.l2.w", "prior.mu.w", "prior.logsig.b", "post.fut.l1.w", "post.logsig.w", "dec.l1.w", "dec.l2.b"] {
        param_check(&m, name, |m, g, p| {
            let x = g.constant(b.x.clone());
            let l = m.loss_total(g, p, x, &b, 3, 5).unwrap();
            g.sum(l)
        });
    }
}

#[test]
fn diversity_vanishes_with_exact_candidate() {
    let mut m = CvaeModel::new(small_arch(Family::Cvae), 11).unwrap();
    zero_params(&mut m, "dec.l2");
    let s = Scene::new(0.5, vec![vec![[0.0, 0.0], [1.0, 1.0]]], vec![vec![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]], vec![]).unwrap();
    let arch = Arch { history_len: 2, ..small_arch(Family::Cvae) };
    let mut m2 = CvaeModel::new(arch, 11).unwrap();
    zero_params(&mut m2, "dec.l2");
    let b = Batch::new(&[&s]).unwrap();
    let mut g = Graph::new();
    let p = m2.params().bind(&mut g, false);
    let x = g.constant(b.x.clone());
    let (recon, _kl, div) = m2.loss_terms(&mut g, &p, x, &b, 4, 0).unwrap();
    assert_eq!(g.value(div).data(), &[0.0]);
    assert_eq!(g.value(recon).data(), &[0.0]);
    let _ = &mut m;
}

#[test]
fn cvae_learns_cruise_scenes() {
    let scenes = cruise_scenes(64, 100);
    let refs: Vec<&Scene> = scenes.iter().collect();
    let b = Batch::new(&refs).unwrap();
    let mut m = CvaeModel::new(Arch::new(Family::Cvae, 4, 12), 12).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    let mut first = None;
    let mut last = 0.0;
    for step in 0..200u64 {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, true);
        let x = g.constant(b.x.clone());
        let l = m.loss_total(&mut g, &p, x, &b, 5, step).unwrap();
        let l = g.mean(l).unwrap();
        last = g.scalar(l);
        first.get_or_insert(last);
        let grads = p.collect(&g.backward(l).unwrap());
        opt.apply(m.params_mut(), &grads);
    }
    let first = first.unwrap();
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let m = Model::new(small_arch(Family::Cvae), 13).unwrap();
    let text = checkpoint::to_json(&m);
    assert_eq!(checkpoint::from_json(&text).unwrap(), m);
    let g = Model::new(small_arch(Family::Cgan), 13).unwrap();
    assert_eq!(checkpoint::from_json(&checkpoint::to_json(&g)).unwrap(), g);

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["arch"]["hidden"] = serde_json::json!(13);
    assert!(checkpoint::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = serde_json::json!(2);
    assert!(checkpoint::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"].as_object_mut().unwrap().remove("dec.l1.w");
    assert!(checkpoint::from_json(&v.to_string()).unwrap_err().to_string().contains("dec.l1.w"));
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["arch"]["colour"] = serde_json::json!(1);
    assert!(checkpoint::from_json(&v.to_string()).is_err());
}

#[test]
fn cgan_generation_is_deterministic_and_zero_head_is_stationary() {
    let mut m = CganModel::new(small_arch(Family::Cgan), 14).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let z = vec![Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1).unwrap()];
    assert_eq!(predict_with_noise(&m, &b, &b.x, &z).unwrap(), predict_with_noise(&m, &b, &b.x, &z).unwrap());
    zero_params(&mut m, "dec.l2");
    let p = predict_with_noise(&m, &b, &b.x, &z).unwrap().remove(0);
    for (i, agent) in p.candidate(0).iter().enumerate() {
        assert!(agent.iter().all(|q| *q == s.history()[i][3]));
    }
}

#[test]
fn cgan_gradients_match_finite_differences() {
    let m = CganModel::new(small_arch(Family::Cgan), 15).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let z0 = Tensor::from_fn(&[2, 3], |i| 0.2 * i as f64 - 0.5).unwrap();
    let rep = gradient_check(
        |g: &mut Graph, z| {
            let p = m.params().bind(g, false);
            let x = g.constant(b.x.clone());
            let c = m.encode(g, &p, x, &b).map_err(unwrap_ad)?;
            let out = m.decode(g, &p, c, z, x, &b).map_err(unwrap_ad)?;
            let y = g.constant(b.y.clone());
            let d = g.sub(out, y)?;
            Ok(g.sqnorm(d))
        },
        &z0,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed);
    let fakes_of = |m: &CganModel, g: &mut Graph| {
        let p = m.params().bind(g, false);
        let x = g.constant(b.x.clone());
        let c = m.encode(g, &p, x, &b).unwrap();
        let z = m.latent(g, &p, c, z0.clone()).unwrap();
        let f = m.decode(g, &p, c, z, x, &b).unwrap();
        g.value(f).clone()
    };
    let fake = fakes_of(&m, &mut Graph::new());
    for name in ["disc.enc.self.l1.w", "disc.fut.l1.w", "disc.l1.w", "disc.out.w", "disc.out.b"] {
        param_check(&m, name, |m, g, p| {
            let x = g.constant(b.x.clone());
            let f = g.constant(fake.clone());
            let l = m.disc_loss(g, p, x, &b, &[f]).unwrap();
            g.sum(l)
        });
    }
    for name in ["enc.self.l1.w", "dec.l1.w"] {
        param_check(&m, name, |m, g, p| {
            let x = g.constant(b.x.clone());
            let l = m.loss_total(g, p, x, &b, 2, 3).unwrap();
            g.sum(l)
        });
    }
}

#[test]
fn half_discriminator_gives_log_quarter() {
    let mut m = CganModel::new(small_arch(Family::Cgan), 16).unwrap();
    zero_params(&mut m, "disc.out");
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let scores = m.disc_scores(&b, &b.y).unwrap();
    assert!(scores.iter().all(|&d| d == 0.5));
    let v = scores[0].ln() + (1.0 - scores[0]).ln();
    assert!((v - (-1.3863)).abs() < 1e-4);

    // Frozen D = 0.5: the adversarial term carries no generator gradient.
    let mut g = Graph::new();
    let p = m.params().bind_partial(&mut g, advtraj_core::predictor::cgan::GENERATOR);
    let x = g.constant(b.x.clone());
    let (adv, _div) = m.gen_terms(&mut g, &p, x, &b, 3, 1).unwrap();
    let adv = g.sum(adv);
    let grads = p.collect(&g.backward(adv).unwrap());
    assert!(grads.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn cgan_training_reduces_diversity_loss_and_is_reproducible() {
    let scenes = cruise_scenes(32, 200);
    let refs: Vec<&Scene> = scenes.iter().collect();
    let b = Batch::new(&refs).unwrap();
    let train = || {
        let mut m = CganModel::new(Arch::new(Family::Cgan, 4, 12), 17).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let mut logs = Vec::new();
        for step in 0..500u64 {
            let log = m.train_step_alternating(&b, 3, step, &mut opt).unwrap();
            assert!(log.d_real > 0.0 && log.d_real < 1.0 && log.d_fake > 0.0 && log.d_fake < 1.0);
            logs.push(log);
        }
        (m, logs)
    };
    let (m1, logs) = train();
    let head: f64 = logs[..10].iter().map(|l| l.gen_diversity).sum::<f64>() / 10.0;
    let tail: f64 = logs[490..].iter().map(|l| l.gen_diversity).sum::<f64>() / 10.0;
    assert!(tail <= 0.7 * head, "diversity {head} -> {tail}");
    let (m2, _) = train();
    let bits = |m: &CganModel| m.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(bits(&m1), bits(&m2));
}
