use advtraj_core::attacks::{
    attack_batch, pgd, project_linf, threat_violations, AttackConfig, AttackKind, AttackRecord, Objective, SceneObjective,
    SequenceObjective, Targets, ThreatModel, window_future,
};
use advtraj_core::autodiff::gradient_check;
use advtraj_core::nn::{Activation, Adam, AdamConfig};
use advtraj_core::predictor::{predict_batch, Arch, Batch, CganModel, CvaeModel, Family, Predictor};
use advtraj_core::scene::generate::{generate_synthetic, GenConfig};
use advtraj_core::scene::metrics::ade;
use advtraj_core::scene::Scene;
use advtraj_core::{Graph, Tensor};
use proptest::prelude::*;

fn small_arch(kind: Family) -> Arch {
    Arch { hidden: 12, embed: 6, latent: 3, ..Arch::new(kind, 4, 3) }
}

fn toy_scene() -> Scene {
    let history = vec![
        vec![[0.0, 0.0], [1.0, 0.1], [2.0, 0.1], [3.1, 0.2]],
        vec![[5.0, 3.0], [5.5, 2.5], [6.0, 2.1], [6.4, 1.5]],
        vec![[-4.0, 1.0], [-3.0, 1.0], [-2.0, 1.1], [-1.0, 1.0]],
    ];
    let future = vec![
        vec![[4.0, 0.2], [5.1, 0.3], [6.0, 0.3]],
        vec![[6.9, 1.0], [7.2, 0.4], [7.8, 0.0]],
        vec![[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]],
    ];
    Scene::new(0.5, history, future, vec![]).unwrap()
}

fn eval(obj: &dyn Objective, delta: &Tensor, step: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let d = g.constant(delta.clone());
    let v = obj.eval(&mut g, d, step).unwrap();
    g.value(v).data().to_vec()
}

fn trained_cvae(seed: u64, steps: u64) -> (CvaeModel, Vec<Scene>) {
    let cfg = GenConfig::default();
    let scenes: Vec<Scene> = (0..48).map(|i| generate_synthetic(&cfg, 1000 * seed + i).unwrap()).collect();
    let refs: Vec<&Scene> = scenes[..32].iter().collect();
    let b = Batch::new(&refs).unwrap();
    let mut m = CvaeModel::new(Arch { hidden: 32, embed: 16, latent: 4, ..Arch::new(Family::Cvae, 4, 12) }, seed).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 3e-3, ..AdamConfig::default() });
    for step in 0..steps {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, true);
        let x = g.constant(b.x.clone());
        let l = m.loss_total(&mut g, &p, x, &b, 5, step).unwrap();
        let l = g.mean(l).unwrap();
        let grads = p.collect(&g.backward(l).unwrap());
        opt.apply(m.params_mut(), &grads);
    }
    (m, scenes[32..].to_vec())
}

#[test]
fn projection_examples() {
    let d = Tensor::matrix(1, 2, vec![2.0, -3.0]).unwrap();
    assert_eq!(project_linf(&d, 1.0).data(), &[1.0, -1.0]);
    assert!(project_linf(&d, 0.0).data().iter().all(|&v| v == 0.0));
    let f = Tensor::matrix(1, 2, vec![0.2, -0.4]).unwrap();
    assert_eq!(project_linf(&f, 0.5), f);
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_bounded(v in prop::collection::vec(-10.0..10.0f64, 1..16), eps in 0.0..3.0f64) {
        let d = Tensor::matrix(1, v.len(), v).unwrap();
        let p = project_linf(&d, eps);
        prop_assert!(p.data().iter().all(|x| x.abs() <= eps));
        prop_assert_eq!(project_linf(&p, eps), p);
    }
}

#[test]
fn zero_budget_returns_clean_objective() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 1).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let cfg = AttackConfig::default();
    let obj = SceneObjective::new(&m, &b, AttackKind::Deterministic, &ThreatModel::new(0.0), &cfg).unwrap();
    let res = pgd(&obj, 0.0, &cfg).unwrap();
    assert!(res.delta.data().iter().all(|&v| v == 0.0));
    assert_eq!(res.best(), eval(&obj, &Tensor::zeros(&[1, 8]), 0));
}

#[test]
fn pgd_respects_threat_set_and_only_moves_the_adversary() {
    let before = threat_violations();
    let m = CvaeModel::new(small_arch(Family::Cvae), 2).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s, &s]).unwrap();
    let threat = ThreatModel { eps: 0.5, targets: Targets::Designated(1) };
    let cfg = AttackConfig { steps: 30, random_init: true, seed: 4, ..AttackConfig::default() };
    for kind in [AttackKind::Naive, AttackKind::Deterministic, AttackKind::Latent, AttackKind::Context] {
        let (xa, res) = attack_batch(&m, &b, kind, &threat, &cfg).unwrap();
        assert!(res.delta.data().iter().all(|v| v.abs() <= 0.5));
        for t in &res.traces {
            assert!(t.windows(2).all(|w| w[1] >= w[0]), "{kind:?} trace not monotone");
        }
        for (r, (u, v)) in xa.data().chunks(8).zip(b.x.data().chunks(8)).enumerate() {
            if r % 3 != 1 {
                assert_eq!(u, v, "{kind:?} moved agent row {r}");
            }
        }
    }
    assert_eq!(threat_violations(), before);
}

#[test]
fn seeded_attacks_are_reproducible_and_objectives_pure() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 3).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let threat = ThreatModel::new(1.0);
    let cfg = AttackConfig { random_init: true, seed: 9, ..AttackConfig::default() };
    for kind in [AttackKind::Deterministic, AttackKind::Latent, AttackKind::Context] {
        let r1 = attack_batch(&m, &b, kind, &threat, &cfg).unwrap().1;
        let r2 = attack_batch(&m, &b, kind, &threat, &cfg).unwrap().1;
        assert_eq!(r1, r2);
        let obj = SceneObjective::new(&m, &b, kind, &threat, &cfg).unwrap();
        let d = Tensor::from_fn(&[1, 8], |i| 0.1 * i as f64 - 0.3).unwrap();
        let a: Vec<u64> = eval(&obj, &d, 0).iter().map(|v| v.to_bits()).collect();
        let c: Vec<u64> = eval(&obj, &d, 7).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, c);
    }
    let naive = SceneObjective::new(&m, &b, AttackKind::Naive, &threat, &cfg).unwrap();
    let d = Tensor::zeros(&[1, 8]);
    assert_ne!(eval(&naive, &d, 0), eval(&naive, &d, 1));
}

#[test]
fn objectives_vanish_at_zero_perturbation() {
    let mut m = CvaeModel::new(small_arch(Family::Cvae), 4).unwrap();
    for n in ["dec.l2.w", "dec.l2.b"] {
        let t = m.params_mut().get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let s = Scene::new(0.5, vec![vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]], vec![vec![[3.0, 0.0]; 3]], vec![]).unwrap();
    let b = Batch::new(&[&s]).unwrap();
    let cfg = AttackConfig::default();
    let d = Tensor::zeros(&[1, 8]);
    for kind in [AttackKind::Deterministic, AttackKind::Latent, AttackKind::Context, AttackKind::Naive] {
        let obj = SceneObjective::new(&m, &b, kind, &ThreatModel::new(0.5), &cfg).unwrap();
        assert_eq!(eval(&obj, &d, 0), vec![0.0], "{kind:?}");
    }
    let latent = SceneObjective::new(&m, &b, AttackKind::Latent, &ThreatModel::new(0.5), &cfg).unwrap();
    let mut rng = advtraj_core::seed::rng(5);
    for _ in 0..20 {
        use rand::Rng;
        let d = Tensor::from_fn(&[1, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
        assert!(eval(&latent, &d, 0)[0] >= 0.0);
    }
}

#[test]
fn latent_attack_rejects_cgan() {
    let m = CganModel::new(small_arch(Family::Cgan), 5).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let err = SceneObjective::new(&m, &b, AttackKind::Latent, &ThreatModel::new(0.5), &AttackConfig::default()).err().unwrap();
    assert!(err.to_string().contains("unsupported"));
    let (xa, _) = attack_batch(&m, &b, AttackKind::Deterministic, &ThreatModel::new(0.5), &AttackConfig::default()).unwrap();
    assert!(xa.data().iter().zip(b.x.data()).all(|(u, v)| (u - v).abs() <= 0.5));
}

#[test]
fn context_objective_scales_with_first_layer() {
    let arch = Arch { activation: Activation::Identity, ..small_arch(Family::Cvae) };
    let base = CvaeModel::new(arch, 6).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let d = Tensor::from_fn(&[1, 8], |i| 0.05 * (i as f64 - 3.0)).unwrap();
    let value = |c: f64| {
        let mut m = base.clone();
        for n in ["enc.self.l1.w", "enc.pair.l1.w"] {
            let t = m.params_mut().get_mut(n).unwrap();
            *t = t.map(|v| v * c).unwrap();
        }
        let obj = SceneObjective::new(&m, &b, AttackKind::Context, &ThreatModel::new(1.0), &AttackConfig::default()).unwrap();
        eval(&obj, &d, 0)[0]
    };
    let v1 = value(1.0);
    for c in [2.0, 10.0, 100.0] {
        assert!((value(c) / v1 / c - 1.0).abs() < 1e-9);
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 7).unwrap();
    let s = toy_scene();
    let b = Batch::new(&[&s]).unwrap();
    let cfg = AttackConfig::default();
    let d0 = Tensor::from_fn(&[1, 8], |i| 0.07 * i as f64 - 0.2).unwrap();
    for kind in [AttackKind::Naive, AttackKind::Deterministic, AttackKind::Latent, AttackKind::Context] {
        let obj = SceneObjective::new(&m, &b, kind, &ThreatModel::new(1.0), &cfg).unwrap();
        let rep = gradient_check(
            |g: &mut Graph, d| {
                let v = obj.eval(g, d, 3).unwrap();
                Ok(g.sum(v))
            },
            &d0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{kind:?}: {rep:?}");
    }
}

fn long_scenario(lp: usize) -> Scene {
    let n_hist = 4 + lp;
    let traj = |x0: f64, y: f64, v: f64| (0..n_hist + 3).map(|t| [x0 + v * t as f64, y]).collect::<Vec<_>>();
    let agents = [traj(0.0, 0.0, 2.0), traj(-5.0, 3.5, 2.5)];
    Scene::new(
        0.5,
        agents.iter().map(|a| a[..n_hist].to_vec()).collect(),
        agents.iter().map(|a| a[n_hist..].to_vec()).collect(),
        vec![],
    )
    .unwrap()
}

#[test]
fn sequence_objective_reduces_to_single_frame() {
    let m = CvaeModel::new(small_arch(Family::Cvae), 8).unwrap();
    let sc = long_scenario(0);
    let cfg = AttackConfig { eot_draws: 0, ..AttackConfig::default() };
    let seq = SequenceObjective::new(&m, &sc, 0, 0, &cfg).unwrap();
    let b = Batch::new(&[&sc]).unwrap();
    let det = SceneObjective::new(&m, &b, AttackKind::Deterministic, &ThreatModel::new(1.0), &cfg).unwrap();
    let d = Tensor::from_fn(&[1, 8], |i| 0.1 * i as f64).unwrap();
    assert_eq!(eval(&seq, &d, 0), eval(&det, &d, 0));

    // Zero perturbation: sum of the per-window clean losses.
    let sc = long_scenario(2);
    for eot in [0, 4] {
        let cfg = AttackConfig { eot_draws: eot, ..AttackConfig::default() };
        let seq = SequenceObjective::new(&m, &sc, 2, 0, &cfg).unwrap();
        let mut g = Graph::new();
        let d = g.constant(Tensor::zeros(&[1, 12]));
        let w = seq.window_losses(&mut g, d).unwrap();
        let total: f64 = g.value(w).data().iter().sum();
        assert!((eval(&seq, &Tensor::zeros(&[1, 12]), 0)[0] - total).abs() < 1e-12);
    }
    assert!(SequenceObjective::new(&m, &sc, 1, 0, &AttackConfig::default()).is_err());
}

#[test]
fn sequence_attack_raises_per_frame_error() {
    let (m, _) = trained_cvae(1, 150);
    let cfg = GenConfig { history_len: 6, ..GenConfig::default() };
    let mut raised = 0;
    for i in 0..4u64 {
        let sc = generate_synthetic(&cfg, 77 + i).unwrap();
        let seq = SequenceObjective::new(&m, &sc, 2, 0, &AttackConfig::default()).unwrap();
        let res = pgd(&seq, 0.5, &AttackConfig::default()).unwrap();
        assert!(res.delta.data().iter().all(|v| v.abs() <= 0.5));
        let frame_ade = |delta: &Tensor| {
            let x = seq.window_values(delta).unwrap();
            predict_batch(&m, seq.windows(), &x, 5, 3)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(w, p)| ade(p, &window_future(&sc, 2, w, 12)).unwrap())
                .sum::<f64>()
        };
        if frame_ade(&res.delta) > frame_ade(&Tensor::zeros(&[1, 12])) {
            raised += 1;
        }
    }
    assert!(raised >= 3, "raised on {raised}/4");
}

#[test]
fn deterministic_attack_raises_error_on_trained_model() {
    let (m, test) = trained_cvae(2, 150);
    let refs: Vec<&Scene> = test.iter().collect();
    let b = Batch::new(&refs).unwrap();
    let threat = ThreatModel::new(0.5);
    let cfg = AttackConfig::default();
    let clean = predict_batch(&m, &b, &b.x, 5, 1).unwrap();
    let mean_ade = |preds: &[advtraj_core::scene::metrics::PredictionSet]| {
        preds.iter().zip(&test).map(|(p, s)| ade(p, s.future()).unwrap()).sum::<f64>() / test.len() as f64
    };
    let base = mean_ade(&clean);
    for kind in [AttackKind::Deterministic, AttackKind::Naive] {
        let (xa, _) = attack_batch(&m, &b, kind, &threat, &cfg).unwrap();
        let adv = mean_ade(&predict_batch(&m, &b, &xa, 5, 1).unwrap());
        assert!(adv > base, "{kind:?}: {adv} vs clean {base}");
    }
    let (_, res) = attack_batch(&m, &b, AttackKind::Latent, &threat, &cfg).unwrap();
    assert!(res.best().iter().all(|&v| v > 0.0));
}

#[test]
fn attack_record_round_trips() {
    let r = AttackRecord { scene_id: 3, attack_kind: "deterministic".into(), eps: 0.5, steps: 20, delta: vec![0.1, -0.5], trace: vec![1.0, 2.0] };
    let text = serde_json::to_string(&r).unwrap();
    for key in ["scene_id", "attack_kind", "eps", "steps", "delta", "trace"] {
        assert!(text.contains(key));
    }
    assert_eq!(serde_json::from_str::<AttackRecord>(&text).unwrap(), r);
    assert_eq!(AttackKind::parse("latent"), Some(AttackKind::Latent));
    assert_eq!(AttackKind::parse("bogus"), None);
}
