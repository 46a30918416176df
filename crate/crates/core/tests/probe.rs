use advtraj_core::predictor::checkpoint::Model;
use advtraj_core::probe::*;
use advtraj_core::scene::Scene;
use advtraj_core::training;
use advtraj_core::Tensor;
use proptest::prelude::*;

fn small() -> ProbeConfig {
    ProbeConfig { train_scenes: 128, epochs: 15, replicates: 2, levels: vec![0.0, 0.5], ..ProbeConfig::default() }
}

fn coords(n: usize) -> Tensor {
    Tensor::from_fn(&[n / 4, 4], |i| (i as f64 * 0.37).sin() * 3.0).unwrap()
}

#[test]
fn salt_pepper_extremes() {
    let x = coords(400);
    assert_eq!(salt_pepper(&x, 0.0, 3, 10.0).unwrap(), x);
    let all = salt_pepper(&x, 1.0, 3, 10.0).unwrap();
    assert!(all.data().iter().all(|&v| v == 10.0 || v == -10.0));
    assert!(all.data().iter().any(|&v| v == 10.0) && all.data().iter().any(|&v| v == -10.0));
    assert!(salt_pepper(&x, 1.5, 0, 1.0).is_err());
    assert!(salt_pepper(&x, -0.1, 0, 1.0).is_err());
}

#[test]
fn altered_fraction_matches_binomial() {
    let n = 10_000;
    let x = coords(n);
    for (i, &p) in [0.05, 0.3, 0.5, 0.9].iter().enumerate() {
        let y = salt_pepper(&x, p, i as u64, 100.0).unwrap();
        let altered = x.data().iter().zip(y.data()).filter(|(a, b)| a != b).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((altered - n as f64 * p).abs() <= 3.0 * sigma, "p {p}: {altered} altered");
    }
}

proptest! {
    #[test]
    fn salt_pepper_keeps_or_replaces(p in 0.0f64..=1.0, seed in any::<u64>(), mag in 0.1f64..50.0) {
        let x = coords(64);
        let y = salt_pepper(&x, p, seed, mag).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!(a == b || b.abs() == mag);
        }
        prop_assert_eq!(salt_pepper(&x, p, seed, mag).unwrap(), y);
    }
}

fn targets(m: usize) -> Vec<Vec<[f64; 2]>> {
    (0..m).map(|i| (1..=12).map(|t| [t as f64, 0.3 * i as f64 * t as f64]).collect()).collect()
}

#[test]
fn retrieval_of_exact_memorisation_is_perfect() {
    let ys = targets(8);
    let samples: Vec<_> = ys.iter().map(|y| vec![y.clone(); 5]).collect();
    assert_eq!(retrieval_score(&samples, &ys).unwrap(), 1.0);
}

#[test]
fn constant_output_scores_chance_exactly() {
    let ys = targets(8);
    let c: Vec<[f64; 2]> = (1..=12).map(|t| [t as f64, 0.95 * t as f64]).collect();
    let samples: Vec<_> = ys.iter().map(|_| vec![c.clone(); 5]).collect();
    assert_eq!(retrieval_score(&samples, &ys).unwrap(), 1.0 / 8.0);
}

#[test]
fn degenerate_probe_sets_are_rejected() {
    let mut ys = targets(4);
    ys[3] = ys[1].clone();
    let samples: Vec<_> = ys.iter().map(|y| vec![y.clone()]).collect();
    assert!(matches!(retrieval_score(&samples, &ys), Err(ProbeError::Degenerate(_))));
    let one = targets(1);
    assert!(retrieval_score(&[vec![one[0].clone()]], &one).is_err());
}

#[test]
fn spearman_against_closed_form() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[0.9, 0.5, 0.2, 0.1]), -1.0);
    // no ties: 1 - 6 Σd² / (n(n²-1))
    let ys = [0.3, 0.1, 0.4, 0.2, 0.5];
    let d2: f64 = [(1.0f64, 3.0f64), (2.0, 1.0), (3.0, 4.0), (4.0, 2.0), (5.0, 5.0)].iter().map(|(a, b)| (a - b).powi(2)).sum();
    let oracle = 1.0 - 6.0 * d2 / (5.0 * 24.0);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &ys) - oracle).abs() < 1e-12);
    // a tie gives mid-ranks
    let r = spearman(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.1]);
    assert!((r + 0.8660254037844386).abs() < 1e-12, "{r}");
}

#[test]
fn trained_models_depend_on_their_condition() {
    let cfg = small();
    let (train, probe) = probe_data(&cfg, 0).unwrap();
    let train: Vec<&Scene> = train.iter().collect();
    let probe: Vec<&Scene> = probe.iter().collect();
    let m = probe.len() as f64;
    let floor = 1.0 / m - 3.0 * chance_sigma(probe.len(), cfg.k);

    let rs = replicate_seed(0, 0);
    let trained = train_noisy(&cfg, &train, NoiseKind::SaltPepper, 0.0, rs).unwrap();
    let clean = condition_dependence_score(&trained, &probe, cfg.k, 1).unwrap();
    assert!(clean > 3.0 / m, "clean score {clean}");
    assert_eq!(condition_dependence_score(&trained, &probe, cfg.k, 1).unwrap(), clean);

    let mut zeroed = trained.clone();
    zero_context(&mut zeroed);
    let z = condition_dependence_score(&zeroed, &probe, cfg.k, 1).unwrap();
    assert!((z - 1.0 / m).abs() <= 3.0 * chance_sigma(probe.len(), cfg.k), "zeroed score {z}");
    assert!(clean > z);

    for seed in 0..4 {
        let fresh = Model::new(cfg.arch(), seed).unwrap();
        let s = condition_dependence_score(&fresh, &probe, cfg.k, seed).unwrap();
        assert!(s >= floor, "untrained seed {seed}: {s}");
    }
}

#[test]
fn level_zero_matches_plain_clean_training() {
    let cfg = ProbeConfig { train_scenes: 64, epochs: 2, ..small() };
    let (train, _) = probe_data(&cfg, 5).unwrap();
    let train: Vec<&Scene> = train.iter().collect();
    let rs = replicate_seed(5, 1);
    for kind in [NoiseKind::SaltPepper, NoiseKind::Adversarial] {
        let probe_model = train_noisy(&cfg, &train, kind, 0.0, rs).unwrap();
        let mut plain = Model::new(cfg.arch(), advtraj_core::seed::derive(rs, "init", 0)).unwrap();
        training::train(&mut plain, &train, &[], &cfg.train_config(rs), None, None).unwrap();
        assert_eq!(probe_model, plain);
    }
}

#[test]
fn report_shape_csv_and_flags() {
    let cfg = ProbeConfig { m: 6, k: 3, train_scenes: 16, epochs: 1, batch_size: 8, levels: vec![0.0, 0.2, 0.4], ..small() };
    let r = run_probe(&cfg, NoiseKind::Adversarial, 9).unwrap();
    assert_eq!(r.scores.len(), 3);
    assert_eq!(r.replicate_scores.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 2]);
    assert!(r.scores.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!(r.variances.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(r.warnings.iter().any(|w| w.contains("budget")));
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("noise_kind,level,seed,score"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("adversarial,0,"));
    assert_eq!(run_probe(&cfg, NoiseKind::Adversarial, 9).unwrap(), r);
}

#[test]
fn config_validation() {
    assert!(ProbeConfig { levels: vec![0.0, 0.3, 0.2], ..ProbeConfig::default() }.validate().is_err());
    assert!(ProbeConfig { levels: vec![0.1, 0.1], ..ProbeConfig::default() }.validate().is_err());
    assert!(ProbeConfig { levels: vec![0.0, 1.2], ..ProbeConfig::default() }.validate().is_err());
    assert!(ProbeConfig { m: 1, ..ProbeConfig::default() }.validate().is_err());
    assert!(ProbeConfig::default().validate().is_ok());
    assert!(serde_json::from_str::<ProbeConfig>(r#"{"m": 8, "rho": 1}"#).is_err());
    assert_eq!("adversarial".parse::<NoiseKind>().unwrap(), NoiseKind::Adversarial);
    assert!("gaussian".parse::<NoiseKind>().is_err());
}
