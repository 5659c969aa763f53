//! Cross-module pipeline checks that don't belong to a single unit suite.

use mppca::io::ModelArtifact;
use mppca::mixture::{em_fit, KChoice, QChoice, TrainingConfig};
use mppca::monitoring::{detect, fit_thresholds, global_statistics, DetectionMode, StatisticMode};
use mppca::synth::{benchmark_scenario, generate, FaultKind, FaultSpec};

#[test]
fn step_fault_alarm_delay_is_short() {
    let onset = 200;
    let mut quick = 0;
    for seed in 0..10 {
        let fault = FaultSpec {
            kind: FaultKind::StepBias,
            magnitude: 5.0,
            onset,
            variables: vec![2, 7],
        };
        let spec = benchmark_scenario(3, 10, 3, 8.0, 800, 450, fault, 0.0, 300 + seed);
        let (train, test) = generate(&spec).unwrap();
        let train_m = train.to_matrix().unwrap();
        let test_m = test.to_matrix().unwrap();
        let config = TrainingConfig {
            k: KChoice::Fixed(3),
            q: QChoice::Fixed(3),
            seed,
            ..Default::default()
        };
        let fit = em_fit(&train_m, &config).unwrap();
        let th =
            fit_thresholds(&fit.params, &train_m, 0.99, StatisticMode::PosteriorNormalized)
                .unwrap();
        let first_alarm = (onset..test_m.nrows()).find(|&r| {
            let g = global_statistics(
                &fit.params,
                &test_m.row(r).transpose(),
                StatisticMode::PosteriorNormalized,
            )
            .unwrap();
            detect(&g, &th, DetectionMode::Combined).alarm
        });
        if matches!(first_alarm, Some(i) if i < onset + 5) {
            quick += 1;
        }
    }
    assert!(quick >= 9, "first alarm within 5 samples in only {quick}/10 seeds");
}

#[test]
fn saved_model_scores_identically_to_in_memory_model() {
    let spec = benchmark_scenario(
        2,
        6,
        2,
        8.0,
        400,
        100,
        FaultSpec {
            kind: FaultKind::StepBias,
            magnitude: 4.0,
            onset: 50,
            variables: vec![0],
        },
        0.0,
        77,
    );
    let (train, test) = generate(&spec).unwrap();
    let train_m = train.to_matrix().unwrap();
    let test_m = test.to_matrix().unwrap();
    let config = TrainingConfig {
        k: KChoice::Fixed(2),
        q: QChoice::Fixed(2),
        seed: 1,
        ..Default::default()
    };
    let fit = em_fit(&train_m, &config).unwrap();
    let th = fit_thresholds(&fit.params, &train_m, 0.99, StatisticMode::PosteriorNormalized)
        .unwrap();
    let artifact = ModelArtifact::new(
        &fit.params,
        th.clone(),
        StatisticMode::PosteriorNormalized,
        DetectionMode::Combined,
        None,
        config,
    );
    let reloaded = ModelArtifact::from_json(&artifact.to_json().unwrap()).unwrap();
    let mixture = reloaded.mixture().unwrap();
    for r in 0..test_m.nrows() {
        let t = test_m.row(r).transpose();
        let a = global_statistics(&fit.params, &t, StatisticMode::PosteriorNormalized).unwrap();
        let b = global_statistics(&mixture, &t, StatisticMode::PosteriorNormalized).unwrap();
        assert_eq!(a.t2.to_bits(), b.t2.to_bits());
        assert_eq!(a.spe.to_bits(), b.spe.to_bits());
        assert_eq!(a.tc2.to_bits(), b.tc2.to_bits());
    }
}
