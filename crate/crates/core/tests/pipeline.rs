use mscada_core::synthdata::{scenario_preset, write_scenario, GenConfig};
use mscada_core::train::{load_trained, Ablation, TrainConfig, Trainer, CHECKPOINT_FILE};
use proptest::prelude::*;

fn tiny(scenario: &str) -> TrainConfig {
    TrainConfig {
        scenario: Some(scenario.into()),
        samples: GenConfig {
            height: 16,
            width: 16,
            source_samples: 6,
            target_train_samples: 4,
            target_test_samples: 3,
        },
        iterations: 4,
        batch_size: 2,
        backbone_channels: 4,
        backbone_depth: 2,
        expert_channels: 4,
        spatial_channels: 4,
        k_spatial: 4,
        k_feature: 2,
        head_pool: 2,
        eval_every: 2,
        tau: 0.3,
        ..TrainConfig::default()
    }
}

#[test]
fn disk_dataset_trains_and_checkpoint_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let mut cfg = tiny("equality2");
    write_scenario(&data_dir, &scenario_preset("equality2").unwrap(), &cfg.samples, 5).unwrap();
    cfg.scenario = None;
    cfg.data = Some(data_dir);

    let run = dir.path().join("run");
    let mut t = Trainer::new(cfg.clone(), cfg.load_data().unwrap()).unwrap();
    let summary = t.run(Some(&run), |_| {}).unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert_eq!(summary.report.iteration, 4);

    let loaded = load_trained(&cfg, cfg.load_data().unwrap(), run.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.iteration(), 4);
    let mut report = loaded.evaluate().unwrap();
    report.wall_clock_secs = summary.report.wall_clock_secs;
    assert_eq!(report, summary.report);
}

#[test]
fn inclusion_head_covers_target_classes_only() {
    let cfg = tiny("inclusion2");
    let mut t = Trainer::new(cfg.clone(), cfg.load_data().unwrap()).unwrap();
    let report = t.run(None, |_| {}).unwrap().report;
    assert_eq!(report.iou.len(), t.registry().num_target());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn losses_finite_and_metrics_bounded(
        seed in 0u64..1000,
        ablation in prop::sample::select(vec!["none", "no_mixing", "no_hgcn", "combined_source", "best_expert", "summation"]),
    ) {
        let mut cfg = TrainConfig { seed, iterations: 2, ..tiny("equality2") };
        Ablation::parse(ablation).unwrap().apply(&mut cfg);
        let mut t = Trainer::new(cfg.clone(), cfg.load_data().unwrap()).unwrap();
        let s = t.run(None, |_| {}).unwrap();
        for l in &s.losses {
            prop_assert!(l.total.is_finite() && l.sup.is_finite() && l.ssl.is_finite() && l.ssl_multi.is_finite());
        }
        prop_assert!((0.0..=1.0).contains(&s.report.miou));
        prop_assert!((0.0..=1.0).contains(&s.report.mf1));
    }
}
