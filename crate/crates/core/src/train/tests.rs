use super::*;
use crate::label::IGNORE;
use crate::synthdata::GenConfig;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        scenario: Some("equality2".into()),
        samples: GenConfig {
            height: 16,
            width: 16,
            source_samples: 6,
            target_train_samples: 4,
            target_test_samples: 3,
        },
        iterations: 3,
        batch_size: 2,
        backbone_channels: 4,
        backbone_depth: 2,
        expert_channels: 4,
        spatial_channels: 4,
        k_spatial: 6,
        k_feature: 2,
        head_pool: 2,
        eval_every: 2,
        tau: 0.3,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: TrainConfig) -> Trainer {
    let data = cfg.load_data().unwrap();
    Trainer::new(cfg, data).unwrap()
}

#[test]
fn total_is_weighted_sum_of_components() {
    for (alpha, beta) in [(1.0, 1.0), (0.5, 2.0), (0.0, 0.3)] {
        let mut t = trainer(TrainConfig { alpha, beta, ..tiny_config() });
        for _ in 0..2 {
            let l = t.train_step().unwrap();
            assert_eq!(l.sup_terms.len(), 2);
            assert_eq!(l.ssl_terms.len(), 2);
            let expect = l.sup + alpha * l.ssl + beta * l.ssl_multi;
            assert!((l.total - expect).abs() <= 1e-12, "{l:?}");
            assert!((l.sup - l.sup_terms.iter().sum::<f64>()).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_weights_reduce_to_supervised_training() {
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..tiny_config()
    };
    let mut t = trainer(cfg.clone());
    let batches = t.draw_batches().unwrap();

    // reference: plain multi-source supervised step
    let mut model = t.student().clone();
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let terms = supervised_losses(&mut g, &model, &p, &batches.sources).unwrap();
    let mut total = terms[0];
    for &v in &terms[1..] {
        total = g.add(total, v).unwrap();
    }
    let mut grads = g.backward(total).unwrap();
    let grads: Vec<_> = p.vars().iter().map(|&v| grads.take(v)).collect();
    let mut adam = Adam::new(model.params(), cfg.lr_backbone, cfg.lr_head);
    adam.step(model.params_mut(), &grads).unwrap();

    let l = t.step_on(&batches).unwrap();
    for (a, &v) in l.sup_terms.iter().zip(&terms) {
        assert!((a - g.value(v).item()).abs() < 1e-12);
    }
    assert!((l.total - l.sup).abs() < 1e-12);
    for (id, name) in model.params().names().iter().enumerate() {
        let (x, y) = (model.params().get(id).data(), t.student().params().get(id).data());
        for (a, b) in x.iter().zip(y) {
            assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn equal_seeds_give_identical_traces() {
    let run = || {
        let mut t = trainer(tiny_config());
        let s = t.run(None, |_| {}).unwrap();
        (s.losses, s.rows, t.checkpoint_entries())
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seeds_diverge() {
    let a = trainer(tiny_config()).train_step().unwrap();
    let b = trainer(TrainConfig { seed: 9, ..tiny_config() }).train_step().unwrap();
    assert_ne!(a, b);
}

#[test]
fn run_writes_csv_config_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(tiny_config());
    let s = t.run(Some(dir.path()), |_| {}).unwrap();
    assert_eq!(s.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![2, 3]);
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(cfg, tiny_config());

    let data = cfg.load_data().unwrap();
    let loaded = load_trained(&cfg, data, dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.checkpoint_entries(), t.checkpoint_entries());
    assert_eq!(loaded.evaluate().unwrap().miou, s.report.miou);
}

#[test]
fn ablations_train() {
    for a in Ablation::ALL {
        let mut cfg = tiny_config();
        cfg.iterations = 1;
        a.apply(&mut cfg);
        let mut t = trainer(cfg);
        let l = t.train_step().unwrap();
        assert!(l.total.is_finite(), "{}", a.name());
        match a {
            Ablation::NoMixing => assert!(l.ssl_terms.is_empty() && l.ssl == 0.0),
            Ablation::CombinedSource => {
                assert_eq!(t.student().num_sources(), 1);
                assert_eq!(l.sup_terms.len(), 1);
                assert!(l.ssl_terms.is_empty());
            }
            _ => assert_eq!(l.ssl_terms.len(), 2),
        }
    }
}

#[test]
fn combined_source_draws_all_sources_worth() {
    let mut t = trainer(TrainConfig {
        combined_source: true,
        ..tiny_config()
    });
    let b = t.draw_batches().unwrap();
    assert_eq!(b.sources.len(), 1);
    assert_eq!(b.sources[0].0.shape()[0], 4);
    assert_eq!(b.target.shape()[0], 2);
}

#[test]
fn ablation_names_round_trip() {
    for a in Ablation::ALL {
        assert_eq!(Ablation::parse(a.name()).unwrap(), a);
    }
    assert_eq!(Ablation::parse("no-mixing").unwrap(), Ablation::NoMixing);
    assert!(Ablation::parse("bogus").is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr_head: 0.0, ..TrainConfig::default() },
        TrainConfig { alpha: -1.0, ..TrainConfig::default() },
        TrainConfig { tau: 1.0, ..TrainConfig::default() },
        TrainConfig { region_ratio: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig {
            combined_source: true,
            fusion: FusionMode::Summation,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let e = serde_json::from_str::<TrainConfig>("{\n  \"iterations\": 5,\n  \"bogus\": 1\n}").unwrap_err();
    assert_eq!(e.line(), 3);
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let mut t = trainer(tiny_config());
    let mut batches = t.draw_batches().unwrap();
    batches.sources[0].0.data_mut().iter_mut().for_each(|v| *v = f64::INFINITY);
    match t.step_on(&batches) {
        Err(Error::NonFinite { iteration, breakdown }) => {
            assert_eq!(iteration, 0);
            assert!(!breakdown.total.is_finite());
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn evaluate_perfect_head_is_one() {
    // a model whose head always predicts class 0 scores IoU 1 on a
    // single-class ground truth and nothing else is defined
    let t = trainer(tiny_config());
    let x = t.target_test().0.narrow_batch(0, 2).unwrap();
    let logits = t.student().predict_head(&x).unwrap();
    let pred = argmax_labels(&logits).unwrap();
    let reg = t.registry();
    let truth = LabelMap::new(
        2,
        16,
        16,
        pred.data().iter().map(|&c| reg.unmap(c).unwrap()).collect(),
    )
    .unwrap();
    let r = evaluate(t.student(), &x, &truth, reg).unwrap();
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.mf1, 1.0);
}

#[test]
fn evaluate_is_order_invariant_and_skips_ignore() {
    let t = trainer(tiny_config());
    let (x, y) = t.target_test();
    let a = evaluate(t.student(), x, y, t.registry()).unwrap();
    let idx = [2, 0, 1];
    let (xp, yp) = gather(x, Some(y), &idx).unwrap();
    let b = evaluate(t.student(), &xp, &yp.unwrap(), t.registry()).unwrap();
    assert_eq!(a, b);

    let mut ignored = y.clone();
    ignored.data_mut().iter_mut().for_each(|v| *v = IGNORE);
    let r = evaluate(t.student(), x, &ignored, t.registry()).unwrap();
    assert!(r.confusion.counts().iter().all(|&c| c == 0));
    assert!(r.iou.iter().all(Option::is_none));
}

#[test]
fn histograms_count_every_pixel() {
    let t = trainer(tiny_config());
    let x = t.target_train();
    let h = branch_histograms(t.student(), x).unwrap();
    assert_eq!(h.len(), 2);
    for b in h {
        assert_eq!(b.iter().sum::<u64>(), (x.shape()[0] * 16 * 16) as u64);
    }
}

#[test]
fn sweep_grids() {
    let pts = SweepGrid::Mix.points();
    assert_eq!(pts.len(), 12);
    assert!(pts.contains(&(0.5, 0.4)));
    assert_eq!(SweepGrid::Loss.points().len(), 9);
    let c = SweepGrid::Loss.configure(&tiny_config(), (0.5, 0.0));
    assert_eq!((c.alpha, c.beta), (0.5, 0.0));
}
