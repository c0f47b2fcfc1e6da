//! End-to-end behaviour of training, checkpoints and ablation on tiny data.

use fgrr_core::autograd::Graph;
use fgrr_core::detector::{
    anchors, backbone_deep, backbone_shallow, detection_loss, heads, image_input, objectness, propose, roi_features,
    rpn_loss,
};
use fgrr_core::optim::Momentum;
use fgrr_core::scene::{Dataset, DatasetSpec, Shift};
use fgrr_core::training::{
    ablate, evaluate, metrics_csv, train, write_run, Checkpoint, Model, Module, Toggles, TrainConfig, Variant,
    SHUFFLE_SALT,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(toggles: Toggles, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        decay_epoch: 2,
        warmup_fraction: 0.25,
        seed,
        toggles,
        data: DatasetSpec { seed: 11, shift: Shift::Moderate, source_train: 5, target_train: 4, target_test: 3 },
        ..TrainConfig::default()
    }
}

#[test]
fn equal_config_and_seed_give_identical_metrics_files() {
    let cfg = tiny(Toggles::FULL, 4);
    let data = cfg.dataset().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let (report, model) = train(&cfg, &data).unwrap();
        write_run(d.path(), &report, &model).unwrap();
    }
    let read = |i: usize| std::fs::read(dirs[i].path().join("metrics.csv")).unwrap();
    assert_eq!(read(0), read(1));
    for f in ["report.json", "loss.png", "map.png", "checkpoint.json"] {
        assert!(dirs[0].path().join(f).is_file(), "{f} missing");
    }
    // a different seed changes the run
    let (other, _) = train(&tiny(Toggles::FULL, 5), &data).unwrap();
    assert_ne!(metrics_csv(&other).into_bytes(), read(0));
}

/// Source-only training rebuilt from the public detector pieces.
#[test]
fn source_only_steps_match_a_reference_loop() {
    let cfg = tiny(Toggles::SOURCE_ONLY, 2);
    let data = cfg.dataset().unwrap();
    let (report, _) = train(&cfg, &data).unwrap();

    let dc = &cfg.detector;
    let mut params = Model::init(&cfg).detector;
    let mut opt = Momentum::new(cfg.momentum, &params.tensors());
    let mut order = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let all = anchors(dc);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = if epoch < cfg.decay_epoch { cfg.learning_rate } else { cfg.learning_rate * cfg.decay_factor };
        let mut src: Vec<usize> = (0..data.source_train.len()).collect();
        let mut tgt: Vec<usize> = (0..data.target_train.len()).collect();
        src.shuffle(&mut order);
        tgt.shuffle(&mut order);
        for &i in &src {
            let scene = &data.source_train[i];
            let mut g = Graph::new();
            let p = params.map(&mut |m| g.param(m.clone()));
            let x = image_input(&mut g, &scene.image);
            let s = backbone_shallow(&mut g, x, &p, dc).unwrap();
            let d = backbone_deep(&mut g, s, &p, dc).unwrap();
            let obj = objectness(&mut g, d, &p).unwrap();
            let rpn = rpn_loss(&mut g, obj, &all, &scene.boxes).unwrap();
            let mut props = propose(g.value(obj), &all, dc).unwrap();
            props.extend(scene.boxes.iter().copied());
            let f = roi_features(&mut g, d, &props, &p, dc).unwrap();
            let (c, r) = heads(&mut g, f, &p).unwrap();
            let roi = detection_loss(&mut g, c, r, &props, &scene.boxes, &scene.labels).unwrap();
            let loss = g.add(rpn, roi).unwrap();
            losses.push(g.scalar(loss));
            let grads = g.backward(loss);
            let gs: Vec<_> = p.tensors().iter().zip(params.tensors()).map(|(v, m)| grads.get_or_zeros(**v, m)).collect();
            opt.step(params.tensors_mut(), &gs, lr).unwrap();
        }
    }
    assert_eq!(losses.len(), report.step_losses.len());
    for (step, (want, got)) in losses.iter().zip(&report.step_losses).enumerate() {
        assert!((want - got.det).abs() < 1e-6, "step {step}: {want} vs {}", got.det);
        assert_eq!((got.nc, got.cda, got.ior), (0.0, 0.0, 0.0));
    }
}

#[test]
fn full_run_has_finite_losses_and_maps() {
    let cfg = tiny(Toggles::FULL, 0);
    let (report, _) = train(&cfg, &cfg.dataset().unwrap()).unwrap();
    assert!(report.aborted.is_none());
    assert_eq!(report.history.len(), cfg.epochs);
    assert_eq!(report.step_losses.len(), cfg.epochs * cfg.data.source_train);
    for l in &report.step_losses {
        assert!(l.det.is_finite() && l.nc.is_finite() && l.cda.is_finite() && l.ior.is_finite());
    }
    // adversarial term runs from the first step, the others only after warm-up
    assert!(report.step_losses[0].ior > 0.0);
    assert_eq!(report.step_losses[0].nc, 0.0);
    for r in &report.history {
        assert!((0.0..=1.0).contains(&r.target_map));
        assert!(r.total.is_finite());
    }
    assert_eq!(report.history[0].learning_rate, cfg.learning_rate);
    assert_eq!(report.history[2].learning_rate, cfg.learning_rate * cfg.decay_factor);
}

#[test]
fn disabled_modules_keep_their_initial_parameters() {
    for variant in Variant::ALL {
        let cfg = tiny(variant.toggles(), 1);
        let (report, model) = train(&cfg, &cfg.dataset().unwrap()).unwrap();
        let init = Model::init(&cfg);
        let t = variant.toggles();
        for (enabled, module, term) in [
            (t.prr, Module::Prr, report.step_losses.iter().map(|l| l.nc).collect::<Vec<_>>()),
            (t.srr, Module::Srr, report.step_losses.iter().map(|l| l.cda).collect()),
            (t.ior, Module::Discriminator, report.step_losses.iter().map(|l| l.ior).collect()),
        ] {
            if !enabled {
                assert!(term.iter().all(|&v| v == 0.0), "{variant}: {module:?} loss nonzero");
                assert_eq!(model.fingerprint(module), init.fingerprint(module), "{variant}: {module:?} moved");
            }
        }
        assert_ne!(model.fingerprint(Module::Detector), init.fingerprint(Module::Detector));
        if t.ior {
            assert_ne!(model.fingerprint(Module::Discriminator), init.fingerprint(Module::Discriminator));
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_final_map() {
    let cfg = tiny(Toggles::FULL, 3);
    let data = cfg.dataset().unwrap();
    let (report, model) = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &report, &model).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.model, model);
    assert_eq!(ckpt.config, cfg);
    let map = evaluate(&ckpt.model.detector, &ckpt.config.detector, &data.target_test).unwrap();
    assert_eq!(map, report.final_map);

    // the same images loaded back from disk evaluate identically
    let data_dir = tempfile::tempdir().unwrap();
    data.save(data_dir.path()).unwrap();
    let loaded = Dataset::load(data_dir.path()).unwrap();
    assert_eq!(evaluate(&model.detector, &cfg.detector, &loaded.target_test).unwrap(), map);
}

#[test]
fn ablation_rows_follow_the_requested_order() {
    let base = TrainConfig { epochs: 1, decay_epoch: 1, ..tiny(Toggles::FULL, 0) };
    let data = base.dataset().unwrap();
    let variants = [Variant::SourceOnly, Variant::Full, Variant::NoIor];
    let mut seen = Vec::new();
    let table = ablate(&base, &data, &variants, &[7, 8], |v, s, r| {
        assert!(r.aborted.is_none());
        seen.push((v, s));
    })
    .unwrap();
    assert_eq!(table.rows.iter().map(|r| r.variant).collect::<Vec<_>>(), variants);
    assert_eq!(seen.len(), 6);
    assert_eq!(seen[0], (Variant::SourceOnly, 7));
    for r in &table.rows {
        assert_eq!(r.maps.len(), 2);
        assert_eq!(r.median, 0.5 * (r.maps[0] + r.maps[1]));
    }
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed_7,seed_8,median");
    assert!(lines[1].starts_with("source_only,") && lines[3].starts_with("no_ior,"));

    // each variant run equals a direct run with that variant's toggles
    let (direct, _) = train(&base.with_variant(Variant::Full, 8), &data).unwrap();
    assert_eq!(table.row(Variant::Full).unwrap().maps[1], direct.final_map);

    let single = ablate(&base, &data, &[Variant::NoPrr], &[3], |_, _, _| {}).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert_eq!(single.rows[0].median, single.rows[0].maps[0]);
    assert!(ablate(&base, &data, &[], &[1], |_, _, _| {}).is_err());
}
