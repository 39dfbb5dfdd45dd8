use std::fs;

use fedda_core::ablation::{run_ablation, Grid, Variant};
use fedda_core::config::{DataSource, ExperimentConfig};
use fedda_core::experiment::*;
use fedda_core::federation::Stage;
use fedda_core::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.conv_channels = 8;
    cfg.model.heads = 2;
    cfg.model.blocks_per_stage = 1;
    cfg.model.classifier_hidden = [16, 8];
    for s in [&mut cfg.synthetic.a, &mut cfg.synthetic.b, &mut cfg.synthetic.c] {
        s.n_per_class = [20, 4, 20];
        s.class_separation = 4.0;
    }
    cfg.federation.alignment_rounds = 2;
    cfg.federation.classification_rounds = 3;
    cfg.federation.batch_size = 16;
    cfg.federation.mc_passes = 3;
    cfg.federation.learning_rate = 1e-3;
    cfg.eval.ig_steps = 4;
    cfg.eval.importance_samples = Some(3);
    cfg
}

#[test]
fn run_directory_holds_every_artifact_and_is_reproducible() {
    let cfg = tiny();
    let root = tempfile::tempdir().unwrap();
    let (serial, parallel) = (root.path().join("serial"), root.path().join("parallel"));
    let m = run_to_dir(&cfg, &serial, false).unwrap();
    run_to_dir(&cfg, &parallel, true).unwrap();
    for name in [
        CONFIG_SNAPSHOT,
        ROUND_LOG,
        ALIGNMENT_CHECKPOINT,
        FINAL_CHECKPOINT,
        METRICS,
        PREDICTIONS,
        THRESHOLDS,
        QQ,
        IMPORTANCE,
    ] {
        assert!(serial.join(name).is_file(), "{name}");
        assert_eq!(
            fs::read(serial.join(name)).unwrap(),
            fs::read(parallel.join(name)).unwrap(),
            "{name} differs between serial and parallel clients"
        );
    }
    assert!(!serial.join(PARTIAL_MARKER).exists());
    assert_eq!(m.dirichlet.violations, 0);

    let again = root.path().join("again");
    run_to_dir(&cfg, &again, false).unwrap();
    assert_eq!(fs::read(serial.join(METRICS)).unwrap(), fs::read(again.join(METRICS)).unwrap());

    let snapshot = ExperimentConfig::load(&serial.join(CONFIG_SNAPSHOT)).unwrap();
    assert_eq!(snapshot, cfg);
}

#[test]
fn rerun_commands_agree_with_the_run() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = run_to_dir(&cfg, dir.path(), false).unwrap();

    let rows = rerun_thresholds(dir.path()).unwrap();
    let full = rows.iter().find(|r| r.threshold == 1.0).unwrap();
    assert_eq!(full.accuracy, Some(m.target().acc));
    assert_eq!(full.count, m.target().n);

    let before = fs::read(dir.path().join(IMPORTANCE)).unwrap();
    let ranked = rerun_importance(dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join(IMPORTANCE)).unwrap(), before);
    assert_eq!(ranked.len(), 880);

    let qq = rerun_qq(dir.path()).unwrap();
    let lines = fs::read_to_string(dir.path().join(QQ)).unwrap().lines().count();
    assert_eq!(qq.components.len(), 2);
    assert_eq!(lines, 1 + 2 * qq.n_samples);
    assert!(qq.n_samples >= 10);
}

#[test]
fn missing_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    for r in [
        rerun_thresholds(dir.path()).map(|_| ()),
        rerun_qq(dir.path()).map(|_| ()),
        rerun_importance(dir.path()).map(|_| ()),
    ] {
        let e = r.unwrap_err();
        assert!(e.to_string().contains(CONFIG_SNAPSHOT), "{e}");
        assert_eq!(e.exit_code(), 3);
    }
    fs::write(dir.path().join(CONFIG_SNAPSHOT), tiny().to_toml().unwrap()).unwrap();
    let e = rerun_thresholds(dir.path()).unwrap_err();
    assert!(e.to_string().contains(PREDICTIONS), "{e}");
}

#[test]
fn failed_run_leaves_partial_marker() {
    let mut cfg = tiny();
    cfg.data.source = DataSource::Csv;
    cfg.data.csv = Some("/nonexistent/subjects.csv".into());
    let dir = tempfile::tempdir().unwrap();
    let e = run_to_dir(&cfg, dir.path(), false).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    let marker = fs::read_to_string(dir.path().join(PARTIAL_MARKER)).unwrap();
    assert!(marker.contains("failed"));
    assert!(!dir.path().join(METRICS).exists());
}

#[test]
fn untrained_model_is_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..5 {
        let mut cfg = tiny();
        cfg.run.seed = seed;
        cfg.federation.alignment_rounds = 0;
        cfg.federation.classification_rounds = 0;
        accs.push(train_and_evaluate(&cfg, false).unwrap().metrics.target().acc);
    }
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((0.45..=0.55).contains(&mean), "{accs:?}");
}

#[test]
fn label_noise_flips_the_requested_fraction() {
    let mut cfg = tiny();
    cfg.data.label_noise = 0.3;
    let clean = prepare_data(&tiny(), 0).unwrap();
    let noisy = prepare_data(&cfg, 0).unwrap();
    let a = (&clean.sites[0].train, &noisy.sites[0].train);
    let flipped = a.0.iter().zip(a.1).filter(|(x, y)| x.y != y.y).count();
    assert_eq!(flipped, noisy.flipped_labels);
    assert_eq!(flipped, (0.3 * a.0.len() as f64).round() as usize);
    assert_eq!(clean.sites[1].train, noisy.sites[1].train);
}

#[test]
fn single_full_variant_matches_the_default_pipeline() {
    let cfg = tiny();
    let grid = Grid {
        seeds: vec![0],
        variant: vec![Variant {
            name: "full".into(),
            ..Default::default()
        }],
    };
    let rows = run_ablation(&cfg, &grid, false).unwrap();
    let direct = train_and_evaluate(&cfg, false).unwrap().metrics;
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].runs[0], direct);
    assert_eq!(rows[0].acc, direct.target().acc);
}

#[test]
fn loss_grid_gives_seven_rows_and_alignment_off_logs_no_kl() {
    let mut cfg = tiny();
    cfg.federation.classification_rounds = 1;
    let rows = run_ablation(&cfg, &Grid::losses(vec![0]), false).unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().map(|r| r.losses.as_str()).collect::<Vec<_>>()[6], "KL+UCE+MSE");

    let off = Variant {
        name: "no-F".into(),
        alignment: Some(false),
        ..Default::default()
    }
    .apply(&cfg)
    .unwrap();
    let out = train_and_evaluate(&off, false).unwrap();
    assert!(out.trained.log.iter().all(|r| r.stage == Stage::Classification));
    for r in &out.trained.log {
        for s in &r.sites {
            assert!(s.losses.as_ref().map_or(true, |l| l.kl.is_none()));
            assert!(s.style_kl.is_none());
        }
    }
    let json: Vec<String> = out.trained.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert!(json.iter().all(|j| !j.contains("\"kl\"") && !j.contains("style_kl\":")), "{}", json[0]);
}

#[test]
fn module_toggles_run_end_to_end() {
    let mut cfg = tiny();
    cfg.federation.classification_rounds = 1;
    let grid = Grid::modules(vec![1]);
    let rows = run_ablation(&cfg, &grid, false).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.runs[0].thresholds.is_some(), r.evidential, "{}", r.name);
    }
}

#[test]
fn bad_config_is_a_config_error() {
    let e = ExperimentConfig::from_toml_str("[model]\nheads = 3\n").unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
}
