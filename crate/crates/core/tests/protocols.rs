use ppap_core::data::{
    gen_synthetic_superclasses, gen_synthetic_tasks_with, make_loco_tasks, SplitPlan, SuperclassConfig,
    SyntheticConfig, SyntheticKind,
};
use ppap_core::harness::{
    metrics_csv_bytes, read_metrics_csv, run_sequence, LocoConfig, LocoSession, Method, PpapSettings, SiSettings,
    TaskSpec, TrainConfig,
};
use ppap_core::models::{build_mlp_multihead, numbered_heads, HeadSpec, ModelSpec};
use ppap_core::ppap::{load_profile, save_profile};

fn small_sequence(kind: SyntheticKind, seed: u64) -> (ModelSpec, Vec<TaskSpec>) {
    let cfg = SyntheticConfig {
        classes_per_task: 2,
        samples_per_class: 30,
        epochs: 4,
        ..SyntheticConfig::default()
    };
    let tasks = gen_synthetic_tasks_with(kind, 3, seed, &cfg).unwrap();
    let dims: Vec<usize> = tasks.iter().map(|t| t.train.num_classes()).collect();
    let model = build_mlp_multihead(&[2, 16], numbered_heads(&dims)).unwrap();
    (model, tasks)
}

#[test]
fn ppap_sequence_profiles_every_task() {
    let (model, tasks) = small_sequence(SyntheticKind::ClusterSplit, 4);
    let method = Method::Ppap(PpapSettings {
        r: 0.1,
        ..PpapSettings::default()
    });
    let run = run_sequence(&model, &tasks, &method, &TrainConfig::default()).unwrap();
    assert_eq!(run.profiles.len(), 3);
    for (p, t) in run.profiles.iter().zip(&tasks) {
        assert_eq!(p.task_id(), t.id);
        assert!(p.steps() > 0);
        let scores: Vec<f32> = p.all_scores().collect();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(scores.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(scores.iter().copied().fold(0.0, f32::max), 1.0);
    }

    let m = &run.metrics;
    // Three evaluations after the last task, two after the second, one after the first.
    assert_eq!(m.measurements.iter().filter(|x| x.stage.starts_with("after-")).count(), 6);
    let retention = m.retention.unwrap();
    let expected = (m.accuracy("after-task3", "task1").unwrap() + m.accuracy("after-task3", "task2").unwrap()) / 2.0;
    assert!((retention - expected).abs() < 1e-12);
    assert_eq!(m.adaptation, m.accuracy("after-task3", "task3"));
    let score = m.euclidean_score().unwrap();
    assert!((score - retention.hypot(m.adaptation.unwrap())).abs() < 1e-12);
}

#[test]
fn scratch_reinitializes_for_every_task() {
    let (model, tasks) = small_sequence(SyntheticKind::MoonsRotation, 1);
    let run = run_sequence(&model, &tasks, &Method::Scratch, &TrainConfig::default()).unwrap();
    let stages: Vec<&str> = run.metrics.measurements.iter().map(|m| m.stage.as_str()).collect();
    assert_eq!(stages, ["scratch"; 3]);
    assert!(run.metrics.retention.is_none());
    assert!(run.profiles.is_empty());
}

#[test]
fn sequence_csv_round_trips_and_repeats() {
    let (model, tasks) = small_sequence(SyntheticKind::ClusterSplit, 2);
    let methods = [Method::None, Method::Si(SiSettings::new(0.05))];
    let csv = || {
        let records: Vec<_> = methods
            .iter()
            .map(|m| run_sequence(&model, &tasks, m, &TrainConfig::default()).unwrap().metrics)
            .collect();
        (metrics_csv_bytes(&records).unwrap(), records)
    };
    let (a, records) = csv();
    let (b, _) = csv();
    assert_eq!(a, b);
    let rows = read_metrics_csv(a.as_slice()).unwrap();
    let expected: Vec<_> = records.iter().flat_map(|r| r.rows()).collect();
    assert_eq!(rows, expected);
}

#[test]
fn profile_file_round_trips_and_detects_corruption() {
    let (model, tasks) = small_sequence(SyntheticKind::ClusterSplit, 3);
    let method = Method::Ppap(PpapSettings::default());
    let run = run_sequence(&model, &tasks[..1], &method, &TrainConfig::default()).unwrap();
    let profile = &run.profiles[0];

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task1.ppap");
    save_profile(profile, &path).unwrap();
    let back = load_profile(&path).unwrap();
    assert_eq!(&back, profile);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_profile(&path).is_err());
}

#[test]
fn loco_session_reports_references_and_points() {
    let data = SuperclassConfig {
        samples_per_fine: 12,
        ..SuperclassConfig::default()
    };
    let ds = gen_synthetic_superclasses(&data, 5).unwrap();
    let (pre, fine) = make_loco_tasks(&ds, 7, &SplitPlan::train_val_test(5)).unwrap();
    let (pre, fine) = (pre.with_budget(2, 32), fine.with_budget(2, 32));
    assert_eq!((pre.id.as_str(), fine.id.as_str()), ("pretrain-7", "finetune-7"));
    let model = build_mlp_multihead(
        &[data.dim, 16],
        vec![HeadSpec::new("pretrain", 19), HeadSpec::new("finetune", 5)],
    )
    .unwrap();
    let mut session = LocoSession::pretrain(&model, pre, fine, LocoConfig::default()).unwrap();
    let refs = session.references().unwrap();
    assert_eq!(refs.pretrain_end, session.pretrain_accuracy());

    let plain = session.run(&Method::None).unwrap();
    assert_eq!(plain.retention, Some(refs.degraded));
    assert_eq!(plain.adaptation, Some(refs.finetune_end));
    let probe = plain.measurements.iter().find(|m| m.stage == "probe").unwrap();
    assert_eq!(probe.task_id, "pretrain-7");
    assert!(probe.euclidean_score.is_some());

    // r = 1 leaves finetuning untouched.
    let identity = session
        .finetune(&Method::Ppap(PpapSettings {
            r: 1.0,
            ..PpapSettings::default()
        }))
        .unwrap();
    assert_eq!((identity.x, identity.y), (refs.degraded, refs.finetune_end));
    assert!(session.finetune(&Method::Scratch).is_err());
}
