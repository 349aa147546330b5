//! Executes a resolved config: one cell per seed (and per hold-out and epoch
//! pair for LOCO), cells spread over a worker pool, results kept in cell order.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ppap_core::data::{
    gen_synthetic_superclasses, gen_synthetic_tasks_with, load_cifar_files, make_cifar_sequence, make_loco_tasks,
    CifarVariant, Dataset, Normalization, SplitPlan,
};
use ppap_core::harness::{
    metrics_csv_bytes, run_sequence, LocoConfig, LocoSession, Method, MetricsRecord, ProbeConfig, TaskSpec,
    TrainConfig,
};
use ppap_core::models::{build_cnn, build_loco_cnn, build_mlp_multihead, HeadSpec, ModelSpec};
use ppap_core::ppap::save_profile;
use ppap_core::write_atomic;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, LocoSource, MethodName, ModelKind, Protocol};

pub type RunResult<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// What a finished run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub csv: PathBuf,
    pub failures: Vec<String>,
}

/// Data shared by every cell, loaded once.
enum Source {
    None,
    Sequence { cifar10: Dataset, cifar100: Dataset },
    Loco(Dataset),
}

#[derive(Debug, Clone, Copy)]
enum Cell {
    Sequence { seed: u64 },
    Loco { seed: u64, holdout: usize, epochs: [usize; 2] },
}

impl Cell {
    fn label(&self) -> String {
        match self {
            Cell::Sequence { seed } => format!("seed {seed}"),
            Cell::Loco { seed, holdout, epochs } => {
                format!("seed {seed} hold-out {holdout} epochs {}x{}", epochs[0], epochs[1])
            }
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<RunSummary> {
    fs::create_dir_all(&cfg.out).map_err(|e| format!("cannot create {}: {e}", cfg.out.display()))?;
    write_atomic(&cfg.out.join("effective-config.toml"), cfg.to_toml().as_bytes()).map_err(err)?;

    let source = load_source(cfg)?;
    let cells = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(err)?;
    eprintln!("running {} cell(s) on {} worker(s)", cells.len(), cfg.workers);
    let results: Vec<RunResult<Vec<MetricsRecord>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let started = Instant::now();
                let out = run_cell(cfg, &source, *cell).map_err(|e| format!("{}: {e}", cell.label()));
                match &out {
                    Ok(_) => eprintln!("done {} in {:.1?}", cell.label(), started.elapsed()),
                    Err(e) => eprintln!("failed {e}"),
                }
                out
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) => failures.push(e),
        }
    }
    let bytes = metrics_csv_bytes(&records).map_err(err)?;
    let name = if failures.is_empty() {
        "metrics.csv"
    } else {
        "metrics.partial.csv"
    };
    let csv = cfg.out.join(name);
    write_atomic(&csv, &bytes).map_err(err)?;
    Ok(RunSummary { csv, failures })
}

fn load_source(cfg: &ExperimentConfig) -> RunResult<Source> {
    match cfg.protocol {
        Protocol::Synthetic => Ok(Source::None),
        Protocol::Sequence => {
            let s = cfg.sequence.as_ref().expect("resolved");
            let norm = Normalization::CIFAR100;
            Ok(Source::Sequence {
                cifar10: load_cifar_files(&s.cifar10, CifarVariant::Cifar10, &norm).map_err(err)?,
                cifar100: load_cifar_files(&[&s.cifar100], CifarVariant::Cifar100, &norm).map_err(err)?,
            })
        }
        Protocol::Loco => {
            let l = cfg.loco.as_ref().expect("resolved");
            match l.source {
                // Regenerated per seed inside the cell.
                LocoSource::Synthetic => Ok(Source::None),
                LocoSource::Cifar100 => {
                    let path = l.cifar100.as_ref().expect("resolved");
                    let ds = load_cifar_files(&[path], CifarVariant::Cifar100, &Normalization::LOCO).map_err(err)?;
                    Ok(Source::Loco(ds))
                }
            }
        }
    }
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    match cfg.protocol {
        Protocol::Synthetic | Protocol::Sequence => cfg.seeds.iter().map(|&seed| Cell::Sequence { seed }).collect(),
        Protocol::Loco => {
            let l = cfg.loco.as_ref().expect("resolved");
            let mut out = Vec::new();
            for &holdout in &l.holdouts {
                for &epochs in &l.epochs {
                    for &seed in &cfg.seeds {
                        out.push(Cell::Loco { seed, holdout, epochs });
                    }
                }
            }
            out
        }
    }
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: cfg.optimizer.to_core(),
        seed,
        augment: cfg.augment(),
        record_wall_time: cfg.record_wall_time,
    }
}

fn run_cell(cfg: &ExperimentConfig, source: &Source, cell: Cell) -> RunResult<Vec<MetricsRecord>> {
    match cell {
        Cell::Sequence { seed } => run_sequence_cell(cfg, source, seed),
        Cell::Loco { seed, holdout, epochs } => run_loco_cell(cfg, source, seed, holdout, epochs),
    }
}

fn sequence_tasks(cfg: &ExperimentConfig, source: &Source, seed: u64) -> RunResult<Vec<TaskSpec>> {
    match (cfg.protocol, source) {
        (Protocol::Synthetic, _) => {
            let s = cfg.synthetic.as_ref().expect("resolved");
            gen_synthetic_tasks_with(s.kind(), s.tasks, seed, &s.to_core()).map_err(err)
        }
        (Protocol::Sequence, Source::Sequence { cifar10, cifar100 }) => {
            let s = cfg.sequence.as_ref().expect("resolved");
            make_cifar_sequence(cifar10, cifar100, s.extra_tasks, s.epochs, s.batch_size, seed).map_err(err)
        }
        _ => unreachable!("source matches protocol"),
    }
}

fn sequence_model(cfg: &ExperimentConfig, tasks: &[TaskSpec]) -> RunResult<ModelSpec> {
    let heads: Vec<HeadSpec> = tasks
        .iter()
        .map(|t| HeadSpec::new(t.head.clone(), t.train.num_classes()))
        .collect();
    let shape = tasks[0].train.sample_shape();
    match cfg.model.kind.expect("resolved") {
        ModelKind::Mlp => {
            let mut dims = vec![shape.iter().product()];
            dims.extend(cfg.model.hidden.as_ref().expect("resolved"));
            build_mlp_multihead(&dims, heads).map_err(err)
        }
        ModelKind::Cnn => build_cnn(shape, heads).map_err(err),
        ModelKind::LocoCnn => build_loco_cnn(shape, heads).map_err(err),
    }
}

fn run_sequence_cell(cfg: &ExperimentConfig, source: &Source, seed: u64) -> RunResult<Vec<MetricsRecord>> {
    let tasks = sequence_tasks(cfg, source, seed)?;
    let model = sequence_model(cfg, &tasks)?;
    let train = train_config(cfg, seed);
    let mut records = Vec::new();
    for method in cfg.core_methods() {
        let run = run_sequence(&model, &tasks, &method, &train).map_err(err)?;
        for profile in &run.profiles {
            let name = format!("{}-{}.ppap", run.metrics.run_id, profile.task_id());
            save_profile(profile, &profiles_dir(&cfg.out)?.join(name)).map_err(err)?;
        }
        records.push(run.metrics);
    }
    Ok(records)
}

fn profiles_dir(out: &Path) -> RunResult<PathBuf> {
    let dir = out.join("profiles");
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    Ok(dir)
}

fn run_loco_cell(
    cfg: &ExperimentConfig,
    source: &Source,
    seed: u64,
    holdout: usize,
    epochs: [usize; 2],
) -> RunResult<Vec<MetricsRecord>> {
    let l = cfg.loco.as_ref().expect("resolved");
    let generated;
    let ds = match source {
        Source::Loco(ds) => ds,
        _ => {
            generated = gen_synthetic_superclasses(&l.synthetic.to_core(), seed).map_err(err)?;
            &generated
        }
    };
    let (pre, fine) = make_loco_tasks(ds, holdout, &SplitPlan::train_val_test(seed)).map_err(err)?;
    let pre = pre.with_budget(epochs[0], l.batch_size);
    let fine = fine.with_budget(epochs[1], l.batch_size);
    let heads = vec![
        HeadSpec::new(pre.head.clone(), pre.train.num_classes()),
        HeadSpec::new(fine.head.clone(), fine.train.num_classes()),
    ];
    let shape = pre.train.sample_shape().to_vec();
    let model = match cfg.model.kind.expect("resolved") {
        ModelKind::Mlp => {
            let mut dims = vec![shape.iter().product()];
            dims.extend(cfg.model.hidden.as_ref().expect("resolved"));
            build_mlp_multihead(&dims, heads)
        }
        ModelKind::Cnn => build_cnn(&shape, heads),
        ModelKind::LocoCnn => build_loco_cnn(&shape, heads),
    }
    .map_err(err)?;

    let methods = cfg.core_methods();
    let mut loco = LocoConfig {
        train: train_config(cfg, seed),
        probe: ProbeConfig {
            epochs: l.probe_epochs,
            patience: l.probe_patience,
            min_delta: l.probe_min_delta,
            batch_size: l.probe_batch_size,
            seed,
            ..ProbeConfig::default()
        },
        ..LocoConfig::default()
    };
    for m in &methods {
        match m {
            Method::Ppap(p) => {
                loco.k = p.k;
                loco.trigger = p.trigger;
            }
            Method::Si(s) => loco.si_damping = s.damping,
            Method::Ewc(e) => loco.fisher_samples = e.samples,
            Method::None | Method::Scratch => {}
        }
    }
    let suffix = format!("-h{holdout}-e{}x{}", epochs[0], epochs[1]);
    let mut session = LocoSession::pretrain(&model, pre, fine, loco).map_err(err)?;
    if cfg.methods.iter().any(|m| m.kind == MethodName::Ppap) {
        let name = format!("loco-s{seed}{suffix}.ppap");
        save_profile(session.profile(), &profiles_dir(&cfg.out)?.join(name)).map_err(err)?;
    }
    let mut records = Vec::new();
    for m in &methods {
        let mut rec = session.run(m).map_err(err)?;
        rec.run_id.push_str(&suffix);
        records.push(rec);
    }
    Ok(records)
}
