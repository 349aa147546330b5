//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p ppap-core --test acceptance -- 1 5`.
//! `PPAP_ACCEPT_QUICK_LOCO=1` limits criterion 8 to every fourth hold-out, and
//! `PPAP_CIFAR_DIR` enables criterion 9.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ppap_core::baselines::{ewc_fisher, si_consolidate, SiTracker, DEFAULT_SI_DAMPING};
use ppap_core::data::{
    gen_synthetic_superclasses, gen_synthetic_tasks, gen_synthetic_tasks_with, load_cifar_files,
    make_cifar_sequence, make_loco_tasks, AugmentSpec, Batch, CifarVariant, Normalization,
    SplitPlan, SuperclassConfig, SyntheticConfig, SyntheticKind,
};
use ppap_core::gradcheck::finite_diff_check_with;
use ppap_core::graph::Graph;
use ppap_core::harness::{
    metrics_csv_bytes, run_loco, run_sequence, train_task, EwcSettings, LocoConfig, LocoSession,
    Method, PpapSettings, SiSettings, StepHooks, TaskSpec, TrainConfig,
};
use ppap_core::models::{
    build_cnn_multihead, build_mlp_multihead, numbered_heads, DropoutMode, HeadSpec, Layer,
    ModelSpec,
};
use ppap_core::optim::{Optimizer, OptimizerConfig};
use ppap_core::ppap::{
    decode_profile, encode_profile, load_profile, make_ppap_hook, save_profile, Activities,
    ActivityAccumulator, BlendConfig, PlateauProfile, SpikeTrigger,
};
use ppap_core::verify::run_verify;
use ppap_core::{GradientStore, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<Verdict, String>;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn err(e: ppap_core::Error) -> String {
    e.to_string()
}

// 1 ---------------------------------------------------------------------------

fn two_pass_population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn welford_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(2..=10_000);
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive).map_err(err)?;
        for &x in &xs {
            let mut a = Activities::new();
            a.insert("w", &[1], vec![x]).map_err(err)?;
            acc.accumulate(&a).map_err(err)?;
        }
        let online = acc.std_dev("w").ok_or("no stats for w")?[0];
        let exact = two_pass_population_std(&xs);
        worst = worst.max((online - exact).abs() / exact);
    }
    let elapsed = started.elapsed();
    Ok(verdict(
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("max rel err {worst:.2e} (< 1e-9) over 1000 sequences in {elapsed:.2?} (< 10s)"),
    ))
}

// 2 ---------------------------------------------------------------------------

fn dense(name: &str, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        name: name.into(),
        inputs,
        outputs,
    }
}

fn conv(name: &str, in_channels: usize, out_channels: usize) -> Layer {
    Layer::Conv2d {
        name: name.into(),
        in_channels,
        out_channels,
        kernel: 3,
    }
}

/// Alternates an MLP with dropout and a conv/pool/flatten network, with
/// randomised widths.
fn gradcheck_model(rng: &mut ChaCha8Rng, trial: usize) -> Result<(ModelSpec, Vec<usize>), String> {
    let classes = rng.random_range(2..=4);
    let heads = vec![HeadSpec::new("task1", classes)];
    let batch = rng.random_range(1..=3);
    if trial % 2 == 0 {
        let d = rng.random_range(2..=5);
        let h1 = rng.random_range(3..=7);
        let h2 = rng.random_range(3..=6);
        let layers = vec![
            dense("fc1", d, h1),
            Layer::Relu,
            Layer::Dropout { rate: 0.3 },
            dense("fc2", h1, h2),
            Layer::Relu,
        ];
        Ok((ModelSpec::new(vec![d], layers, heads).map_err(err)?, vec![batch, d]))
    } else {
        let c = rng.random_range(1..=2);
        let k1 = rng.random_range(2..=3);
        let k2 = rng.random_range(1..=2);
        let layers = vec![
            conv("conv1", c, k1),
            Layer::Relu,
            Layer::MaxPool2,
            conv("conv2", k1, k2),
            Layer::Relu,
            Layer::Flatten,
            Layer::Dropout { rate: 0.25 },
            dense("fc", k2 * 4, 4),
            Layer::Relu,
        ];
        Ok((
            ModelSpec::new(vec![c, 4, 4], layers, heads).map_err(err)?,
            vec![batch, c, 4, 4],
        ))
    }
}

fn gradient_oracle() -> Check {
    let started = Instant::now();
    let h = 1e-3;
    let margin = 20.0 * h;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut failing = 0;
    let mut resampled = 0;
    let mut layer_kinds = std::collections::BTreeSet::new();
    for trial in 0..100 {
        let (model, shape) = gradcheck_model(&mut rng, trial)?;
        for layer in model.layers() {
            layer_kinds.insert(match layer {
                Layer::Dense { .. } => "dense",
                Layer::Conv2d { .. } => "conv",
                Layer::Relu => "relu",
                Layer::MaxPool2 => "maxpool",
                Layer::Dropout { .. } => "dropout",
                Layer::Flatten => "flatten",
            });
        }
        let classes = model.active_head().outputs;
        // Redraw until no ReLU input or pooling tie sits within the margin.
        let (params, batch, masks) = loop {
            let params: ParamStore<f64> = model.init_params(rng.random()).cast();
            let len: usize = shape.iter().product();
            let inputs = Tensor::new(shape.clone(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
                .map_err(err)?;
            let labels = (0..shape[0]).map(|_| rng.random_range(0..classes)).collect();
            let batch = Batch::new(inputs, labels).map_err(err)?;
            let mut mask_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (_, g) = model
                .forward(&params, &batch, DropoutMode::Sample(&mut mask_rng))
                .map_err(err)?;
            let masks = g.dropout_masks();
            let mut graph = Graph::new();
            model
                .record_logits(&mut graph, &params, &batch.inputs, DropoutMode::Reuse(&masks))
                .map_err(err)?;
            if graph.kink_margin().is_none_or(|m| m > margin) {
                break (params, batch, masks);
            }
            resampled += 1;
        };
        let report = finite_diff_check_with(&params, h, 1e-3, |p| {
            let (loss, mut graph) = model.forward(p, &batch, DropoutMode::Reuse(&masks))?;
            Ok((loss, graph.backward()?))
        })
        .map_err(err)?;
        worst = worst.max(report.max_rel_error());
        if !report.passed() {
            failing += 1;
        }
    }
    layer_kinds.insert("cross-entropy");
    let elapsed = started.elapsed();
    Ok(verdict(
        failing == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{failing}/100 instances failed, max rel err {worst:.2e} (< 1e-3), {resampled} kink redraws, \
             layers {layer_kinds:?}, {elapsed:.2?} (< 60s)"
        ),
    ))
}

// 3 ---------------------------------------------------------------------------

fn hook_identity() -> Check {
    let cfg = SyntheticConfig {
        epochs: 1,
        batch_size: 8,
        ..SyntheticConfig::default()
    };
    let tasks = gen_synthetic_tasks_with(SyntheticKind::ClusterSplit, 2, 3, &cfg).map_err(err)?;
    let classes = tasks[0].train.num_classes();
    let model = ModelSpec::new(
        vec![2],
        vec![
            dense("fc1", 2, 16),
            Layer::Relu,
            Layer::Dropout { rate: 0.2 },
            dense("fc2", 16, 16),
            Layer::Relu,
        ],
        numbered_heads(&[classes, classes]),
    )
    .map_err(err)?;
    let train = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };

    // A real profile and real importances from a first task.
    let first = model.activate_head("task1").map_err(err)?;
    let mut p1 = model.init_params(3);
    let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive).map_err(err)?;
    let mut tracker = SiTracker::new(&p1);
    train_task(
        &first,
        &mut p1,
        &tasks[0],
        &train,
        0,
        StepHooks {
            accumulator: Some(&mut acc),
            si: Some(&mut tracker),
            ..StepHooks::default()
        },
    )
    .map_err(err)?;
    let profile = Arc::new(acc.finalize("task1").map_err(err)?);
    let non_trivial = profile.all_scores().any(|s| s > 0.0 && s < 1.0);
    let si = si_consolidate(&tracker, &p1, DEFAULT_SI_DAMPING)
        .and_then(|m| m.with_strength(0.0))
        .map_err(err)?;
    let ewc = ewc_fisher(&first, &p1, &tasks[0].train)
        .and_then(|m| m.with_strength(0.0))
        .map_err(err)?;

    let second = model.activate_head("task2").map_err(err)?;
    let run = |hooks: StepHooks<'_>| -> Result<ParamStore, String> {
        let mut p = p1.clone();
        let stats = train_task(&second, &mut p, &tasks[1], &train, 1, hooks).map_err(err)?;
        if stats.steps != 20 {
            return Err(format!("expected 20 steps, ran {}", stats.steps));
        }
        Ok(p)
    };
    let limit = StepHooks {
        max_steps: Some(20),
        ..StepHooks::default()
    };
    let plain = run(limit)?;
    let mut hook = make_ppap_hook(profile, BlendConfig::new(1.0, 1.0).map_err(err)?);
    let variants = [
        (
            "ppap r=1",
            run(StepHooks {
                update: Some(&mut hook),
                max_steps: Some(20),
                ..StepHooks::default()
            })?,
        ),
        (
            "si c=0",
            run(StepHooks {
                penalty: Some(&si),
                max_steps: Some(20),
                ..StepHooks::default()
            })?,
        ),
        (
            "ewc lambda=0",
            run(StepHooks {
                penalty: Some(&ewc),
                max_steps: Some(20),
                ..StepHooks::default()
            })?,
        ),
    ];
    let moved = plain
        .iter()
        .any(|(n, p)| p.value.data() != p1.get(n).expect("same names").data());
    let mut mismatches = Vec::new();
    for (label, params) in &variants {
        let same = plain.len() == params.len()
            && plain.iter().all(|(name, p)| {
                params.get(name).is_some_and(|q| {
                    q.data().len() == p.value.data().len()
                        && q.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            });
        if !same {
            mismatches.push(*label);
        }
    }
    Ok(verdict(
        mismatches.is_empty() && moved && non_trivial,
        if mismatches.is_empty() {
            format!(
                "ppap r=1, si c=0, ewc lambda=0 bit-identical to plain over 20 steps ({} tensors, profile non-trivial: {non_trivial})",
                plain.len()
            )
        } else {
            format!("differs from plain: {}", mismatches.join(", "))
        },
    ))
}

// 4 ---------------------------------------------------------------------------

/// Reference finalisation written against the definition, not the crate.
fn reference_profile(sums: &[f64], stds: &[f64]) -> Vec<f64> {
    fn norm(v: &[f64]) -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            vec![1.0; v.len()]
        } else {
            v.iter().map(|x| (x - lo) / (hi - lo)).collect()
        }
    }
    let pre: Vec<f64> = norm(sums).iter().zip(norm(stds)).map(|(a, b)| a * b).collect();
    norm(&pre)
}

fn scripted_profile(steps: &[Vec<f64>]) -> Result<(PlateauProfile, Vec<f64>), String> {
    let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive).map_err(err)?;
    for values in steps {
        let mut a = Activities::new();
        a.insert("w", &[values.len()], values.clone()).map_err(err)?;
        acc.accumulate(&a).map_err(err)?;
    }
    let n = steps.len() as f64;
    let width = steps[0].len();
    let sums: Vec<f64> = (0..width).map(|i| steps.iter().map(|s| s[i].abs()).sum()).collect();
    let stds: Vec<f64> = (0..width)
        .map(|i| {
            let mean = steps.iter().map(|s| s[i]).sum::<f64>() / n;
            (steps.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok((acc.finalize("scripted").map_err(err)?, reference_profile(&sums, &stds)))
}

fn profile_contract() -> Check {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // Non-degenerate: random activities over two tensors.
    for trial in 0..20 {
        let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive).map_err(err)?;
        for _ in 0..50 {
            let mut a = Activities::new();
            a.insert("a", &[3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                .map_err(err)?;
            a.insert("b", &[5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .map_err(err)?;
            acc.accumulate(&a).map_err(err)?;
        }
        let p = acc.finalize("random").map_err(err)?;
        let scores: Vec<f32> = p.all_scores().collect();
        let lo = scores.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if lo != 0.0 || hi != 1.0 || scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            problems.push(format!("trial {trial}: range [{lo}, {hi}]"));
        }
    }

    // Scripted cases compared with the reference finalisation.
    let cases: Vec<(&str, Vec<Vec<f64>>, Option<Vec<f32>>)> = vec![
        ("identical statistics", vec![vec![0.5; 4]; 6], Some(vec![1.0; 4])),
        ("sigma constant", vec![vec![1.0, 2.0, 3.0]; 2], Some(vec![0.0, 0.5, 1.0])),
        (
            "anti-aligned S and sigma",
            vec![vec![3.0, 1.0], vec![3.0, -1.0]],
            Some(vec![1.0, 1.0]),
        ),
        (
            "mixed",
            vec![vec![0.1, -0.4, 2.0, 0.0], vec![0.3, 0.4, 1.0, 0.0], vec![-0.2, 0.1, 1.5, 0.0]],
            None,
        ),
    ];
    for (label, steps, expected) in cases {
        let (profile, reference) = scripted_profile(&steps)?;
        let got = profile.scores("w").ok_or("missing scores")?.to_vec();
        let want: Vec<f32> = reference.iter().map(|&v| v as f32).collect();
        if got != want {
            problems.push(format!("{label}: got {got:?}, reference {want:?}"));
        }
        if let Some(e) = expected {
            if got != e {
                problems.push(format!("{label}: got {got:?}, expected {e:?}"));
            }
        }
    }

    // Round trip through a file.
    let mut acc = ActivityAccumulator::new(17.5, SpikeTrigger::Absolute).map_err(err)?;
    for _ in 0..30 {
        let mut a = Activities::new();
        a.insert("conv.weight", &[2, 1, 3, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(err)?;
        a.insert("head.bias", &[3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(err)?;
        acc.accumulate(&a).map_err(err)?;
    }
    let original = acc.finalize("task-α").map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("profile.ppap");
    save_profile(&original, &path).map_err(err)?;
    let loaded = load_profile(&path).map_err(err)?;
    let bits = |p: &PlateauProfile| -> Vec<(String, Vec<usize>, Vec<u32>)> {
        p.iter()
            .map(|(n, e)| (n.to_string(), e.shape.clone(), e.scores.iter().map(|s| s.to_bits()).collect()))
            .collect()
    };
    let round_trip = bits(&loaded) == bits(&original)
        && loaded.task_id() == original.task_id()
        && loaded.k().to_bits() == original.k().to_bits()
        && loaded.steps() == original.steps()
        && encode_profile(&loaded) == std::fs::read(&path).map_err(|e| e.to_string())?
        && decode_profile(&encode_profile(&original)).map_err(err)? == original;
    if !round_trip {
        problems.push("save/load round trip not bit-exact".into());
    }

    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "20 random profiles hit exact 0 and 1, degenerate cases give all ones, file round trip bit-exact".into()
        } else {
            problems.join("; ")
        },
    ))
}

// 5 ---------------------------------------------------------------------------

fn reduction_semantics() -> Check {
    let k = 25.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut acc = ActivityAccumulator::new(k, SpikeTrigger::Positive).map_err(err)?;
    let mut history: Vec<Vec<f64>> = Vec::new();
    for _ in 0..100 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acts = Activities::new();
        acts.insert("w", &[4], a.clone()).map_err(err)?;
        acc.accumulate(&acts).map_err(err)?;
        history.push(a);
    }
    // Hand computation before the spike.
    let sums: Vec<f64> = (0..4).map(|i| history.iter().fold(0.0, |s, a| s + a[i].abs())).collect();
    let ssd_two_pass: Vec<f64> = (0..4)
        .map(|i| {
            let mean = history.iter().map(|a| a[i]).sum::<f64>() / 100.0;
            history.iter().map(|a| (a[i] - mean).powi(2)).sum::<f64>()
        })
        .collect();
    let s_before = acc.sum_abs("w").ok_or("missing")?.to_vec();
    let ssd_before = acc.ssd("w").ok_or("missing")?.to_vec();
    let mut problems = Vec::new();
    if s_before != sums {
        problems.push(format!("S before spike {s_before:?} != {sums:?}"));
    }
    for (got, want) in ssd_before.iter().zip(&ssd_two_pass) {
        if ((got - want) / want).abs() > 1e-12 {
            problems.push(format!("SSD before spike {got} vs two-pass {want}"));
        }
    }
    if acc.effective_count() != 100 {
        problems.push(format!("N before spike {}", acc.effective_count()));
    }

    let fired = acc.reduce_on_spike(0.5).map_err(err)?;
    let e625 = (-6.25f64).exp();
    let e125 = (-12.5f64).exp();
    if fired != Some(e625) {
        problems.push(format!("reduction factor {fired:?}, expected {e625}"));
    }
    let s_after = acc.sum_abs("w").ok_or("missing")?.to_vec();
    let ssd_after = acc.ssd("w").ok_or("missing")?.to_vec();
    let want_s: Vec<f64> = s_before.iter().map(|s| s * e625).collect();
    if s_after != want_s {
        problems.push(format!("S after {s_after:?} != {want_s:?}"));
    }
    for (got, before) in ssd_after.iter().zip(&ssd_before) {
        // e^-12.5 and (e^-6.25)² agree to the last couple of bits.
        let want = before * e125;
        if ((got - want) / want).abs() > 4.0 * f64::EPSILON {
            problems.push(format!("SSD after {got} vs {want}"));
        }
    }
    let want_n = (100.0 * e625).ceil() as u64;
    if acc.effective_count() != want_n || want_n != 1 {
        problems.push(format!("N after {} vs ceil(100 e^-6.25) = {want_n}", acc.effective_count()));
    }

    // Full observe path: the spike step itself then accumulates with f.
    let mut obs = ActivityAccumulator::new(k, SpikeTrigger::Positive).map_err(err)?;
    let upd = |v: f32| {
        let mut u = ppap_core::optim::UpdateSet::new();
        u.insert("w", Tensor::new(vec![1], vec![v]).expect("shape"));
        u
    };
    let grad = |v: f32| -> GradientStore { [("w".to_string(), Tensor::new(vec![1], vec![v]).expect("shape"))].into_iter().collect() };
    for _ in 0..100 {
        obs.observe(0.0, &upd(-0.5), &grad(2.0)).map_err(err)?;
    }
    let report = obs.observe(0.5, &upd(-0.5), &grad(2.0)).map_err(err)?;
    let spike_a = -1.0 * e625;
    let want_s = 100.0 * e625 + spike_a.abs();
    let mean_after = -1.0 + (spike_a + 1.0) / 101.0;
    let want_ssd = (spike_a + 1.0) * (spike_a - mean_after);
    let got_s = obs.sum_abs("w").ok_or("missing")?[0];
    let got_ssd = obs.ssd("w").ok_or("missing")?[0];
    if report.reduction != Some(e625)
        || (got_s - want_s).abs() > 1e-14
        || (got_ssd - want_ssd).abs() > 1e-14
        || obs.effective_count() != 2
    {
        problems.push(format!(
            "observe path: S {got_s} vs {want_s}, SSD {got_ssd} vs {want_ssd}, N {}",
            obs.effective_count()
        ));
    }

    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("S x e^-6.25, SSD x e^-12.5, N 100 -> {want_n}; spike step then accumulates with f")
        } else {
            problems.join("; ")
        },
    ))
}

// 6 ---------------------------------------------------------------------------

const VALLEY_A: f64 = 0.01;
const VALLEY_B: f64 = 1.0;

fn valley_loss(t: &[f32]) -> f64 {
    let (x, y) = (t[0] as f64, t[1] as f64);
    VALLEY_A * x * x + VALLEY_B * y * y
}

/// Returns (P_θ1, P_θ2, steps to convergence) for one seed.
fn valley_run(seed: u64) -> Result<(f32, f32, usize), String> {
    let window = 100;
    let tol = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.05).map_err(|e| e.to_string())?;
    let mut params = ParamStore::new();
    params.insert("theta", Tensor::new(vec![2], vec![1.0, 1.0]).map_err(err)?).map_err(err)?;
    let mut opt = Optimizer::new(OptimizerConfig::sgd(1e-3, 0.9)).map_err(err)?;
    let mut step = |params: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<(f64, f64, _, GradientStore), String> {
        let t = params.get("theta").ok_or("theta")?.data().to_vec();
        let g = vec![
            (2.0 * VALLEY_A) as f32 * t[0] + noise.sample(rng),
            (2.0 * VALLEY_B) as f32 * t[1] + noise.sample(rng),
        ];
        let grads: GradientStore = [("theta".to_string(), Tensor::new(vec![2], g).map_err(err)?)].into_iter().collect();
        let before = valley_loss(&t);
        let applied = opt.step(params, &grads, None).map_err(err)?;
        let after = valley_loss(params.get("theta").ok_or("theta")?.data());
        Ok((before, after, applied, grads))
    };

    // Converged once a window's mean loss improves on the previous window's
    // by less than `tol` of it.
    let mut prev: Option<f64> = None;
    let mut steps = 0;
    loop {
        let mut sum = 0.0;
        for _ in 0..window {
            sum += step(&mut params, &mut rng)?.1;
        }
        steps += window;
        let mean = sum / window as f64;
        if let Some(p) = prev {
            if p - mean < tol * p {
                break;
            }
        }
        prev = Some(mean);
        if steps > 1_000_000 {
            return Err(format!("seed {seed}: no convergence"));
        }
    }

    let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive).map_err(err)?;
    for _ in 0..2000 {
        let (before, after, applied, grads) = step(&mut params, &mut rng)?;
        acc.observe(after - before, &applied, &grads).map_err(err)?;
    }
    let profile = acc.finalize("valley").map_err(err)?;
    let p = profile.scores("theta").ok_or("theta")?;
    Ok((p[0], p[1], steps))
}

fn flat_direction() -> Check {
    let started = Instant::now();
    let mut wins = 0;
    let mut conv = Vec::new();
    for seed in 0..20 {
        let (p1, p2, steps) = valley_run(seed)?;
        if p1 > p2 {
            wins += 1;
        }
        conv.push(steps);
    }
    let elapsed = started.elapsed();
    conv.sort_unstable();
    Ok(verdict(
        wins >= 18 && elapsed < Duration::from_secs(30),
        format!(
            "P(theta1) > P(theta2) in {wins}/20 seeds (>= 18), convergence after {}..{} steps, {elapsed:.2?} (< 30s)",
            conv[0], conv[19]
        ),
    ))
}

// 7 ---------------------------------------------------------------------------

fn forgetting_mitigation() -> Check {
    let started = Instant::now();
    let rs = [0.05, 0.1, 0.2];
    let mut wins = [0usize; 3];
    let mut close = [0usize; 3];
    let mut ret = [0.0f64; 4];
    let mut adapt = [0.0f64; 4];
    for seed in 0..20u64 {
        let tasks = gen_synthetic_tasks(SyntheticKind::ClusterSplit, 2, seed).map_err(err)?;
        let c = tasks[0].train.num_classes();
        let model = build_mlp_multihead(&[2, 32, 32], numbered_heads(&[c, c])).map_err(err)?;
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let none = run_sequence(&model, &tasks, &Method::None, &cfg).map_err(err)?.metrics;
        let (none_ret, none_adapt) = (none.retention.ok_or("retention")?, none.adaptation.ok_or("adaptation")?);
        ret[3] += none_ret / 20.0;
        adapt[3] += none_adapt / 20.0;
        for (i, &r) in rs.iter().enumerate() {
            let m = Method::Ppap(PpapSettings {
                r,
                k: 25.0,
                ..PpapSettings::default()
            });
            let run = run_sequence(&model, &tasks, &m, &cfg).map_err(err)?.metrics;
            let (pr, pa) = (run.retention.ok_or("retention")?, run.adaptation.ok_or("adaptation")?);
            ret[i] += pr / 20.0;
            adapt[i] += pa / 20.0;
            if pr > none_ret && (pa - none_adapt).abs() <= 0.05 {
                wins[i] += 1;
            }
            if (pa - none_adapt).abs() <= 0.05 {
                close[i] += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let ok = wins.iter().all(|&w| w >= 18) && elapsed < Duration::from_secs(600);
    let per_r: Vec<String> = rs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "r={r}: {}/20 (task-2 within 5 pts in {}/20, mean retention {:.3}, task-2 {:.3})",
                wins[i], close[i], ret[i], adapt[i]
            )
        })
        .collect();
    Ok(verdict(
        ok,
        format!(
            "{}; fine-tuning retention {:.3}, task-2 {:.3}; {elapsed:.2?} (< 10 min)",
            per_r.join("; "),
            ret[3],
            adapt[3]
        ),
    ))
}

// 8 ---------------------------------------------------------------------------

fn frontier(kind: usize) -> Vec<Method> {
    match kind {
        0 => [0.05, 0.1, 0.2, 0.3]
            .iter()
            .map(|&r| Method::Ppap(PpapSettings { r, ..PpapSettings::default() }))
            .collect(),
        1 => [0.05, 0.005, 0.0005, 0.00005].iter().map(|&c| Method::Si(SiSettings::new(c))).collect(),
        _ => [10.0, 100.0, 500.0, 1000.0].iter().map(|&l| Method::Ewc(EwcSettings::new(l))).collect(),
    }
}

fn tradeoff_dominance() -> Check {
    let started = Instant::now();
    let holdouts: Vec<usize> = if std::env::var_os("PPAP_ACCEPT_QUICK_LOCO").is_some() {
        (0..20).step_by(4).collect()
    } else {
        (0..20).collect()
    };
    let data_cfg = SuperclassConfig::default();
    let mut seed_lines = Vec::new();
    let mut passing_seeds = 0;
    for seed in 0..3u64 {
        let ds = gen_synthetic_superclasses(&data_cfg, seed).map_err(err)?;
        let mut best_sum = [0.0f64; 3];
        for &h in &holdouts {
            let (mut pre, mut fine) = make_loco_tasks(&ds, h, &SplitPlan::train_val_test(seed)).map_err(err)?;
            pre.epochs = 20;
            fine.epochs = 20;
            let model = build_mlp_multihead(
                &[data_cfg.dim, 32, 8],
                vec![HeadSpec::new("pretrain", 19), HeadSpec::new("finetune", 5)],
            )
            .map_err(err)?;
            let cfg = LocoConfig {
                train: TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
                ..LocoConfig::default()
            };
            let mut session = LocoSession::pretrain(&model, pre, fine, cfg).map_err(err)?;
            for (kind, sum) in best_sum.iter_mut().enumerate() {
                let mut best: f64 = 0.0;
                for m in frontier(kind) {
                    best = best.max(session.finetune(&m).map_err(err)?.euclidean_score());
                }
                *sum += best;
            }
        }
        let n = holdouts.len() as f64;
        let [ppap, si, ewc] = best_sum.map(|s| s / n);
        let ok = ppap >= si && ppap >= ewc;
        if ok {
            passing_seeds += 1;
        }
        seed_lines.push(format!("seed {seed}: ppap {ppap:.4} si {si:.4} ewc {ewc:.4}"));
    }
    Ok(verdict(
        passing_seeds >= 2,
        format!(
            "ppap best >= si and ewc best in {passing_seeds}/3 seeds (>= 2) over hold-outs {holdouts:?} [{}], {:.2?}",
            seed_lines.join("; "),
            started.elapsed()
        ),
    ))
}

// 9 ---------------------------------------------------------------------------

const EXPECTED_PPAP: [f64; 6] = [0.820, 0.736, 0.740, 0.751, 0.760, 0.823];

fn cifar_protocol() -> Check {
    let Some(dir) = std::env::var_os("PPAP_CIFAR_DIR") else {
        return Ok(Verdict::Skip("optional; set PPAP_CIFAR_DIR to run".into()));
    };
    let dir = Path::new(&dir);
    let c10: Vec<_> = (1..=5).map(|i| dir.join(format!("cifar-10-batches-bin/data_batch_{i}.bin"))).collect();
    let c100 = [dir.join("cifar-100-binary/train.bin")];
    let norm = Normalization::CIFAR100;
    let cifar10 = load_cifar_files(&c10, CifarVariant::Cifar10, &norm).map_err(err)?;
    let cifar100 = load_cifar_files(&c100, CifarVariant::Cifar100, &norm).map_err(err)?;
    let tasks: Vec<TaskSpec> = make_cifar_sequence(&cifar10, &cifar100, 5, 60, 256, 0).map_err(err)?;
    let model = build_cnn_multihead(&[3, 32, 32], &[10; 6]).map_err(err)?;
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::adam(1e-3),
        seed: 0,
        augment: Some(AugmentSpec::CIFAR),
        record_wall_time: false,
    };
    let method = Method::Ppap(PpapSettings {
        k: 25.0,
        r: 0.03,
        ..PpapSettings::default()
    });
    let run = run_sequence(&model, &tasks, &method, &cfg).map_err(err)?;
    let last = format!("after-{}", tasks[5].id);
    let mut lines = Vec::new();
    let mut ok = true;
    for (t, want) in tasks.iter().zip(EXPECTED_PPAP) {
        let got = run.metrics.accuracy(&last, &t.id).ok_or("missing accuracy")?;
        ok &= (got - want).abs() <= 0.03;
        lines.push(format!("{} {got:.3} vs {want:.3}", t.id));
    }
    Ok(verdict(ok, lines.join(", ")))
}

// 10 --------------------------------------------------------------------------

fn determinism() -> Check {
    let a = run_verify(&[]);
    let b = run_verify(&[]);
    let verify_same = a.csv() == b.csv() && a.table() == b.table();

    let cfg = SyntheticConfig {
        classes_per_task: 3,
        epochs: 5,
        ..SyntheticConfig::default()
    };
    let tasks = gen_synthetic_tasks_with(SyntheticKind::ClusterSplit, 3, 9, &cfg).map_err(err)?;
    let c = tasks[0].train.num_classes();
    let model = build_mlp_multihead(&[2, 16], numbered_heads(&[c, c, c])).map_err(err)?;
    let train = TrainConfig {
        seed: 9,
        ..TrainConfig::default()
    };
    let sequence_csv = || -> Result<Vec<u8>, String> {
        let records: Vec<_> = [
            Method::None,
            Method::Ppap(PpapSettings::default()),
            Method::Si(SiSettings::new(0.05)),
            Method::Ewc(EwcSettings::new(100.0)),
        ]
        .iter()
        .map(|m| run_sequence(&model, &tasks, m, &train).map(|r| r.metrics))
        .collect::<Result<_, _>>()
        .map_err(err)?;
        metrics_csv_bytes(&records).map_err(err)
    };
    let seq_same = sequence_csv()? == sequence_csv()?;

    let data_cfg = SuperclassConfig {
        samples_per_fine: 20,
        ..SuperclassConfig::default()
    };
    let loco_csv = || -> Result<Vec<u8>, String> {
        let ds = gen_synthetic_superclasses(&data_cfg, 9).map_err(err)?;
        let (mut pre, mut fine) = make_loco_tasks(&ds, 3, &SplitPlan::train_val_test(9)).map_err(err)?;
        pre.epochs = 2;
        fine.epochs = 2;
        let model = build_mlp_multihead(&[16, 16], vec![HeadSpec::new("pretrain", 19), HeadSpec::new("finetune", 5)])
            .map_err(err)?;
        let cfg = LocoConfig {
            train: TrainConfig {
                seed: 9,
                ..TrainConfig::default()
            },
            ..LocoConfig::default()
        };
        let rec = run_loco(&model, pre, fine, &Method::Ppap(PpapSettings::default()), cfg).map_err(err)?;
        metrics_csv_bytes([&rec]).map_err(err)
    };
    let loco_same = loco_csv()? == loco_csv()?;

    Ok(verdict(
        verify_same && seq_same && loco_same,
        format!("verify report identical: {verify_same}, sequence CSV identical: {seq_same}, LOCO CSV identical: {loco_same}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "welford-oracle", welford_oracle),
        (2, "gradient-oracle", gradient_oracle),
        (3, "hook-identity", hook_identity),
        (4, "profile-contract", profile_contract),
        (5, "reduction-semantics", reduction_semantics),
        (6, "flat-direction-selectivity", flat_direction),
        (7, "synthetic-forgetting-mitigation", forgetting_mitigation),
        (8, "tradeoff-dominance", tradeoff_dominance),
        (9, "cifar-protocol", cifar_protocol),
        (10, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let line = match check() {
            Ok(Verdict::Pass(d)) => format!("PASS  {id:>2} {name}: {d}"),
            Ok(Verdict::Skip(d)) => format!("SKIP  {id:>2} {name}: {d}"),
            Ok(Verdict::Fail(d)) => {
                failed += 1;
                format!("FAIL  {id:>2} {name}: {d}")
            }
            Err(e) => {
                failed += 1;
                format!("FAIL  {id:>2} {name}: error: {e}")
            }
        };
        println!("{line}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
