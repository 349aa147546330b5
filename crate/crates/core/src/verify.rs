//! Headless self-check: runs the invariant and oracle suites and reports a
//! pass/fail table. Every suite is seeded, so the report is reproducible.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_synthetic_tasks_with, Batch, SyntheticConfig, SyntheticKind};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, finite_diff_check_with};
use crate::graph::Graph;
use crate::harness::{run_sequence, EwcSettings, Method, PpapSettings, SiSettings, TrainConfig};
use crate::models::{build_mlp, DropoutMode, HeadSpec, Layer, ModelSpec};
use crate::optim::UpdateHook;
use crate::ppap::{
    decode_profile, encode_profile, make_ppap_hook, Activities, ActivityAccumulator, BlendConfig,
    PlateauProfile, ProfileEntry, SpikeTrigger,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Welford,
    Gradcheck,
    HookIdentity,
    ProfileRange,
    BlendEndpoints,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Welford,
        Suite::Gradcheck,
        Suite::HookIdentity,
        Suite::ProfileRange,
        Suite::BlendEndpoints,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Welford => "welford",
            Suite::Gradcheck => "gradcheck",
            Suite::HookIdentity => "hook-identity",
            Suite::ProfileRange => "profile-range",
            Suite::BlendEndpoints => "blend-endpoints",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub results: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = Suite> + '_ {
        self.results.iter().filter(|r| !r.passed).map(|r| r.suite)
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:<6} detail\n", "suite", "status");
        for r in &self.results {
            let status = if r.passed { "pass" } else { "FAIL" };
            let _ = writeln!(s, "{:<16} {:<6} {}", r.suite.name(), status, r.detail);
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("suite,status,detail\n");
        for r in &self.results {
            let status = if r.passed { "pass" } else { "fail" };
            let _ = writeln!(s, "{},{},\"{}\"", r.suite.name(), status, r.detail.replace('"', "'"));
        }
        s
    }
}

/// Runs every suite. Suites listed in `faults` run with a deliberate defect
/// so that the failure path can be exercised.
pub fn run_verify(faults: &[Suite]) -> VerifyReport {
    let results = Suite::ALL
        .iter()
        .map(|&suite| {
            let fault = faults.contains(&suite);
            let outcome = match suite {
                Suite::Welford => welford(fault),
                Suite::Gradcheck => gradcheck(fault),
                Suite::HookIdentity => hook_identity(fault),
                Suite::ProfileRange => profile_range(fault),
                Suite::BlendEndpoints => blend_endpoints(fault),
            };
            let (passed, detail) = match outcome {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            SuiteResult {
                suite,
                passed,
                detail,
            }
        })
        .collect();
    VerifyReport { results }
}

type Outcome = Result<(bool, String)>;

fn two_pass_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn welford(fault: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.random_range(2..=2000);
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive)?;
        for &x in &xs {
            let mut a = Activities::new();
            a.insert("w", &[1], vec![x])?;
            acc.accumulate(&a)?;
        }
        let online = if fault {
            (acc.ssd("w").expect("tracked")[0] / (acc.effective_count() - 1) as f64).sqrt()
        } else {
            acc.std_dev("w").expect("tracked")[0]
        };
        let exact = two_pass_std(&xs);
        worst = worst.max((online - exact).abs() / exact);
    }
    Ok((worst < 1e-9, format!("max relative error {worst:.3e} over 200 sequences")))
}

fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize], classes: usize) -> Result<Batch<f64>> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..shape[0]).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(shape.to_vec(), data)?, labels)
}

/// Draws instances until no ReLU or pooling kink lies within `margin`.
fn smooth_instance(
    rng: &mut ChaCha8Rng,
    model: &ModelSpec,
    batch_shape: &[usize],
    classes: usize,
    margin: f64,
) -> Result<(crate::params::ParamStore<f64>, Batch<f64>)> {
    loop {
        let params = model.init_params(rng.random()).cast::<f64>();
        let batch = random_batch(rng, batch_shape, classes)?;
        let mut graph = Graph::new();
        model.record_logits(&mut graph, &params, &batch.inputs, DropoutMode::Disabled)?;
        if graph.kink_margin().is_none_or(|m| m > margin) {
            return Ok((params, batch));
        }
    }
}

fn gradcheck(fault: bool) -> Outcome {
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cnn = ModelSpec::new(
        vec![1, 4, 4],
        vec![
            Layer::Conv2d {
                name: "conv0".into(),
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
        ],
        vec![HeadSpec::new("task1", 3)],
    )?;
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let (model, shape) = if trial % 2 == 0 {
            (build_mlp(&[3, 5, 4])?, vec![2, 3])
        } else {
            (cnn.clone(), vec![2, 1, 4, 4])
        };
        let classes = model.active_head().outputs;
        let (params, batch) = smooth_instance(&mut rng, &model, &shape, classes, 20.0 * h)?;
        let report = if fault {
            finite_diff_check_with(&params, h, 1e-3, |p| {
                let (loss, mut graph) = model.forward(p, &batch, DropoutMode::Disabled)?;
                let mut g = graph.backward()?;
                let names: Vec<String> = g.iter().map(|(n, _)| n.to_string()).collect();
                for n in names {
                    g.get_mut(&n).expect("listed").data_mut().iter_mut().for_each(|v| *v *= 2.0);
                }
                Ok((loss, g))
            })?
        } else {
            finite_diff_check(&model, &params, &batch, h, 1e-3)?
        };
        worst = worst.max(report.max_rel_error());
    }
    Ok((worst < 1e-3, format!("max relative error {worst:.3e} over 10 instances")))
}

fn hook_identity(fault: bool) -> Outcome {
    let cfg = SyntheticConfig {
        classes_per_task: 2,
        samples_per_class: 10,
        epochs: 2,
        batch_size: 8,
        ..SyntheticConfig::default()
    };
    let tasks = gen_synthetic_tasks_with(SyntheticKind::ClusterSplit, 2, 5, &cfg)?;
    let model = crate::models::build_mlp_multihead(&[2, 8], crate::models::numbered_heads(&[2, 2]))?;
    let train = TrainConfig {
        seed: 5,
        ..TrainConfig::default()
    };
    let plain = run_sequence(&model, &tasks, &Method::None, &train)?;
    let r = if fault { 0.5 } else { 1.0 };
    let variants = [
        Method::Ppap(PpapSettings {
            r,
            ..PpapSettings::default()
        }),
        Method::Si(SiSettings::new(0.0)),
        Method::Ewc(EwcSettings::new(0.0)),
    ];
    let mut mismatched = Vec::new();
    for m in &variants {
        let run = run_sequence(&model, &tasks, m, &train)?;
        if run.params != plain.params || run.metrics.measurements != plain.metrics.measurements {
            mismatched.push(m.name());
        }
    }
    if mismatched.is_empty() {
        Ok((true, "ppap r=1, si c=0, ewc lambda=0 match plain training bit for bit".into()))
    } else {
        Ok((false, format!("trajectories differ for {}", mismatched.join(" "))))
    }
}

fn profile_range(fault: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let mut acc = ActivityAccumulator::new(25.0, SpikeTrigger::Positive)?;
        let len = rng.random_range(2..30);
        for _ in 0..rng.random_range(1..50) {
            let mut a = Activities::new();
            a.insert("w", &[len], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            acc.accumulate(&a)?;
        }
        let profile = acc.finalize("verify")?;
        let scores: Vec<f32> = profile
            .all_scores()
            .map(|s| if fault { s * 0.5 } else { s })
            .collect();
        let lo = scores.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let in_range = scores.iter().all(|s| (0.0..=1.0).contains(s));
        let degenerate = scores.iter().all(|&s| s == 1.0);
        if !in_range || !(degenerate || (lo == 0.0 && hi == 1.0)) {
            return Ok((false, format!("trial {trial}: scores span [{lo}, {hi}]")));
        }
        if decode_profile(&encode_profile(&profile))? != profile {
            return Ok((false, format!("trial {trial}: save/load round trip differs")));
        }
    }
    let mut flat = ActivityAccumulator::new(25.0, SpikeTrigger::Positive)?;
    let mut a = Activities::new();
    a.insert("w", &[3], vec![0.5; 3])?;
    flat.accumulate(&a)?;
    if flat.finalize("flat")?.all_scores().any(|s| s != 1.0) {
        return Ok((false, "degenerate statistics did not give all ones".into()));
    }
    Ok((true, "20 random profiles span [0, 1] exactly and round-trip".into()))
}

fn blend_endpoints(fault: bool) -> Outcome {
    let profile = |p: f32| {
        PlateauProfile::from_entries(
            "blend",
            25.0,
            1,
            [(
                "w".to_string(),
                ProfileEntry {
                    shape: vec![1],
                    scores: vec![p],
                },
            )],
        )
        .map(Arc::new)
    };
    let apply = |r: f32, p: f32, d: f32| -> Result<f32> {
        let mut hook = make_ppap_hook(profile(p)?, BlendConfig::new(r, 1.0)?);
        Ok(hook.modify("w", &Tensor::scalar(d), &Tensor::scalar(0.0)).get(0))
    };
    let one = if fault { 0.999 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..100 {
        let d: f32 = rng.random_range(-1.0..1.0);
        let p: f32 = rng.random_range(0.0..=1.0);
        if apply(one, p, d)?.to_bits() != d.to_bits() {
            return Ok((false, format!("r=1 changed update {d} at score {p}")));
        }
        if apply(0.0, 0.0, d)? != 0.0 {
            return Ok((false, "r=0 with score 0 moved the weight".into()));
        }
        if apply(0.0, 1.0, d)? != d {
            return Ok((false, "r=0 with score 1 changed the update".into()));
        }
    }
    let mid = apply(0.03, 0.2, 1.0)?;
    if (mid - 0.224).abs() > 1e-6 {
        return Ok((false, format!("r=0.03, P=0.2 gave {mid}, expected 0.224")));
    }
    Ok((true, "r=1 is the identity, r=0 scales by the score".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_and_is_deterministic() {
        let a = run_verify(&[]);
        assert!(a.passed(), "{}", a.table());
        assert_eq!(a, run_verify(&[]));
    }

    #[test]
    fn each_fault_is_caught_by_its_suite() {
        for suite in Suite::ALL {
            let report = run_verify(&[suite]);
            assert_eq!(report.failed().collect::<Vec<_>>(), vec![suite], "{}", report.table());
        }
    }
}
