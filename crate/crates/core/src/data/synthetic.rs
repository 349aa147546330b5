//! Low-dimensional task generators used in place of image benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{make_task_splits, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::harness::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Each task gets its own disjoint set of Gaussian clusters in the plane.
    ClusterSplit,
    /// Two interleaved half-moons, rotated further for every task.
    MoonsRotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub cluster_std: f32,
    /// Cluster centres are drawn from `[-spread, spread]²`.
    pub spread: f32,
    /// Rotation between consecutive moons tasks, in degrees.
    pub rotation_deg: f32,
    pub moons_noise: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes_per_task: 6,
            samples_per_class: 80,
            cluster_std: 0.4,
            spread: 3.0,
            rotation_deg: 90.0,
            moons_noise: 0.1,
            epochs: 200,
            batch_size: 32,
        }
    }
}

pub fn gen_synthetic_tasks(kind: SyntheticKind, n_tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    gen_synthetic_tasks_with(kind, n_tasks, seed, &SyntheticConfig::default())
}

pub fn gen_synthetic_tasks_with(
    kind: SyntheticKind,
    n_tasks: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<Vec<TaskSpec>> {
    if n_tasks == 0 {
        return Err(Error::config("need at least one task"));
    }
    if cfg.samples_per_class < 2 || cfg.classes_per_task == 0 {
        return Err(Error::config("synthetic tasks need samples and classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let datasets: Vec<Dataset> = match kind {
        SyntheticKind::ClusterSplit => {
            let total = n_tasks * cfg.classes_per_task;
            let centers = spaced_centers(&mut rng, total, cfg.spread, 4.0 * cfg.cluster_std)?;
            centers
                .chunks(cfg.classes_per_task)
                .map(|task_centers| clusters(&mut rng, task_centers, cfg))
                .collect::<Result<_>>()?
        }
        SyntheticKind::MoonsRotation => (0..n_tasks)
            .map(|t| moons(&mut rng, cfg, (cfg.rotation_deg * t as f32).to_radians()))
            .collect::<Result<_>>()?,
    };
    datasets
        .into_iter()
        .enumerate()
        .map(|(t, ds)| {
            let plan = SplitPlan::train_val(seed.wrapping_add(t as u64));
            let mut parts = make_task_splits(&ds, &plan)?.into_iter();
            Ok(TaskSpec {
                id: format!("task{}", t + 1),
                head: format!("task{}", t + 1),
                train: parts.next().expect("two parts"),
                val: parts.next().expect("two parts"),
                test: None,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
            })
        })
        .collect()
}

fn spaced_centers(
    rng: &mut ChaCha8Rng,
    count: usize,
    spread: f32,
    min_gap: f32,
) -> Result<Vec<[f32; 2]>> {
    let mut out: Vec<[f32; 2]> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(format!(
                "cannot place {count} clusters {min_gap} apart within ±{spread}"
            )));
        }
        let c = [
            rng.random_range(-spread..=spread),
            rng.random_range(-spread..=spread),
        ];
        if out
            .iter()
            .all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= min_gap)
        {
            out.push(c);
        }
    }
    Ok(out)
}

fn clusters(rng: &mut ChaCha8Rng, centers: &[[f32; 2]], cfg: &SyntheticConfig) -> Result<Dataset> {
    let noise = Normal::new(0.0f32, cfg.cluster_std).map_err(|e| Error::config(e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            features.push(c[0] + noise.sample(rng));
            features.push(c[1] + noise.sample(rng));
            labels.push(class);
        }
    }
    Dataset::new(vec![2], features, labels, centers.len())
}

fn moons(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, angle: f32) -> Result<Dataset> {
    let noise = Normal::new(0.0f32, cfg.moons_noise).map_err(|e| Error::config(e.to_string()))?;
    let (s, c) = angle.sin_cos();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        for _ in 0..cfg.samples_per_class {
            let t = rng.random_range(0.0..std::f32::consts::PI);
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (x, y) = (x - 0.5 + noise.sample(rng), y - 0.25 + noise.sample(rng));
            features.push(c * x - s * y);
            features.push(s * x + c * y);
            labels.push(class);
        }
    }
    Dataset::new(vec![2], features, labels, 2)
}

/// Gaussian mixture with a two-level label hierarchy, shaped like CIFAR-100's
/// superclass/fine-class structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperclassConfig {
    pub superclasses: usize,
    pub fine_per_superclass: usize,
    pub samples_per_fine: usize,
    pub dim: usize,
    /// Standard deviation of superclass centres around the origin.
    pub superclass_spread: f32,
    /// Standard deviation of fine-class centres around their superclass centre.
    pub fine_spread: f32,
    pub noise: f32,
}

impl Default for SuperclassConfig {
    fn default() -> Self {
        Self {
            superclasses: 20,
            fine_per_superclass: 5,
            samples_per_fine: 500,
            dim: 16,
            superclass_spread: 0.6,
            fine_spread: 1.0,
            noise: 0.6,
        }
    }
}

/// Samples labelled with their fine class; coarse labels hold the superclass.
pub fn gen_synthetic_superclasses(cfg: &SuperclassConfig, seed: u64) -> Result<Dataset> {
    if cfg.superclasses == 0 || cfg.fine_per_superclass == 0 || cfg.dim == 0 {
        return Err(Error::config("superclass mixture needs non-zero sizes"));
    }
    let normal = |s: f32| Normal::new(0.0f32, s).map_err(|e| Error::config(e.to_string()));
    let (sup, fine, noise) = (
        normal(cfg.superclass_spread)?,
        normal(cfg.fine_spread)?,
        normal(cfg.noise)?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut coarse = Vec::new();
    for s in 0..cfg.superclasses {
        let centre: Vec<f32> = (0..cfg.dim).map(|_| sup.sample(&mut rng)).collect();
        for f in 0..cfg.fine_per_superclass {
            let fc: Vec<f32> = centre.iter().map(|c| c + fine.sample(&mut rng)).collect();
            for _ in 0..cfg.samples_per_fine {
                features.extend(fc.iter().map(|c| c + noise.sample(&mut rng)));
                labels.push(s * cfg.fine_per_superclass + f);
                coarse.push(s);
            }
        }
    }
    Dataset::new(
        vec![cfg.dim],
        features,
        labels,
        cfg.superclasses * cfg.fine_per_superclass,
    )?
    .with_coarse_labels(coarse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_split_tasks_are_deterministic() {
        let a = gen_synthetic_tasks(SyntheticKind::ClusterSplit, 2, 11).unwrap();
        let b = gen_synthetic_tasks(SyntheticKind::ClusterSplit, 2, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].train.num_classes(), 6);
        assert_eq!(a[0].train.len() + a[0].val.len(), 480);
        assert_ne!(a[0].train.features(), a[1].train.features());
    }

    #[test]
    fn unrotated_moons_share_a_distribution() {
        let cfg = SyntheticConfig {
            rotation_deg: 0.0,
            samples_per_class: 2000,
            ..SyntheticConfig::default()
        };
        let t = gen_synthetic_tasks_with(SyntheticKind::MoonsRotation, 2, 3, &cfg).unwrap();
        let mean = |d: &Dataset, axis: usize| -> f32 {
            d.features().iter().skip(axis).step_by(2).sum::<f32>() / d.len() as f32
        };
        for axis in 0..2 {
            assert!((mean(&t[0].train, axis) - mean(&t[1].train, axis)).abs() < 0.05);
        }
    }

    #[test]
    fn zero_tasks_rejected() {
        assert!(gen_synthetic_tasks(SyntheticKind::ClusterSplit, 0, 0).is_err());
    }

    #[test]
    fn superclass_mixture_shape() {
        let cfg = SuperclassConfig::default();
        let ds = gen_synthetic_superclasses(&cfg, 1).unwrap();
        assert_eq!(ds.len(), 20 * 5 * 500);
        assert_eq!(ds.coarse_labels().unwrap().iter().max(), Some(&19));
        assert_eq!(ds.num_classes(), 100);
    }
}
