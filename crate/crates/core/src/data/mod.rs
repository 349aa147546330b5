//! Datasets, batches, splits and task construction.

mod augment;
mod cifar;
mod store;
mod synthetic;

pub use augment::{augment, crop_images, hflip_images, AugmentSpec};
pub use cifar::{
    denormalize_pixel, load_cifar, load_cifar_files, normalize_pixel, parse_cifar, CifarVariant,
    Normalization,
};
pub use store::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use synthetic::{
    gen_synthetic_superclasses, gen_synthetic_tasks, gen_synthetic_tasks_with, SuperclassConfig,
    SyntheticConfig, SyntheticKind,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::TaskSpec;
use crate::tensor::{Scalar, Tensor};

/// A mini-batch: `[n, ...sample_shape]` inputs and one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::shape(
                "batch labels",
                &[labels.len()],
                &inputs.shape()[..1.min(inputs.shape().len())],
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// An immutable labelled sample collection stored as one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
    coarse_labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        features: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_len == 0 {
            return Err(Error::config("samples must have a non-empty shape"));
        }
        if features.len() != sample_len * labels.len() {
            return Err(Error::shape(
                "dataset features",
                &[labels.len() * sample_len],
                &[features.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
            coarse_labels: None,
            num_classes,
        })
    }

    /// Attaches a second, coarser labelling (CIFAR-100 superclasses).
    pub fn with_coarse_labels(mut self, coarse: Vec<usize>) -> Result<Self> {
        if coarse.len() != self.labels.len() {
            return Err(Error::shape("coarse labels", &[self.labels.len()], &[coarse.len()]));
        }
        self.coarse_labels = Some(coarse);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.features[i * l..(i + 1) * l]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn coarse_labels(&self) -> Option<&[usize]> {
        self.coarse_labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let l = self.sample_len();
        let mut features = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coarse_labels: self
                .coarse_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// Replaces the primary labels, e.g. after remapping to a task's label space.
    pub fn relabeled(&self, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        let ds = Dataset::new(
            self.sample_shape.clone(),
            self.features.clone(),
            labels,
            num_classes,
        )?;
        Ok(Dataset {
            coarse_labels: self.coarse_labels.clone(),
            ..ds
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let l = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Batch {
            inputs: Tensor::new(shape, data).expect("sizes derive from the dataset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.sample_shape != other.sample_shape {
            return Err(Error::shape("concat", &self.sample_shape, &other.sample_shape));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let coarse = match (&self.coarse_labels, &other.coarse_labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels,
            coarse_labels: coarse,
            num_classes: self.num_classes.max(other.num_classes),
        })
    }
}

/// How to cut a dataset into train/validation[/test] parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub stratified: bool,
}

impl SplitPlan {
    pub fn train_val(seed: u64) -> Self {
        Self {
            seed,
            fractions: vec![0.8, 0.2],
            stratified: true,
        }
    }

    pub fn train_val_test(seed: u64) -> Self {
        Self {
            seed,
            fractions: vec![0.8, 0.16, 0.04],
            stratified: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.fractions.len() < 2 || self.fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::config(format!(
                "split fractions must be at least two values in (0,1), got {:?}",
                self.fractions
            )));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Splits `dataset` into disjoint parts, one per fraction.
///
/// Part sizes are the differences of the rounded cumulative fractions, so
/// they add up to the dataset size. With stratification every class
/// contributes either the floor or the ceiling of its proportional share to
/// each part.
pub fn make_task_splits(dataset: &Dataset, plan: &SplitPlan) -> Result<Vec<Dataset>> {
    plan.validate()?;
    let parts = plan.fractions.len();
    let groups: Vec<Vec<usize>> = if plan.stratified {
        let mut g = vec![Vec::new(); dataset.num_classes()];
        for (i, &l) in dataset.labels().iter().enumerate() {
            g[l].push(i);
        }
        g.retain(|v| !v.is_empty());
        g
    } else {
        vec![(0..dataset.len()).collect()]
    };
    if let Some(small) = groups.iter().find(|g| g.len() < parts) {
        return Err(Error::config(format!(
            "a class has {} samples, fewer than the {parts} requested parts",
            small.len()
        )));
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let counts = apportion(&sizes, &plan.fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut members = vec![Vec::new(); parts];
    for (mut group, row) in groups.into_iter().zip(&counts) {
        group.shuffle(&mut rng);
        let mut rest = group.as_slice();
        for (part, &n) in members.iter_mut().zip(row) {
            let (take, tail) = rest.split_at(n);
            part.extend_from_slice(take);
            rest = tail;
        }
    }
    Ok(members
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            dataset.subset(&idx)
        })
        .collect())
}

/// Integer `[group][part]` counts with exact group totals, part totals equal
/// to the rounded cumulative fractions of the grand total, and every cell
/// the floor or ceiling of `fraction · group size`. The rounding is found as
/// a unit-capacity flow from groups to parts.
fn apportion(sizes: &[usize], fractions: &[f64]) -> Result<Vec<Vec<usize>>> {
    const EPS: f64 = 1e-9;
    let total: usize = sizes.iter().sum();
    let parts = fractions.len();
    let mut targets = Vec::with_capacity(parts);
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let upto = if k + 1 == parts {
            total
        } else {
            ((cum * total as f64).round() as usize).min(total)
        };
        targets.push(upto - prev);
        prev = upto;
    }
    let mut counts = vec![vec![0usize; parts]; sizes.len()];
    let mut open = vec![vec![false; parts]; sizes.len()];
    let mut row_need = vec![0usize; sizes.len()];
    let mut col_room: Vec<isize> = targets.iter().map(|&t| t as isize).collect();
    for (c, &n) in sizes.iter().enumerate() {
        for (k, f) in fractions.iter().enumerate() {
            let x = f * n as f64;
            let fl = (x + EPS).floor();
            counts[c][k] = fl as usize;
            open[c][k] = x - fl > EPS;
            col_room[k] -= fl as isize;
        }
        row_need[c] = n - counts[c].iter().sum::<usize>();
    }
    if col_room.iter().any(|&r| r < 0) {
        return Err(Error::config("split fractions cannot be apportioned"));
    }
    let mut flow = vec![vec![false; parts]; sizes.len()];
    for c in 0..sizes.len() {
        for _ in 0..row_need[c] {
            if !augment_unit(c, &open, &mut flow, &mut col_room) {
                return Err(Error::config("split fractions cannot be apportioned"));
            }
        }
    }
    for (c, row) in flow.iter().enumerate() {
        for (k, &f) in row.iter().enumerate() {
            counts[c][k] += f as usize;
        }
    }
    Ok(counts)
}

/// Breadth-first augmenting path from group `start` to any part with room.
/// A full part is passed through by moving another group's unit out of it.
fn augment_unit(start: usize, open: &[Vec<bool>], flow: &mut [Vec<bool>], room: &mut [isize]) -> bool {
    let (groups, parts) = (open.len(), room.len());
    let mut group_via: Vec<Option<usize>> = vec![None; groups];
    let mut part_via: Vec<Option<usize>> = vec![None; parts];
    let mut seen = vec![false; groups];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        for k in 0..parts {
            if !open[c][k] || flow[c][k] || part_via[k].is_some() {
                continue;
            }
            part_via[k] = Some(c);
            if room[k] > 0 {
                room[k] -= 1;
                let mut part = k;
                loop {
                    let g = part_via[part].expect("reached through a group");
                    flow[g][part] = true;
                    match group_via[g] {
                        None => return true,
                        Some(from) => {
                            flow[g][from] = false;
                            part = from;
                        }
                    }
                }
            }
            for g in 0..groups {
                if flow[g][k] && !seen[g] {
                    seen[g] = true;
                    group_via[g] = Some(k);
                    queue.push_back(g);
                }
            }
        }
    }
    false
}

/// Builds the leave-one-superclass-out task pair.
///
/// The pretraining task covers every superclass except `held_out`, labelled by
/// superclass (remapped to a contiguous range); the finetuning task covers the
/// fine classes of `held_out`, remapped to `0..m`.
pub fn make_loco_tasks(
    dataset: &Dataset,
    held_out: usize,
    plan: &SplitPlan,
) -> Result<(TaskSpec, TaskSpec)> {
    let coarse = dataset
        .coarse_labels()
        .ok_or_else(|| Error::config("leave-one-out tasks need coarse labels"))?;
    let superclasses = coarse.iter().max().map_or(0, |m| m + 1);
    if held_out >= superclasses {
        return Err(Error::config(format!(
            "held-out superclass {held_out} outside 0..{superclasses}"
        )));
    }
    let (pre_idx, fine_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| coarse[i] != held_out);

    let pre = dataset.subset(&pre_idx);
    let pre_labels = pre
        .coarse_labels()
        .expect("subset keeps coarse labels")
        .iter()
        .map(|&c| if c > held_out { c - 1 } else { c })
        .collect();
    let pre = pre.relabeled(pre_labels, superclasses - 1)?;

    let fine = dataset.subset(&fine_idx);
    let mut fine_classes: Vec<usize> = fine.labels().to_vec();
    fine_classes.sort_unstable();
    fine_classes.dedup();
    let fine_labels = fine
        .labels()
        .iter()
        .map(|l| fine_classes.binary_search(l).expect("collected above"))
        .collect();
    let fine = fine.relabeled(fine_labels, fine_classes.len())?;

    let task = |id: &str, head: &str, ds: &Dataset| -> Result<TaskSpec> {
        let mut parts = make_task_splits(ds, plan)?.into_iter();
        let train = parts.next().expect("at least two parts");
        let val = parts.next().expect("at least two parts");
        Ok(TaskSpec {
            id: id.to_string(),
            head: head.to_string(),
            train,
            val,
            test: parts.next(),
            epochs: 1,
            batch_size: 32,
        })
    };
    Ok((
        task(&format!("pretrain-{held_out}"), "pretrain", &pre)?,
        task(&format!("finetune-{held_out}"), "finetune", &fine)?,
    ))
}

/// CIFAR-10 as task 1, then `extra_tasks` tasks of 10 consecutive CIFAR-100
/// fine classes each. Every task is split 80/20 and gets its own head.
pub fn make_cifar_sequence(
    cifar10: &Dataset,
    cifar100: &Dataset,
    extra_tasks: usize,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if extra_tasks * 10 > cifar100.num_classes() {
        return Err(Error::config(format!(
            "{extra_tasks} tasks of 10 classes exceed CIFAR-100's {} classes",
            cifar100.num_classes()
        )));
    }
    let mut sets = vec![cifar10.clone()];
    for t in 0..extra_tasks {
        let lo = t * 10;
        let idx: Vec<usize> = (0..cifar100.len())
            .filter(|&i| (lo..lo + 10).contains(&cifar100.labels()[i]))
            .collect();
        let part = cifar100.subset(&idx);
        let labels = part.labels().iter().map(|l| l - lo).collect();
        sets.push(part.relabeled(labels, 10)?);
    }
    sets.iter()
        .enumerate()
        .map(|(t, ds)| {
            let plan = SplitPlan::train_val(seed.wrapping_add(t as u64));
            let mut parts = make_task_splits(ds, &plan)?.into_iter();
            Ok(TaskSpec {
                id: format!("task{}", t + 1),
                head: format!("task{}", t + 1),
                train: parts.next().expect("two parts"),
                val: parts.next().expect("two parts"),
                test: None,
                epochs,
                batch_size,
            })
        })
        .collect()
}
