//! Plateau-phase activity profiling.
//!
//! While a task trains, every step contributes a per-weight *activity*
//! `A = Δθ · ∂L/∂θ · f(ΔL)`, where `ΔL` is the change of the mini-batch loss
//! caused by the step and `f(ΔL) = exp(−k·ΔL²)` is close to 1 only while the
//! loss is flat. The accumulator keeps, per weight, the sum of `|A|` and a
//! Welford mean / sum of squared differences; a step whose loss rises by more
//! than `√(1/2k)` scales the history down by `f(ΔL)` because the network has
//! left the plateau.
//!
//! At the end of the task the two statistics are min-max normalised over all
//! weights, multiplied, and normalised again into a [`PlateauProfile`] with
//! scores in `[0, 1]`. High scores mark weights that stayed active on the
//! plateau (flat directions, free to move); low scores mark weights that the
//! next task should leave alone. [`PpapHook`] applies the profile to later
//! optimizer updates as `Δθ · (r + (1 − r)·P)`.

use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::codec::{write_atomic, Reader, Writer};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::DropoutMasks;
use crate::models::{DropoutMode, ModelSpec};
use crate::optim::{UpdateHook, UpdateSet};
use crate::params::{GradientStore, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Which loss changes count as leaving the plateau.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeTrigger {
    /// Only increases: `ΔL > √(1/2k)`.
    #[default]
    Positive,
    /// Increases and decreases: `|ΔL| > √(1/2k)`.
    Absolute,
}

/// Standard deviation of the Gaussian weighting, `√(1/2k)`.
pub fn spike_threshold(k: f64) -> f64 {
    (1.0 / (2.0 * k)).sqrt()
}

/// `f(ΔL) = exp(−k·ΔL²)`.
pub fn gaussian_scale(delta_loss: f64, k: f64) -> Result<f64> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::config(format!("Gaussian width k must be positive, got {k}")));
    }
    Ok((-k * delta_loss * delta_loss).exp())
}

#[inline]
pub fn activity(update: f64, grad: f64, scale: f64) -> f64 {
    update * grad * scale
}

/// `L(θ_after; B) − loss_before`, re-running `batch` with the step's dropout
/// masks so only the parameter change is measured.
pub fn loss_delta<T: Scalar>(
    model: &ModelSpec,
    params_after: &ParamStore<T>,
    batch: &Batch<T>,
    loss_before: f64,
    masks: &DropoutMasks<T>,
) -> Result<f64> {
    let mode = if masks.is_empty() {
        DropoutMode::Disabled
    } else {
        DropoutMode::Reuse(masks)
    };
    let after = model.loss(params_after, batch, mode)?;
    Ok(after - loss_before)
}

/// One step's activity values, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Activities {
    values: IndexMap<String, Vec<f64>>,
    shapes: IndexMap<String, Vec<usize>>,
}

impl Activities {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(format!("activity of `{name}`"), shape, &[values.len()]));
        }
        self.shapes.insert(name.clone(), shape.to_vec());
        self.values.insert(name, values);
        Ok(())
    }

    /// `A = Δθ · g · f` for every parameter in `updates`.
    pub fn from_step(updates: &UpdateSet, grads: &GradientStore, scale: f64) -> Result<Self> {
        let mut out = Self::new();
        for (name, delta) in updates.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            let values = delta
                .data()
                .iter()
                .zip(g.data())
                .map(|(&d, &gi)| activity(d as f64, gi as f64, scale))
                .collect();
            out.insert(name, delta.shape(), values)?;
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct WeightStats {
    shape: Vec<usize>,
    sum_abs: Vec<f64>,
    mean: Vec<f64>,
    ssd: Vec<f64>,
}

/// What happened during one [`ActivityAccumulator::observe`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub delta_loss: f64,
    pub scale: f64,
    /// Reduction factor applied before accumulating, if the step spiked.
    pub reduction: Option<f64>,
}

/// Running per-weight plateau statistics for one task.
///
/// The effective count `N` used for the standard deviation is shared by all
/// weights because every reduction scales all of them alike. The running mean
/// divides by the raw step count and is not touched by reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityAccumulator {
    k: f64,
    trigger: SpikeTrigger,
    stats: IndexMap<String, WeightStats>,
    effective_count: u64,
    steps: u64,
    reductions: u64,
    finalized: bool,
}

impl ActivityAccumulator {
    pub fn new(k: f64, trigger: SpikeTrigger) -> Result<Self> {
        gaussian_scale(0.0, k)?;
        Ok(Self {
            k,
            trigger,
            stats: IndexMap::new(),
            effective_count: 0,
            steps: 0,
            reductions: 0,
            finalized: false,
        })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn threshold(&self) -> f64 {
        spike_threshold(self.k)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `N` after reductions.
    pub fn effective_count(&self) -> u64 {
        self.effective_count
    }

    pub fn reductions(&self) -> u64 {
        self.reductions
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn sum_abs(&self, name: &str) -> Option<&[f64]> {
        self.stats.get(name).map(|s| s.sum_abs.as_slice())
    }

    pub fn mean(&self, name: &str) -> Option<&[f64]> {
        self.stats.get(name).map(|s| s.mean.as_slice())
    }

    pub fn ssd(&self, name: &str) -> Option<&[f64]> {
        self.stats.get(name).map(|s| s.ssd.as_slice())
    }

    /// Population standard deviation `√(SSD/N)`; zero before any step.
    pub fn std_dev(&self, name: &str) -> Option<Vec<f64>> {
        let n = self.effective_count.max(1) as f64;
        self.stats
            .get(name)
            .map(|s| s.ssd.iter().map(|v| (v / n).sqrt()).collect())
    }

    fn ensure_open(&self) -> Result<()> {
        if self.finalized {
            return Err(Error::state("accumulator already finalized"));
        }
        Ok(())
    }

    /// Scales the history by `f(ΔL)` when the step left the plateau:
    /// `S ← S·f`, `N ← ⌈N·f⌉`, `SSD ← SSD·f²`. Returns the factor if applied.
    pub fn reduce_on_spike(&mut self, delta_loss: f64) -> Result<Option<f64>> {
        self.ensure_open()?;
        let fired = match self.trigger {
            SpikeTrigger::Positive => delta_loss > self.threshold(),
            SpikeTrigger::Absolute => delta_loss.abs() > self.threshold(),
        };
        if !fired {
            return Ok(None);
        }
        let f = gaussian_scale(delta_loss, self.k)?;
        for s in self.stats.values_mut() {
            s.sum_abs.iter_mut().for_each(|v| *v *= f);
            s.ssd.iter_mut().for_each(|v| *v *= f * f);
        }
        self.effective_count = (self.effective_count as f64 * f).ceil() as u64;
        self.reductions += 1;
        Ok(Some(f))
    }

    /// Adds one step of activities. The first call fixes the set of tracked
    /// parameters; later calls must supply exactly the same set.
    pub fn accumulate(&mut self, activities: &Activities) -> Result<()> {
        self.ensure_open()?;
        if self.steps == 0 && self.stats.is_empty() {
            for (name, values) in &activities.values {
                self.stats.insert(
                    name.clone(),
                    WeightStats {
                        shape: activities.shapes[name].clone(),
                        sum_abs: vec![0.0; values.len()],
                        mean: vec![0.0; values.len()],
                        ssd: vec![0.0; values.len()],
                    },
                );
            }
        }
        if activities.values.len() != self.stats.len() {
            return Err(Error::state(format!(
                "step supplies {} parameters, accumulator tracks {}",
                activities.values.len(),
                self.stats.len()
            )));
        }
        for (name, s) in &self.stats {
            match activities.values.get(name) {
                Some(v) if v.len() == s.sum_abs.len() => {}
                Some(v) => return Err(Error::shape(name.as_str(), &[s.sum_abs.len()], &[v.len()])),
                None => return Err(Error::state(format!("step is missing parameter `{name}`"))),
            }
        }
        let denom = (self.steps + 1) as f64;
        for (name, s) in self.stats.iter_mut() {
            let values = &activities.values[name];
            for (i, &a) in values.iter().enumerate() {
                s.sum_abs[i] += a.abs();
                let prev = s.mean[i];
                let mean = prev + (a - prev) / denom;
                s.mean[i] = mean;
                s.ssd[i] += (a - prev) * (a - mean);
            }
        }
        self.steps += 1;
        self.effective_count += 1;
        Ok(())
    }

    /// One full profiling step given the loss change it caused, in the order
    /// scale → reduce → accumulate.
    pub fn observe(
        &mut self,
        delta_loss: f64,
        applied: &UpdateSet,
        grads: &GradientStore,
    ) -> Result<StepReport> {
        self.ensure_open()?;
        if !delta_loss.is_finite() {
            return Err(Error::Numeric {
                layer: "loss delta".to_string(),
            });
        }
        let scale = gaussian_scale(delta_loss, self.k)?;
        let reduction = self.reduce_on_spike(delta_loss)?;
        self.accumulate(&Activities::from_step(applied, grads, scale)?)?;
        Ok(StepReport {
            delta_loss,
            scale,
            reduction,
        })
    }

    /// Turns the statistics into a profile. The accumulator is read-only
    /// afterwards.
    pub fn finalize(&mut self, task_id: &str) -> Result<PlateauProfile> {
        self.ensure_open()?;
        if self.steps == 0 {
            return Err(Error::state("cannot finalize a profile with zero steps"));
        }
        let n = self.effective_count.max(1) as f64;
        let sums: Vec<f64> = self.stats.values().flat_map(|s| s.sum_abs.iter().copied()).collect();
        let stds: Vec<f64> = self
            .stats
            .values()
            .flat_map(|s| s.ssd.iter().map(|v| (v / n).sqrt()))
            .collect();
        let merged: Vec<f64> = min_max(&sums)
            .iter()
            .zip(min_max(&stds))
            .map(|(a, b)| a * b)
            .collect();
        let scores = min_max(&merged);

        let mut entries = IndexMap::new();
        let mut offset = 0;
        for (name, s) in &self.stats {
            let len = s.sum_abs.len();
            entries.insert(
                name.clone(),
                ProfileEntry {
                    shape: s.shape.clone(),
                    scores: scores[offset..offset + len].iter().map(|&v| v as f32).collect(),
                },
            );
            offset += len;
        }
        self.finalized = true;
        Ok(PlateauProfile {
            task_id: task_id.to_string(),
            k: self.k,
            steps: self.steps,
            entries,
        })
    }
}

/// Min-max normalisation to `[0, 1]`; a constant input maps to all ones.
fn min_max(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    let range = hi - lo;
    values.iter().map(|&v| (v - lo) / range).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub shape: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Finalised per-weight flexibility scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauProfile {
    task_id: String,
    k: f64,
    steps: u64,
    entries: IndexMap<String, ProfileEntry>,
}

impl PlateauProfile {
    /// Builds a profile from explicit scores, which must lie in `[0, 1]`.
    pub fn from_entries(
        task_id: impl Into<String>,
        k: f64,
        steps: u64,
        entries: impl IntoIterator<Item = (String, ProfileEntry)>,
    ) -> Result<Self> {
        let entries: IndexMap<String, ProfileEntry> = entries.into_iter().collect();
        for (name, e) in &entries {
            if e.shape.iter().product::<usize>() != e.scores.len() {
                return Err(Error::shape(name.as_str(), &e.shape, &[e.scores.len()]));
            }
            if e.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::config(format!("score of `{name}` outside [0, 1]")));
            }
        }
        Ok(Self {
            task_id: task_id.into(),
            k,
            steps,
            entries,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn scores(&self, name: &str) -> Option<&[f32]> {
        self.entries.get(name).map(|e| e.scores.as_slice())
    }

    pub fn entry(&self, name: &str) -> Option<&ProfileEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ProfileEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_scores(&self) -> impl Iterator<Item = f32> + '_ {
        self.entries.values().flat_map(|e| e.scores.iter().copied())
    }
}

/// How profiles from several earlier tasks are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombineRule {
    Latest,
    #[default]
    Min,
    Product,
}

/// Elementwise merge over the union of parameter names; a profile that lacks
/// a parameter contributes `default_score` for it.
pub fn combine_profiles(
    profiles: &[PlateauProfile],
    rule: CombineRule,
    default_score: f32,
) -> Result<PlateauProfile> {
    let last = profiles
        .last()
        .ok_or_else(|| Error::config("cannot combine an empty list of profiles"))?;
    if rule == CombineRule::Latest || profiles.len() == 1 {
        return Ok(last.clone());
    }
    let mut entries: IndexMap<String, ProfileEntry> = IndexMap::new();
    for (i, p) in profiles.iter().enumerate() {
        for (name, e) in &p.entries {
            let slot = entries.entry(name.clone()).or_insert_with(|| ProfileEntry {
                shape: e.shape.clone(),
                // Profiles before this one did not have the parameter.
                scores: vec![
                    match rule {
                        CombineRule::Product => default_score.powi(i as i32),
                        _ => default_score,
                    };
                    e.scores.len()
                ],
            });
            if slot.shape != e.shape {
                return Err(Error::shape(name.as_str(), &slot.shape, &e.shape));
            }
            for (acc, &s) in slot.scores.iter_mut().zip(&e.scores) {
                *acc = match rule {
                    CombineRule::Min => acc.min(s),
                    CombineRule::Product => *acc * s,
                    CombineRule::Latest => unreachable!("handled above"),
                };
            }
        }
        for (name, slot) in entries.iter_mut() {
            if !p.entries.contains_key(name) {
                for acc in slot.scores.iter_mut() {
                    *acc = match rule {
                        CombineRule::Min => acc.min(default_score),
                        _ => *acc * default_score,
                    };
                }
            }
        }
    }
    PlateauProfile::from_entries(
        profiles.iter().map(|p| p.task_id.as_str()).collect::<Vec<_>>().join("+"),
        last.k,
        profiles.iter().map(|p| p.steps).sum(),
        entries,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    /// Fraction of the raw update applied unmodulated.
    pub r: f32,
    /// Score assumed for parameters the profile does not cover.
    pub default_score: f32,
}

impl BlendConfig {
    pub fn new(r: f32, default_score: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config(format!("blend fraction r={r} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&default_score) {
            return Err(Error::config(format!("default score {default_score} outside [0, 1]")));
        }
        Ok(Self { r, default_score })
    }
}

/// Update hook computing `r·Δθ + (1−r)·Δθ⊙P`.
#[derive(Debug, Clone)]
pub struct PpapHook {
    profile: Arc<PlateauProfile>,
    blend: BlendConfig,
}

pub fn make_ppap_hook(profile: Arc<PlateauProfile>, blend: BlendConfig) -> PpapHook {
    PpapHook { profile, blend }
}

impl PpapHook {
    pub fn blend(&self) -> &BlendConfig {
        &self.blend
    }
}

impl UpdateHook for PpapHook {
    fn modify(&mut self, name: &str, update: &Tensor, _grad: &Tensor) -> Tensor {
        let r = self.blend.r;
        // Written as Δθ·(r + (1−r)·P) so that r = 1 reproduces Δθ bit for bit.
        let factor = |p: f32| r + (1.0 - r) * p;
        match self.profile.scores(name) {
            Some(scores) if scores.len() == update.len() => {
                let data = update
                    .data()
                    .iter()
                    .zip(scores)
                    .map(|(&d, &p)| d * factor(p))
                    .collect();
                Tensor::new(update.shape().to_vec(), data).expect("same length as update")
            }
            _ => {
                let f = factor(self.blend.default_score);
                update.map(|d| d * f)
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"PPAP";
const VERSION: u16 = 1;

/// Binary profile layout (little-endian): `"PPAP"`, u16 version, f64 k,
/// task id (u32 length + UTF-8), u64 step count, u32 entry count, then per
/// entry the name (u32 length + UTF-8), u32 rank, u64 dims and f32 scores,
/// and finally the CRC32 of everything before it.
pub fn encode_profile(profile: &PlateauProfile) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.f64(profile.k);
    w.str(&profile.task_id);
    w.u64(profile.steps);
    w.u32(profile.entries.len() as u32);
    for (name, e) in &profile.entries {
        w.str(name);
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u64(d as u64);
        }
        for &s in &e.scores {
            w.f32(s);
        }
    }
    w.finish()
}

pub fn decode_profile(bytes: &[u8]) -> Result<PlateauProfile> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let k = r.f64()?;
    let task_id = r.str()?;
    let steps = r.u64()?;
    let count = r.u32()?;
    let mut entries = IndexMap::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.str()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let scores = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if entries
            .insert(name.clone(), ProfileEntry { shape, scores })
            .is_some()
        {
            return Err(Error::format(at, format!("duplicate entry `{name}`")));
        }
    }
    r.finish()?;
    PlateauProfile::from_entries(task_id, k, steps, entries)
        .map_err(|e| Error::format(0, e.to_string()))
}

pub fn save_profile(profile: &PlateauProfile, path: &Path) -> Result<()> {
    write_atomic(path, &encode_profile(profile))
}

pub fn load_profile(path: &Path) -> Result<PlateauProfile> {
    decode_profile(&std::fs::read(path)?)
}
