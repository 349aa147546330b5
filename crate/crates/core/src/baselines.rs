//! Regularisation baselines: Synaptic Intelligence and Elastic Weight
//! Consolidation. Both produce an [`ImportanceMap`] at the end of a task and
//! add a quadratic anchor penalty's gradient during later tasks.

use indexmap::IndexMap;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::{DropoutMode, ModelSpec};
use crate::optim::UpdateSet;
use crate::params::{GradientStore, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_SI_DAMPING: f64 = 0.001;
pub const DEFAULT_FISHER_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceKind {
    Si,
    Ewc,
}

#[derive(Debug, Clone, PartialEq)]
struct Anchored {
    importance: Vec<f64>,
    anchor: Vec<f32>,
}

/// Per-parameter importance together with the values it anchors to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    kind: ImportanceKind,
    strength: f64,
    damping: Option<f64>,
    entries: IndexMap<String, Anchored>,
}

impl ImportanceMap {
    fn new(kind: ImportanceKind, damping: Option<f64>) -> Self {
        Self {
            kind,
            strength: 0.0,
            damping,
            entries: IndexMap::new(),
        }
    }

    /// Importance and anchors for explicit values.
    pub fn from_values(
        kind: ImportanceKind,
        entries: impl IntoIterator<Item = (String, Vec<f64>, Vec<f32>)>,
    ) -> Result<Self> {
        let mut map = Self::new(kind, None);
        for (name, importance, anchor) in entries {
            map.insert(name, importance, anchor)?;
        }
        Ok(map)
    }

    fn insert(&mut self, name: String, importance: Vec<f64>, anchor: Vec<f32>) -> Result<()> {
        if importance.len() != anchor.len() {
            return Err(Error::shape(name, &[anchor.len()], &[importance.len()]));
        }
        if importance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config(format!("negative importance for `{name}`")));
        }
        self.entries.insert(name, Anchored { importance, anchor });
        Ok(())
    }

    pub fn kind(&self) -> ImportanceKind {
        self.kind
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn damping(&self) -> Option<f64> {
        self.damping
    }

    pub fn with_strength(mut self, strength: f64) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::config(format!("penalty strength must be >= 0, got {strength}")));
        }
        self.strength = strength;
        Ok(self)
    }

    pub fn importance(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.importance.as_slice())
    }

    pub fn anchor(&self, name: &str) -> Option<&[f32]> {
        self.entries.get(name).map(|e| e.anchor.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sums importance with a later task's map and moves anchors to the
    /// later map's values.
    pub fn merge(&mut self, later: &ImportanceMap) -> Result<()> {
        if later.kind != self.kind {
            return Err(Error::config("cannot merge SI and EWC importance"));
        }
        for (name, e) in &later.entries {
            match self.entries.get_mut(name) {
                Some(own) => {
                    if own.importance.len() != e.importance.len() {
                        return Err(Error::shape(name.as_str(), &[own.importance.len()], &[e.importance.len()]));
                    }
                    own.importance
                        .iter_mut()
                        .zip(&e.importance)
                        .for_each(|(a, b)| *a += b);
                    own.anchor.clone_from(&e.anchor);
                }
                None => {
                    self.entries.insert(name.clone(), e.clone());
                }
            }
        }
        self.strength = later.strength;
        Ok(())
    }

    /// `c·ΣΩ(θ−θ*)²` for SI, `(λ/2)·ΣF(θ−θ*)²` for EWC.
    pub fn penalty(&self, params: &ParamStore) -> f64 {
        let scale = match self.kind {
            ImportanceKind::Si => self.strength,
            ImportanceKind::Ewc => 0.5 * self.strength,
        };
        let mut total = 0.0;
        for (name, e) in &self.entries {
            if let Some(value) = params.get(name) {
                for ((&w, &a), &imp) in value.data().iter().zip(&e.anchor).zip(&e.importance) {
                    let d = (w - a) as f64;
                    total += imp * d * d;
                }
            }
        }
        scale * total
    }
}

/// Running SI path integral `ω += −g·Δθ` for every tracked parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SiTracker {
    start: IndexMap<String, Vec<f32>>,
    omega: IndexMap<String, Vec<f64>>,
}

impl SiTracker {
    /// Starts tracking the trainable parameters at their current values.
    pub fn new(params: &ParamStore) -> Self {
        let start: IndexMap<String, Vec<f32>> = params
            .trainable()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        let omega = start
            .iter()
            .map(|(n, v)| (n.clone(), vec![0.0; v.len()]))
            .collect();
        Self { start, omega }
    }

    /// Adds one step; `applied` must be the update that actually moved θ.
    pub fn record(&mut self, applied: &UpdateSet, grads: &GradientStore) -> Result<()> {
        for (name, delta) in applied.iter() {
            let Some(omega) = self.omega.get_mut(name) else {
                continue;
            };
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            for ((w, &d), &gi) in omega.iter_mut().zip(delta.data()).zip(g.data()) {
                *w -= gi as f64 * d as f64;
            }
        }
        Ok(())
    }

    pub fn omega(&self, name: &str) -> Option<&[f64]> {
        self.omega.get(name).map(Vec::as_slice)
    }

    pub fn start(&self, name: &str) -> Option<&[f32]> {
        self.start.get(name).map(Vec::as_slice)
    }
}

/// `Ω = max(ω, 0) / ((θ_end − θ_start)² + ξ)`, anchored at `θ_end`.
pub fn si_consolidate(tracker: &SiTracker, end: &ParamStore, damping: f64) -> Result<ImportanceMap> {
    if !(damping > 0.0) {
        return Err(Error::config(format!("SI damping must be positive, got {damping}")));
    }
    let mut map = ImportanceMap::new(ImportanceKind::Si, Some(damping));
    for (name, omega) in &tracker.omega {
        let value = end
            .get(name)
            .ok_or_else(|| Error::config(format!("parameter `{name}` missing at consolidation")))?;
        let start = &tracker.start[name];
        let importance = omega
            .iter()
            .zip(start)
            .zip(value.data())
            .map(|((&w, &s), &e)| {
                let moved = (e - s) as f64;
                w.max(0.0) / (moved * moved + damping)
            })
            .collect();
        map.insert(name.clone(), importance, value.data().to_vec())?;
    }
    Ok(map)
}

/// Empirical diagonal Fisher: mean over samples of the squared gradient of
/// `−log p(y|x)` for the true label, anchored at the current parameters.
pub fn ewc_fisher(model: &ModelSpec, params: &ParamStore, samples: &Dataset) -> Result<ImportanceMap> {
    if samples.is_empty() {
        return Err(Error::config("Fisher estimate needs at least one sample"));
    }
    let mut sums: IndexMap<String, Vec<f64>> = params
        .trainable()
        .map(|(n, t)| (n.to_string(), vec![0.0; t.len()]))
        .collect();
    for i in 0..samples.len() {
        let batch: Batch = samples.batch(&[i]);
        let (_, mut graph) = model.forward(params, &batch, DropoutMode::Disabled)?;
        let grads = graph.backward()?;
        for (name, acc) in sums.iter_mut() {
            if let Some(g) = grads.get(name) {
                for (a, &gi) in acc.iter_mut().zip(g.data()) {
                    *a += (gi as f64) * (gi as f64);
                }
            }
        }
    }
    let n = samples.len() as f64;
    let mut map = ImportanceMap::new(ImportanceKind::Ewc, None);
    for (name, acc) in sums {
        let anchor = params.get(&name).expect("taken from params").data().to_vec();
        map.insert(name, acc.into_iter().map(|v| v / n).collect(), anchor)?;
    }
    Ok(map)
}

/// Gradient of the anchor penalty: `2cΩ(θ−θ*)` for SI, `λF(θ−θ*)` for EWC.
/// Only parameters present in both the map and `params` appear.
pub fn penalty_gradient(map: &ImportanceMap, params: &ParamStore) -> Result<GradientStore> {
    let scale = match map.kind {
        ImportanceKind::Si => 2.0 * map.strength,
        ImportanceKind::Ewc => map.strength,
    };
    let mut out = GradientStore::new();
    for (name, e) in &map.entries {
        let Some(value) = params.get(name) else {
            continue;
        };
        if value.len() != e.anchor.len() {
            return Err(Error::shape(format!("anchor of `{name}`"), value.shape(), &[e.anchor.len()]));
        }
        let data = value
            .data()
            .iter()
            .zip(&e.anchor)
            .zip(&e.importance)
            .map(|((&w, &a), &imp)| (scale * imp * (w - a) as f64) as f32)
            .collect();
        out.insert(name.as_str(), Tensor::new(value.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Adds the penalty gradient in place for trainable parameters. Does nothing
/// at zero strength so that the result is bit-identical to plain training.
pub fn add_penalty(map: &ImportanceMap, params: &ParamStore, grads: &mut GradientStore) -> Result<()> {
    if map.strength == 0.0 {
        return Ok(());
    }
    let penalty = penalty_gradient(map, params)?;
    for (name, pg) in penalty.iter() {
        if let Some(g) = grads.get_mut(name) {
            for (gi, &p) in g.data_mut().iter_mut().zip(pg.data()) {
                *gi += p;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    fn update(v: f32) -> UpdateSet {
        let mut u = UpdateSet::new();
        u.insert("w", Tensor::scalar(v));
        u
    }

    fn grad(v: f32) -> GradientStore {
        let mut g = GradientStore::new();
        g.insert("w", Tensor::scalar(v));
        g
    }

    #[test]
    fn si_path_integral() {
        let mut t = SiTracker::new(&store(0.0));
        t.record(&update(-0.1), &grad(2.0)).unwrap();
        assert!((t.omega("w").unwrap()[0] - 0.2).abs() < 1e-7);

        let mut c = SiTracker::new(&store(0.0));
        c.record(&update(-0.1), &grad(1.0)).unwrap();
        c.record(&update(0.1), &grad(1.0)).unwrap();
        assert!(c.omega("w").unwrap()[0].abs() < 1e-12);

        let mut z = SiTracker::new(&store(0.0));
        z.record(&update(0.3), &grad(0.0)).unwrap();
        assert_eq!(z.omega("w").unwrap(), &[0.0]);
    }

    fn tracker_with(omega: f64) -> SiTracker {
        let mut t = SiTracker::new(&store(0.0));
        t.omega.get_mut("w").unwrap()[0] = omega;
        t
    }

    #[test]
    fn si_consolidation() {
        let m = si_consolidate(&tracker_with(0.2), &store(0.1), 0.01).unwrap();
        assert!((m.importance("w").unwrap()[0] - 10.0).abs() < 1e-5);
        assert_eq!(m.anchor("w").unwrap(), &[0.1]);
        let zero = si_consolidate(&tracker_with(0.0), &store(0.1), 0.01).unwrap();
        assert_eq!(zero.importance("w").unwrap(), &[0.0]);
        let neg = si_consolidate(&tracker_with(-0.3), &store(0.1), 0.01).unwrap();
        assert_eq!(neg.importance("w").unwrap(), &[0.0]);
        assert!(si_consolidate(&tracker_with(0.2), &store(0.1), 0.0).is_err());
    }

    #[test]
    fn penalty_gradients() {
        let m = ImportanceMap::from_values(ImportanceKind::Si, [("w".to_string(), vec![10.0], vec![0.0])])
            .unwrap()
            .with_strength(0.05)
            .unwrap();
        let g = penalty_gradient(&m, &store(0.1)).unwrap();
        assert!((g.get("w").unwrap().get(0) - 0.1).abs() < 1e-7);
        let at_anchor = penalty_gradient(&m, &store(0.0)).unwrap();
        assert_eq!(at_anchor.get("w").unwrap().get(0), 0.0);

        let e = ImportanceMap::from_values(ImportanceKind::Ewc, [("w".to_string(), vec![4.0], vec![1.0])])
            .unwrap()
            .with_strength(10.0)
            .unwrap();
        let g = penalty_gradient(&e, &store(1.5)).unwrap();
        assert!((g.get("w").unwrap().get(0) - 20.0).abs() < 1e-5);
        assert!((e.penalty(&store(1.5)) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn merge_sums_importance_and_moves_anchor() {
        let mut a = ImportanceMap::from_values(ImportanceKind::Si, [("w".to_string(), vec![1.0], vec![0.0])]).unwrap();
        let b = ImportanceMap::from_values(ImportanceKind::Si, [("w".to_string(), vec![2.0], vec![0.5])]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.importance("w").unwrap(), &[3.0]);
        assert_eq!(a.anchor("w").unwrap(), &[0.5]);
        let e = ImportanceMap::from_values(ImportanceKind::Ewc, []).unwrap();
        assert!(a.merge(&e).is_err());
    }

    #[test]
    fn negative_importance_rejected() {
        assert!(ImportanceMap::from_values(ImportanceKind::Ewc, [("w".to_string(), vec![-1.0], vec![0.0])]).is_err());
    }
}
