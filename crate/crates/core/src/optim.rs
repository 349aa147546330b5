//! SGD-with-momentum and Adam, split into "compute the raw update" and
//! "apply it" so that an [`UpdateHook`] can rewrite each update in between.
//!
//! Regularisers that need to change *how far* a parameter moves act on the
//! update itself rather than adding terms to the loss; the same hook then
//! behaves identically under any optimizer.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{GradientStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        }
    }

    pub fn sgd(lr: f32, momentum: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate {} is invalid", self.lr)));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => Err(
                Error::config(format!("momentum {momentum} outside [0, 1)")),
            ),
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::config("Adam needs betas in [0, 1) and eps > 0"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// Per-parameter updates Δθ, in parameter order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateSet {
    updates: IndexMap<String, Tensor>,
}

impl UpdateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, update: Tensor) {
        self.updates.insert(name.into(), update);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.updates.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.updates.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn negated(&self) -> UpdateSet {
        UpdateSet {
            updates: self
                .updates
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| -x)))
                .collect(),
        }
    }
}

/// Rewrites a raw optimizer update before it is applied.
pub trait UpdateHook {
    /// Returns the update to apply to `name`. The result must keep the shape
    /// of `update`.
    fn modify(&mut self, name: &str, update: &Tensor, grad: &Tensor) -> Tensor;
}

/// Hook that returns every update unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityHook;

impl UpdateHook for IdentityHook {
    fn modify(&mut self, _name: &str, update: &Tensor, _grad: &Tensor) -> Tensor {
        update.clone()
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: IndexMap<String, Moments>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            moments: IndexMap::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First moment (velocity for SGD) of a parameter, if it has been updated.
    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    /// Advances the optimizer state and returns Δθ for every trainable
    /// parameter without touching `params`.
    ///
    /// SGD: `v ← μv + g`, `Δθ = −lr·v`. Adam: bias-corrected
    /// `Δθ = −lr·m̂/(√v̂ + ε)`.
    pub fn compute_raw_update(
        &mut self,
        params: &ParamStore,
        grads: &GradientStore,
    ) -> Result<UpdateSet> {
        for (name, value) in params.trainable() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.shape() != value.shape() {
                return Err(Error::shape(format!("gradient of `{name}`"), value.shape(), g.shape()));
            }
        }
        self.step += 1;
        let lr = self.config.lr;
        let mut out = UpdateSet::new();
        for (name, value) in params.trainable() {
            let g = grads.get(name).expect("checked above").data();
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; value.len()],
                second: Vec::new(),
            });
            let delta: Vec<f32> = match self.config.kind {
                OptimizerKind::Sgd { momentum } => m
                    .first
                    .iter_mut()
                    .zip(g)
                    .map(|(v, &gi)| {
                        *v = momentum * *v + gi;
                        -lr * *v
                    })
                    .collect(),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if m.second.is_empty() {
                        m.second = vec![0.0; value.len()];
                    }
                    let t = self.step as i32;
                    let c1 = (1.0 - (beta1 as f64).powi(t)) as f32;
                    let c2 = (1.0 - (beta2 as f64).powi(t)) as f32;
                    m.first
                        .iter_mut()
                        .zip(m.second.iter_mut())
                        .zip(g)
                        .map(|((m1, m2), &gi)| {
                            *m1 = beta1 * *m1 + (1.0 - beta1) * gi;
                            *m2 = beta2 * *m2 + (1.0 - beta2) * gi * gi;
                            let m_hat = *m1 / c1;
                            let v_hat = *m2 / c2;
                            -lr * m_hat / (v_hat.sqrt() + eps)
                        })
                        .collect()
                }
            };
            out.insert(name, Tensor::new(value.shape().to_vec(), delta)?);
        }
        Ok(out)
    }

    /// One full step: raw update, optional hook, apply. Returns the applied
    /// updates.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &GradientStore,
        hook: Option<&mut dyn UpdateHook>,
    ) -> Result<UpdateSet> {
        let raw = self.compute_raw_update(params, grads)?;
        apply_update(params, &raw, grads, hook)
    }
}

/// `θ ← θ + hook(Δθ)` (or `θ ← θ + Δθ` without a hook). Returns the updates
/// that were actually added.
pub fn apply_update(
    params: &mut ParamStore,
    updates: &UpdateSet,
    grads: &GradientStore,
    mut hook: Option<&mut dyn UpdateHook>,
) -> Result<UpdateSet> {
    let mut staged = UpdateSet::new();
    for (name, raw) in updates.iter() {
        let value = params
            .get(name)
            .ok_or_else(|| Error::config(format!("update for unknown parameter `{name}`")))?;
        if value.shape() != raw.shape() {
            return Err(Error::shape(format!("update of `{name}`"), value.shape(), raw.shape()));
        }
        let applied = match hook.as_deref_mut() {
            Some(h) => {
                let g = grads
                    .get(name)
                    .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
                let modified = h.modify(name, raw, g);
                if modified.shape() != raw.shape() {
                    return Err(Error::HookContract {
                        name: name.to_string(),
                        before: raw.shape().to_vec(),
                        after: modified.shape().to_vec(),
                    });
                }
                modified
            }
            None => raw.clone(),
        };
        staged.insert(name, applied);
    }
    for (name, delta) in staged.iter() {
        let value = params.get_mut(name).expect("validated above");
        for (p, &d) in value.data_mut().iter_mut().zip(delta.data()) {
            *p += d;
        }
    }
    Ok(staged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(value: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    fn grad(value: f32) -> GradientStore {
        let mut g = GradientStore::new();
        g.insert("w", Tensor::scalar(value));
        g
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        let u = opt.compute_raw_update(&single(1.0), &grad(2.0)).unwrap();
        assert!((u.get("w").unwrap().get(0) + 0.2).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.5)).unwrap();
        let p = single(0.0);
        opt.compute_raw_update(&p, &grad(1.0)).unwrap();
        let u = opt.compute_raw_update(&p, &grad(1.0)).unwrap();
        assert!((u.get("w").unwrap().get(0) + 0.15).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
        let u = opt.compute_raw_update(&single(0.0), &grad(1.0)).unwrap();
        assert!((u.get("w").unwrap().get(0) + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        for cfg in [OptimizerConfig::sgd(0.1, 0.9), OptimizerConfig::adam(1e-3)] {
            let mut opt = Optimizer::new(cfg).unwrap();
            let u = opt.compute_raw_update(&single(3.0), &grad(0.0)).unwrap();
            assert_eq!(u.get("w").unwrap().get(0), 0.0);
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
        match opt.compute_raw_update(&single(1.0), &GradientStore::new()) {
            Err(Error::MissingGradient(n)) => assert_eq!(n, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut p = single(1.0);
        p.set_trainable("w", false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        let applied = opt.step(&mut p, &GradientStore::new(), None).unwrap();
        assert!(applied.is_empty());
        assert_eq!(p.get("w").unwrap().get(0), 1.0);
    }

    struct Scale(f32);
    impl UpdateHook for Scale {
        fn modify(&mut self, _: &str, u: &Tensor, _: &Tensor) -> Tensor {
            u.map(|v| v * self.0)
        }
    }

    struct Reshaper;
    impl UpdateHook for Reshaper {
        fn modify(&mut self, _: &str, _: &Tensor, _: &Tensor) -> Tensor {
            Tensor::zeros(&[2])
        }
    }

    #[test]
    fn hooks_rewrite_updates() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        opt.step(&mut p, &grad(2.0), Some(&mut Scale(0.0))).unwrap();
        assert_eq!(p.get("w").unwrap().get(0), 1.0);

        let mut a = single(1.0);
        let mut b = single(1.0);
        let mut o1 = Optimizer::new(OptimizerConfig::adam(1e-2)).unwrap();
        let mut o2 = Optimizer::new(OptimizerConfig::adam(1e-2)).unwrap();
        for g in [0.3, -1.0, 2.5] {
            o1.step(&mut a, &grad(g), None).unwrap();
            o2.step(&mut b, &grad(g), Some(&mut IdentityHook)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_changing_hook_is_rejected() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        assert!(matches!(
            opt.step(&mut p, &grad(1.0), Some(&mut Reshaper)),
            Err(Error::HookContract { .. })
        ));
        assert_eq!(p.get("w").unwrap().get(0), 1.0);
    }

    proptest! {
        #[test]
        fn adam_step_one_is_bounded_by_lr(g in -1e6f32..1e6, lr in 1e-5f32..1e-1) {
            let mut opt = Optimizer::new(OptimizerConfig::adam(lr)).unwrap();
            let u = opt.compute_raw_update(&single(0.0), &grad(g)).unwrap();
            prop_assert!(u.get("w").unwrap().get(0).abs() <= lr * (1.0 + 1e-6));
        }

        #[test]
        fn apply_then_negate_restores(vals in proptest::collection::vec(-10f32..10.0, 1..8),
                                      deltas in proptest::collection::vec(-1f32..1.0, 8)) {
            let n = vals.len();
            let mut p = ParamStore::new();
            p.insert("w", Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            let mut u = UpdateSet::new();
            u.insert("w", Tensor::new(vec![n], deltas[..n].to_vec()).unwrap());
            let g = GradientStore::new();
            apply_update(&mut p, &u, &g, None).unwrap();
            apply_update(&mut p, &u.negated(), &g, None).unwrap();
            for (a, b) in p.get("w").unwrap().data().iter().zip(&vals) {
                // One rounding on each application, relative to the operand scale.
                prop_assert!((a - b).abs() <= 2.0 * f32::EPSILON * (b.abs() + 1.0));
            }
        }
    }
}
