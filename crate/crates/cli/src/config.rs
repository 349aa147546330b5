//! Experiment configuration: TOML in, validated and fully resolved out.

use std::fmt;
use std::path::{Path, PathBuf};

use ppap_core::baselines::{DEFAULT_FISHER_SAMPLES, DEFAULT_SI_DAMPING};
use ppap_core::data::{AugmentSpec, SuperclassConfig, SyntheticConfig, SyntheticKind};
use ppap_core::harness::{EwcSettings, Method, PpapSettings, ProbeConfig, SiSettings};
use ppap_core::optim::{OptimizerConfig, OptimizerKind};
use ppap_core::ppap::{CombineRule, SpikeTrigger};
use serde::{Deserialize, Serialize};

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Synthetic,
    Sequence,
    Loco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub methods: Vec<MethodSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loco: Option<LocoSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Cnn,
    LocoCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<ModelKind>,
    /// Hidden widths of an MLP backbone.
    pub hidden: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: None,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerName,
    pub learning_rate: f32,
    pub momentum: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: OptimizerName::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSection {
    pub fn to_core(&self) -> OptimizerConfig {
        let kind = match self.kind {
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            OptimizerName::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
            },
        };
        OptimizerConfig {
            kind,
            lr: self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    None,
    Scratch,
    Ppap,
    Si,
    Ewc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleName {
    Latest,
    Min,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerName {
    Positive,
    Absolute,
}

/// One method of the run matrix. Which fields apply depends on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub kind: MethodName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_score: Option<f64>,
    /// SI `c` or EWC `λ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    /// SI `ξ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    /// EWC Fisher sample size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticName {
    ClusterSplit,
    MoonsRotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub kind: SyntheticName,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub cluster_std: f32,
    pub spread: f32,
    pub rotation_deg: f32,
    pub moons_noise: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            kind: SyntheticName::ClusterSplit,
            tasks: 2,
            classes_per_task: d.classes_per_task,
            samples_per_class: d.samples_per_class,
            cluster_std: d.cluster_std,
            spread: d.spread,
            rotation_deg: d.rotation_deg,
            moons_noise: d.moons_noise,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

impl SyntheticSection {
    pub fn kind(&self) -> SyntheticKind {
        match self.kind {
            SyntheticName::ClusterSplit => SyntheticKind::ClusterSplit,
            SyntheticName::MoonsRotation => SyntheticKind::MoonsRotation,
        }
    }

    pub fn to_core(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes_per_task: self.classes_per_task,
            samples_per_class: self.samples_per_class,
            cluster_std: self.cluster_std,
            spread: self.spread,
            rotation_deg: self.rotation_deg,
            moons_noise: self.moons_noise,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

/// CIFAR-10 followed by CIFAR-100 slices of 10 classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSection {
    pub cifar10: Vec<PathBuf>,
    pub cifar100: PathBuf,
    #[serde(default = "default_extra_tasks")]
    pub extra_tasks: usize,
    #[serde(default = "default_sequence_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sequence_batch")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_extra_tasks() -> usize {
    5
}

fn default_sequence_epochs() -> usize {
    60
}

fn default_sequence_batch() -> usize {
    256
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocoSource {
    Synthetic,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperclassSection {
    pub fine_per_superclass: usize,
    pub samples_per_fine: usize,
    pub dim: usize,
    pub superclass_spread: f32,
    pub fine_spread: f32,
    pub noise: f32,
}

impl Default for SuperclassSection {
    fn default() -> Self {
        let d = SuperclassConfig::default();
        Self {
            fine_per_superclass: d.fine_per_superclass,
            samples_per_fine: d.samples_per_fine,
            dim: d.dim,
            superclass_spread: d.superclass_spread,
            fine_spread: d.fine_spread,
            noise: d.noise,
        }
    }
}

impl SuperclassSection {
    pub fn to_core(&self) -> SuperclassConfig {
        SuperclassConfig {
            superclasses: 20,
            fine_per_superclass: self.fine_per_superclass,
            samples_per_fine: self.samples_per_fine,
            dim: self.dim,
            superclass_spread: self.superclass_spread,
            fine_spread: self.fine_spread,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocoSection {
    pub source: LocoSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar100: Option<PathBuf>,
    pub holdouts: Vec<usize>,
    /// `[pretrain, finetune]` epoch pairs.
    pub epochs: Vec<[usize; 2]>,
    pub batch_size: usize,
    pub augment: bool,
    pub probe_epochs: usize,
    pub probe_patience: usize,
    pub probe_min_delta: f64,
    pub probe_batch_size: usize,
    pub synthetic: SuperclassSection,
}

impl Default for LocoSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            source: LocoSource::Synthetic,
            cifar100: None,
            holdouts: (0..20).collect(),
            epochs: vec![[20, 20]],
            batch_size: 32,
            augment: true,
            probe_epochs: p.epochs,
            probe_patience: p.patience,
            probe_min_delta: p.min_delta,
            probe_batch_size: p.batch_size,
            synthetic: SuperclassSection::default(),
        }
    }
}

/// Reads, resolves and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", e.to_string()))?;
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ConfigError::new(path, e.into_inner().message().trim().to_string())
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

fn check(ok: bool, path: impl Into<String>, message: impl Into<String>) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(path, message))
    }
}

impl ExperimentConfig {
    /// Fills protocol-dependent defaults and validates every field.
    pub fn resolve(&mut self) -> Result<(), ConfigError> {
        check(!self.seeds.is_empty(), "seeds", "at least one seed is required")?;
        check(self.workers >= 1, "workers", "must be at least 1")?;
        self.resolve_sections()?;
        self.resolve_model()?;
        self.validate_optimizer()?;
        check(!self.methods.is_empty(), "methods", "at least one method is required")?;
        for i in 0..self.methods.len() {
            resolve_method(&mut self.methods[i], &format!("methods[{i}]"))?;
        }
        let methods = self.core_methods();
        for (i, m) in methods.iter().enumerate() {
            if let Some(j) = methods[..i]
                .iter()
                .position(|o| o.name() == m.name() && o.strength_or_r() == m.strength_or_r())
            {
                return Err(ConfigError::new(
                    format!("methods[{i}]"),
                    format!("same kind and strength as methods[{j}], so their run ids would collide"),
                ));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            check(!self.seeds[..i].contains(s), format!("seeds[{i}]"), format!("seed {s} listed twice"))?;
        }
        if self.protocol == Protocol::Loco {
            self.validate_loco_methods()?;
        }
        Ok(())
    }

    fn resolve_sections(&mut self) -> Result<(), ConfigError> {
        let (want_synthetic, want_sequence, want_loco) = match self.protocol {
            Protocol::Synthetic => (true, false, false),
            Protocol::Sequence => (false, true, false),
            Protocol::Loco => (false, false, true),
        };
        check(
            want_synthetic || self.synthetic.is_none(),
            "synthetic",
            "only used by protocol = \"synthetic\"",
        )?;
        check(
            want_sequence || self.sequence.is_none(),
            "sequence",
            "only used by protocol = \"sequence\"",
        )?;
        check(want_loco || self.loco.is_none(), "loco", "only used by protocol = \"loco\"")?;

        if want_synthetic {
            let s = self.synthetic.get_or_insert_with(SyntheticSection::default);
            check(s.tasks >= 1, "synthetic.tasks", "must be at least 1")?;
            check(s.classes_per_task >= 1, "synthetic.classes_per_task", "must be at least 1")?;
            check(s.samples_per_class >= 2, "synthetic.samples_per_class", "must be at least 2")?;
            check(s.cluster_std > 0.0, "synthetic.cluster_std", "must be positive")?;
            check(s.spread > 0.0, "synthetic.spread", "must be positive")?;
            check(s.moons_noise >= 0.0, "synthetic.moons_noise", "must be >= 0")?;
            check(s.epochs >= 1, "synthetic.epochs", "must be at least 1")?;
            check(s.batch_size >= 1, "synthetic.batch_size", "must be at least 1")?;
        }
        if want_sequence {
            let s = self
                .sequence
                .as_ref()
                .ok_or_else(|| ConfigError::new("sequence", "protocol = \"sequence\" needs a [sequence] section"))?;
            check(!s.cifar10.is_empty(), "sequence.cifar10", "list at least one CIFAR-10 file")?;
            for (i, p) in s.cifar10.iter().enumerate() {
                check(p.is_file(), format!("sequence.cifar10[{i}]"), format!("{} not found", p.display()))?;
            }
            check(
                s.cifar100.is_file(),
                "sequence.cifar100",
                format!("{} not found", s.cifar100.display()),
            )?;
            check(
                (1..=10).contains(&s.extra_tasks),
                "sequence.extra_tasks",
                "must be between 1 and 10",
            )?;
            check(s.epochs >= 1, "sequence.epochs", "must be at least 1")?;
            check(s.batch_size >= 1, "sequence.batch_size", "must be at least 1")?;
        }
        if want_loco {
            let l = self.loco.get_or_insert_with(LocoSection::default);
            match l.source {
                LocoSource::Synthetic => {
                    check(l.cifar100.is_none(), "loco.cifar100", "only used with source = \"cifar100\"")?;
                    let s = &l.synthetic;
                    check(s.fine_per_superclass >= 1, "loco.synthetic.fine_per_superclass", "must be at least 1")?;
                    check(s.samples_per_fine >= 3, "loco.synthetic.samples_per_fine", "must be at least 3")?;
                    check(s.dim >= 1, "loco.synthetic.dim", "must be at least 1")?;
                    for (name, v) in [
                        ("superclass_spread", s.superclass_spread),
                        ("fine_spread", s.fine_spread),
                        ("noise", s.noise),
                    ] {
                        check(v > 0.0, format!("loco.synthetic.{name}"), "must be positive")?;
                    }
                }
                LocoSource::Cifar100 => {
                    let p = l
                        .cifar100
                        .as_ref()
                        .ok_or_else(|| ConfigError::new("loco.cifar100", "required with source = \"cifar100\""))?;
                    check(p.is_file(), "loco.cifar100", format!("{} not found", p.display()))?;
                }
            }
            check(!l.holdouts.is_empty(), "loco.holdouts", "at least one hold-out is required")?;
            for (i, &h) in l.holdouts.iter().enumerate() {
                check(h < 20, format!("loco.holdouts[{i}]"), format!("superclass {h} outside 0..20"))?;
                check(
                    !l.holdouts[..i].contains(&h),
                    format!("loco.holdouts[{i}]"),
                    format!("superclass {h} listed twice"),
                )?;
            }
            check(!l.epochs.is_empty(), "loco.epochs", "at least one epoch pair is required")?;
            for (i, e) in l.epochs.iter().enumerate() {
                check(e[0] >= 1 && e[1] >= 1, format!("loco.epochs[{i}]"), "epochs must be at least 1")?;
            }
            check(l.batch_size >= 1, "loco.batch_size", "must be at least 1")?;
            check(l.probe_epochs >= 1, "loco.probe_epochs", "must be at least 1")?;
            check(l.probe_batch_size >= 1, "loco.probe_batch_size", "must be at least 1")?;
            check(
                l.probe_min_delta >= 0.0 && l.probe_min_delta.is_finite(),
                "loco.probe_min_delta",
                "must be a finite value >= 0",
            )?;
        }
        Ok(())
    }

    fn resolve_model(&mut self) -> Result<(), ConfigError> {
        let loco_source = self.loco.as_ref().map(|l| l.source);
        let default_kind = match (self.protocol, loco_source) {
            (Protocol::Sequence, _) => ModelKind::Cnn,
            (Protocol::Loco, Some(LocoSource::Cifar100)) => ModelKind::LocoCnn,
            _ => ModelKind::Mlp,
        };
        let kind = *self.model.kind.get_or_insert(default_kind);
        let images = matches!(
            (self.protocol, loco_source),
            (Protocol::Sequence, _) | (Protocol::Loco, Some(LocoSource::Cifar100))
        );
        match kind {
            ModelKind::Mlp => {
                check(!images, "model.kind", "image protocols need \"cnn\" or \"loco-cnn\"")?;
                let default_hidden = if self.protocol == Protocol::Loco {
                    vec![32, 8]
                } else {
                    vec![32, 32]
                };
                let hidden = self.model.hidden.get_or_insert(default_hidden);
                for (i, &h) in hidden.iter().enumerate() {
                    check(h >= 1, format!("model.hidden[{i}]"), "widths must be at least 1")?;
                }
            }
            ModelKind::Cnn | ModelKind::LocoCnn => {
                check(images, "model.kind", "vector inputs need \"mlp\"")?;
                check(self.model.hidden.is_none(), "model.hidden", "only used by \"mlp\"")?;
            }
        }
        Ok(())
    }

    fn validate_optimizer(&self) -> Result<(), ConfigError> {
        let o = &self.optimizer;
        check(
            o.learning_rate.is_finite() && o.learning_rate > 0.0,
            "optimizer.learning_rate",
            "must be a positive number",
        )?;
        check((0.0..1.0).contains(&o.momentum), "optimizer.momentum", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2", "must lie in [0, 1)")?;
        check(o.eps > 0.0, "optimizer.eps", "must be positive")
    }

    /// LOCO profiles and importances come from one shared pretraining run,
    /// so settings that shape them must agree across methods.
    fn validate_loco_methods(&self) -> Result<(), ConfigError> {
        let mut ppap: Option<(f64, Option<TriggerName>)> = None;
        let mut damping: Option<f64> = None;
        let mut samples: Option<usize> = None;
        for (i, m) in self.methods.iter().enumerate() {
            let at = |f: &str| format!("methods[{i}].{f}");
            match m.kind {
                MethodName::Scratch => return Err(ConfigError::new(at("kind"), "\"scratch\" is not a LOCO method")),
                MethodName::Ppap => {
                    let this = (m.k.expect("resolved"), m.trigger);
                    check(ppap.is_none_or(|p| p == this), at("k"), "LOCO methods must share one k and trigger")?;
                    ppap = Some(this);
                }
                MethodName::Si => {
                    let d = m.damping.expect("resolved");
                    check(damping.is_none_or(|x| x == d), at("damping"), "LOCO SI methods must share one damping")?;
                    damping = Some(d);
                }
                MethodName::Ewc => {
                    let s = m.samples.expect("resolved");
                    check(samples.is_none_or(|x| x == s), at("samples"), "LOCO EWC methods must share one sample size")?;
                    samples = Some(s);
                }
                MethodName::None => {}
            }
        }
        Ok(())
    }

    pub fn core_methods(&self) -> Vec<Method> {
        self.methods.iter().map(MethodSection::to_core).collect()
    }

    pub fn augment(&self) -> Option<AugmentSpec> {
        let on = match self.protocol {
            Protocol::Sequence => self.sequence.as_ref().is_some_and(|s| s.augment),
            Protocol::Loco => self
                .loco
                .as_ref()
                .is_some_and(|l| l.augment && l.source == LocoSource::Cifar100),
            Protocol::Synthetic => false,
        };
        on.then_some(AugmentSpec::CIFAR)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serialisable")
    }
}

fn resolve_method(m: &mut MethodSection, at: &str) -> Result<(), ConfigError> {
    let field = |f: &str| format!("{at}.{f}");
    let unused = |present: bool, f: &str, kind: &str| {
        check(!present, field(f), format!("not used by method \"{kind}\""))
    };
    let is_ppap = m.kind == MethodName::Ppap;
    let kind = match m.kind {
        MethodName::None => "none",
        MethodName::Scratch => "scratch",
        MethodName::Ppap => "ppap",
        MethodName::Si => "si",
        MethodName::Ewc => "ewc",
    };
    if !is_ppap {
        unused(m.r.is_some(), "r", kind)?;
        unused(m.k.is_some(), "k", kind)?;
        unused(m.rule.is_some(), "rule", kind)?;
        unused(m.trigger.is_some(), "trigger", kind)?;
        unused(m.default_score.is_some(), "default_score", kind)?;
    }
    if !matches!(m.kind, MethodName::Si | MethodName::Ewc) {
        unused(m.strength.is_some(), "strength", kind)?;
    }
    if m.kind != MethodName::Si {
        unused(m.damping.is_some(), "damping", kind)?;
    }
    if m.kind != MethodName::Ewc {
        unused(m.samples.is_some(), "samples", kind)?;
    }
    match m.kind {
        MethodName::Ppap => {
            let d = PpapSettings::default();
            let r = *m.r.get_or_insert(d.r);
            let k = *m.k.get_or_insert(d.k);
            let s = *m.default_score.get_or_insert(d.default_score);
            m.rule.get_or_insert(RuleName::Min);
            m.trigger.get_or_insert(TriggerName::Positive);
            check((0.0..=1.0).contains(&r), field("r"), "must lie in [0, 1]")?;
            check(k.is_finite() && k > 0.0, field("k"), "must be positive")?;
            check((0.0..=1.0).contains(&s), field("default_score"), "must lie in [0, 1]")?;
        }
        MethodName::Si | MethodName::Ewc => {
            let s = m
                .strength
                .ok_or_else(|| ConfigError::new(field("strength"), format!("required for method \"{kind}\"")))?;
            check(s.is_finite() && s >= 0.0, field("strength"), "must be a finite value >= 0")?;
            if m.kind == MethodName::Si {
                let d = *m.damping.get_or_insert(DEFAULT_SI_DAMPING);
                check(d.is_finite() && d > 0.0, field("damping"), "must be positive")?;
            } else {
                let n = *m.samples.get_or_insert(DEFAULT_FISHER_SAMPLES);
                check(n >= 1, field("samples"), "must be at least 1")?;
            }
        }
        MethodName::None | MethodName::Scratch => {}
    }
    Ok(())
}

impl MethodSection {
    /// Converts a resolved method.
    pub fn to_core(&self) -> Method {
        match self.kind {
            MethodName::None => Method::None,
            MethodName::Scratch => Method::Scratch,
            MethodName::Ppap => Method::Ppap(PpapSettings {
                k: self.k.expect("resolved"),
                r: self.r.expect("resolved"),
                rule: match self.rule.expect("resolved") {
                    RuleName::Latest => CombineRule::Latest,
                    RuleName::Min => CombineRule::Min,
                    RuleName::Product => CombineRule::Product,
                },
                trigger: trigger(self.trigger.expect("resolved")),
                default_score: self.default_score.expect("resolved"),
            }),
            MethodName::Si => Method::Si(SiSettings {
                strength: self.strength.expect("resolved"),
                damping: self.damping.expect("resolved"),
            }),
            MethodName::Ewc => Method::Ewc(EwcSettings {
                strength: self.strength.expect("resolved"),
                samples: self.samples.expect("resolved"),
            }),
        }
    }
}

pub fn trigger(t: TriggerName) -> SpikeTrigger {
    match t {
        TriggerName::Positive => SpikeTrigger::Positive,
        TriggerName::Absolute => SpikeTrigger::Absolute,
    }
}
