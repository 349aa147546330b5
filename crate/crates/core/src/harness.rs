//! Continual-learning protocols: sequential multi-head training, the
//! leave-one-superclass-out pretrain/finetune protocol with linear probing,
//! evaluation and the metrics rows written to CSV.

use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    add_penalty, ewc_fisher, si_consolidate, ImportanceMap, SiTracker, DEFAULT_FISHER_SAMPLES,
    DEFAULT_SI_DAMPING,
};
use crate::data::{augment, AugmentSpec, Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::{DropoutMode, HeadSpec, ModelSpec};
use crate::optim::{Optimizer, OptimizerConfig, UpdateHook};
use crate::params::ParamStore;
use crate::ppap::{
    combine_profiles, loss_delta, make_ppap_hook, ActivityAccumulator, BlendConfig, CombineRule,
    PlateauProfile, SpikeTrigger,
};

/// One task of a sequence: its data, the head it trains and its budget.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub head: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TaskSpec {
    pub fn with_budget(mut self, epochs: usize, batch_size: usize) -> Self {
        self.epochs = epochs;
        self.batch_size = batch_size;
        self
    }

    fn validate(&self, model: &ModelSpec) -> Result<()> {
        let head = model.head(&self.head).ok_or_else(|| {
            Error::config(format!("task `{}` uses unknown head `{}`", self.id, self.head))
        })?;
        if head.outputs < self.train.num_classes() {
            return Err(Error::config(format!(
                "head `{}` has {} outputs but task `{}` has {} classes",
                self.head,
                head.outputs,
                self.id,
                self.train.num_classes()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!("task `{}` needs epochs and batch size >= 1", self.id)));
        }
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::config(format!("task `{}` has an empty split", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpapSettings {
    pub k: f64,
    pub r: f64,
    pub rule: CombineRule,
    pub trigger: SpikeTrigger,
    pub default_score: f64,
}

impl Default for PpapSettings {
    fn default() -> Self {
        Self {
            k: 25.0,
            r: 0.03,
            rule: CombineRule::Min,
            trigger: SpikeTrigger::Positive,
            default_score: 1.0,
        }
    }
}

impl PpapSettings {
    pub fn blend(&self) -> Result<BlendConfig> {
        BlendConfig::new(self.r as f32, self.default_score as f32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiSettings {
    pub strength: f64,
    pub damping: f64,
}

impl SiSettings {
    pub fn new(strength: f64) -> Self {
        Self {
            strength,
            damping: DEFAULT_SI_DAMPING,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwcSettings {
    pub strength: f64,
    pub samples: usize,
}

impl EwcSettings {
    pub fn new(strength: f64) -> Self {
        Self {
            strength,
            samples: DEFAULT_FISHER_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Plain fine-tuning.
    None,
    /// Every task trained alone from a fresh initialisation.
    Scratch,
    Ppap(PpapSettings),
    Si(SiSettings),
    Ewc(EwcSettings),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Scratch => "scratch",
            Method::Ppap(_) => "ppap",
            Method::Si(_) => "si",
            Method::Ewc(_) => "ewc",
        }
    }

    pub fn strength_or_r(&self) -> f64 {
        match self {
            Method::None | Method::Scratch => 0.0,
            Method::Ppap(p) => p.r,
            Method::Si(s) => s.strength,
            Method::Ewc(e) => e.strength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::None | Method::Scratch => Ok(()),
            Method::Ppap(p) => {
                ActivityAccumulator::new(p.k, p.trigger)?;
                p.blend().map(|_| ())
            }
            Method::Si(s) => {
                if !(s.damping > 0.0) {
                    return Err(Error::config(format!("SI damping must be positive, got {}", s.damping)));
                }
                non_negative("SI strength", s.strength)
            }
            Method::Ewc(e) => {
                if e.samples == 0 {
                    return Err(Error::config("EWC sample size must be >= 1"));
                }
                non_negative("EWC strength", e.strength)
            }
        }
    }
}

fn non_negative(what: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} must be >= 0, got {v}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Applied to image batches only.
    pub augment: Option<AugmentSpec>,
    /// Off by default so that fixed-seed CSVs are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            seed: 0,
            augment: None,
            record_wall_time: false,
        }
    }
}

/// Optional instrumentation for [`train_task`].
#[derive(Default)]
pub struct StepHooks<'a> {
    pub update: Option<&'a mut dyn UpdateHook>,
    pub penalty: Option<&'a ImportanceMap>,
    pub accumulator: Option<&'a mut ActivityAccumulator>,
    pub si: Option<&'a mut SiTracker>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStats {
    pub steps: u64,
    pub last_epoch_loss: f64,
}

fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains `params` on one task with a fresh optimizer. `model` must already
/// route through the task's head. Shuffling, dropout and augmentation draw
/// from a generator determined by `cfg.seed` and `stream` alone.
pub fn train_task(
    model: &ModelSpec,
    params: &mut ParamStore,
    task: &TaskSpec,
    cfg: &TrainConfig,
    stream: u64,
    mut hooks: StepHooks<'_>,
) -> Result<TaskStats> {
    task.validate(model)?;
    model.configure(params)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = task_rng(cfg.seed, stream);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let images = task.train.sample_shape().len() == 3;
    let mut steps = 0;
    let mut last_epoch_loss = f64::NAN;
    'epochs: for _ in 0..task.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(task.batch_size) {
            if hooks.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let mut batch = task.train.batch(chunk);
            if let Some(spec) = cfg.augment.filter(|s| images && !s.is_identity()) {
                batch = augment(&batch, &spec, &mut rng)?;
            }
            let (loss, mut graph) = model.forward(params, &batch, DropoutMode::Sample(&mut rng))?;
            let masks = graph.dropout_masks();
            let loss_grads = graph.backward()?;
            let penalised;
            let grads = match hooks.penalty {
                Some(map) if map.strength() != 0.0 => {
                    let mut g = loss_grads.clone();
                    add_penalty(map, params, &mut g)?;
                    penalised = g;
                    &penalised
                }
                _ => &loss_grads,
            };
            let hook: Option<&mut dyn UpdateHook> = match hooks.update.as_mut() {
                Some(h) => Some(&mut **h),
                None => None,
            };
            let applied = optimizer.step(params, grads, hook)?;
            if let Some(acc) = hooks.accumulator.as_deref_mut() {
                let delta = loss_delta(model, params, &batch, loss, &masks)?;
                acc.observe(delta, &applied, grads)?;
            }
            if let Some(si) = hooks.si.as_deref_mut() {
                si.record(&applied, &loss_grads)?;
            }
            total += loss;
            batches += 1;
            steps += 1;
        }
        last_epoch_loss = total / batches.max(1) as f64;
    }
    Ok(TaskStats {
        steps,
        last_epoch_loss,
    })
}

/// Fraction of `split` whose argmax prediction under `head` is correct.
pub fn evaluate(model: &ModelSpec, params: &ParamStore, split: &Dataset, head: &str) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    let model = model.activate_head(head)?;
    let indices: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(512) {
        let batch = split.batch(chunk);
        let pred = model.predict(params, &batch.inputs)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Distance of (retention, adaptation) from the origin.
pub fn euclidean_score(x: f64, y: f64) -> f64 {
    x.hypot(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub task_id: String,
    pub stage: String,
    pub accuracy: f64,
    pub euclidean_score: Option<f64>,
}

/// Every accuracy measured during one run, plus the retention/adaptation
/// summary when the protocol defines one.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: String,
    pub strength_or_r: f64,
    pub seed: u64,
    pub wall_time_seconds: f64,
    pub measurements: Vec<Measurement>,
    pub retention: Option<f64>,
    pub adaptation: Option<f64>,
}

impl MetricsRecord {
    fn new(method: &Method, seed: u64) -> Self {
        Self {
            run_id: format!("{}-{}-s{}", method.name(), method.strength_or_r(), seed),
            method: method.name().to_string(),
            strength_or_r: method.strength_or_r(),
            seed,
            wall_time_seconds: 0.0,
            measurements: Vec::new(),
            retention: None,
            adaptation: None,
        }
    }

    fn push(&mut self, task_id: &str, stage: &str, accuracy: f64, euclidean: Option<f64>) {
        self.measurements.push(Measurement {
            task_id: task_id.to_string(),
            stage: stage.to_string(),
            accuracy,
            euclidean_score: euclidean,
        });
    }

    fn summarize(&mut self, retention: f64, adaptation: f64) {
        self.retention = Some(retention);
        self.adaptation = Some(adaptation);
    }

    pub fn accuracy(&self, stage: &str, task_id: &str) -> Option<f64> {
        self.measurements
            .iter()
            .find(|m| m.stage == stage && m.task_id == task_id)
            .map(|m| m.accuracy)
    }

    pub fn euclidean_score(&self) -> Option<f64> {
        Some(euclidean_score(self.retention?, self.adaptation?))
    }
}

/// Result of [`run_sequence`]: metrics, the per-task profiles (PPAP only)
/// and the final parameters.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub metrics: MetricsRecord,
    pub profiles: Vec<PlateauProfile>,
    pub params: ParamStore,
}

pub fn final_stage(task: &TaskSpec) -> String {
    format!("after-{}", task.id)
}

fn fisher_sample(train: &Dataset, samples: usize, seed: u64, stream: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    if samples < train.len() {
        idx.shuffle(&mut task_rng(seed, stream));
        idx.truncate(samples);
        idx.sort_unstable();
    }
    train.subset(&idx)
}

const FISHER_STREAM: u64 = 1 << 32;

/// Trains `tasks` in order on one multi-head model. After each task every
/// task seen so far is evaluated on its validation split. With two or more
/// tasks, retention is the mean final accuracy on all but the last task and
/// adaptation is the final accuracy on the last one.
pub fn run_sequence(
    model: &ModelSpec,
    tasks: &[TaskSpec],
    method: &Method,
    cfg: &TrainConfig,
) -> Result<SequenceRun> {
    method.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("a sequence needs at least one task"));
    }
    for task in tasks {
        task.validate(model)?;
    }
    let started = Instant::now();
    let mut metrics = MetricsRecord::new(method, cfg.seed);
    let mut profiles = Vec::new();

    if let Method::Scratch = method {
        let mut params = ParamStore::new();
        for (t, task) in tasks.iter().enumerate() {
            params = model.init_params(cfg.seed.wrapping_add(t as u64));
            let active = model.activate_head(&task.head)?;
            train_task(&active, &mut params, task, cfg, t as u64, StepHooks::default())?;
            metrics.push(&task.id, "scratch", evaluate(model, &params, &task.val, &task.head)?, None);
        }
        if cfg.record_wall_time {
            metrics.wall_time_seconds = started.elapsed().as_secs_f64();
        }
        return Ok(SequenceRun {
            metrics,
            profiles,
            params,
        });
    }

    let mut params = model.init_params(cfg.seed);
    let mut importance: Option<ImportanceMap> = None;
    for (t, task) in tasks.iter().enumerate() {
        let active = model.activate_head(&task.head)?;
        active.configure(&mut params)?;
        let mut accumulator = None;
        let mut ppap_hook = None;
        let mut si = None;
        if let Method::Ppap(p) = method {
            accumulator = Some(ActivityAccumulator::new(p.k, p.trigger)?);
            if !profiles.is_empty() {
                let combined = combine_profiles(&profiles, p.rule, p.default_score as f32)?;
                ppap_hook = Some(make_ppap_hook(Arc::new(combined), p.blend()?));
            }
        }
        if let Method::Si(_) = method {
            si = Some(SiTracker::new(&params));
        }
        let hooks = StepHooks {
            update: ppap_hook.as_mut().map(|h| h as &mut dyn UpdateHook),
            penalty: importance.as_ref(),
            accumulator: accumulator.as_mut(),
            si: si.as_mut(),
            max_steps: None,
        };
        train_task(&active, &mut params, task, cfg, t as u64, hooks)?;

        if let Some(mut acc) = accumulator {
            profiles.push(acc.finalize(&task.id)?);
        }
        let fresh = match method {
            Method::Si(s) => Some(
                si_consolidate(si.as_ref().expect("created above"), &params, s.damping)?
                    .with_strength(s.strength)?,
            ),
            Method::Ewc(e) => {
                let sample = fisher_sample(&task.train, e.samples, cfg.seed, FISHER_STREAM + t as u64);
                Some(ewc_fisher(&active, &params, &sample)?.with_strength(e.strength)?)
            }
            _ => None,
        };
        if let Some(fresh) = fresh {
            match importance.as_mut() {
                Some(total) => total.merge(&fresh)?,
                None => importance = Some(fresh),
            }
        }

        let stage = final_stage(task);
        for seen in &tasks[..=t] {
            let acc = evaluate(model, &params, &seen.val, &seen.head)?;
            metrics.push(&seen.id, &stage, acc, None);
        }
    }

    if let Some((last, earlier)) = tasks.split_last().filter(|(_, e)| !e.is_empty()) {
        let stage = final_stage(last);
        let finals: Vec<f64> = earlier
            .iter()
            .map(|t| metrics.accuracy(&stage, &t.id).expect("recorded above"))
            .collect();
        let retention = finals.iter().sum::<f64>() / finals.len() as f64;
        let adaptation = metrics.accuracy(&stage, &last.id).expect("recorded above");
        metrics.summarize(retention, adaptation);
        let score = Some(euclidean_score(retention, adaptation));
        metrics.push("retention", "final", retention, score);
        metrics.push("adaptation", "final", adaptation, score);
    }
    if cfg.record_wall_time {
        metrics.wall_time_seconds = started.elapsed().as_secs_f64();
    }
    Ok(SequenceRun {
        metrics,
        profiles,
        params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Stop once the epoch loss has not improved by `min_delta` for this
    /// many epochs.
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 10,
            min_delta: 1e-4,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

fn feature_dataset(model: &ModelSpec, params: &ParamStore, split: &Dataset) -> Result<Dataset> {
    let indices: Vec<usize> = (0..split.len()).collect();
    let mut features = Vec::with_capacity(split.len() * model.feature_dim());
    for chunk in indices.chunks(512) {
        let batch = split.batch(chunk);
        features.extend_from_slice(model.features(params, &batch.inputs)?.data());
    }
    Dataset::new(
        vec![model.feature_dim()],
        features,
        split.labels().to_vec(),
        split.num_classes(),
    )
}

/// Retrains a freshly initialised `head` on top of the frozen backbone and
/// returns its accuracy on `val`. `params` is not modified.
///
/// The backbone runs in inference mode, so its features are computed once and
/// the head is fitted as a softmax regression on them.
pub fn linear_probe(
    model: &ModelSpec,
    params: &ParamStore,
    head: &str,
    train: &Dataset,
    val: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let spec = model
        .head(head)
        .ok_or_else(|| Error::UnknownHead(head.to_string()))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("probe needs epochs and batch size >= 1"));
    }
    if train.is_empty() {
        return Err(Error::config("probe needs training data"));
    }
    let train_f = feature_dataset(model, params, train)?;
    let val_f = feature_dataset(model, params, val)?;
    let probe = ModelSpec::new(
        vec![model.feature_dim()],
        Vec::new(),
        vec![HeadSpec::new(head, spec.outputs)],
    )?;
    let mut head_params = probe.init_params(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = task_rng(cfg.seed, 0);
    let mut order: Vec<usize> = (0..train_f.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Batch = train_f.batch(chunk);
            let (loss, mut graph) = probe.forward(&head_params, &batch, DropoutMode::Disabled)?;
            let grads = graph.backward()?;
            optimizer.step(&mut head_params, &grads, None)?;
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        if epoch_loss < best - cfg.min_delta {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    evaluate(&probe, &head_params, &val_f, head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocoConfig {
    pub train: TrainConfig,
    pub k: f64,
    pub trigger: SpikeTrigger,
    pub si_damping: f64,
    pub fisher_samples: usize,
    pub probe: ProbeConfig,
}

impl Default for LocoConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            k: 25.0,
            trigger: SpikeTrigger::Positive,
            si_damping: DEFAULT_SI_DAMPING,
            fisher_samples: DEFAULT_FISHER_SAMPLES,
            probe: ProbeConfig::default(),
        }
    }
}

/// One finetuning outcome: probed pretrain accuracy `x` and finetune
/// accuracy `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocoPoint {
    pub x: f64,
    pub y: f64,
}

impl LocoPoint {
    pub fn euclidean_score(&self) -> f64 {
        euclidean_score(self.x, self.y)
    }
}

/// The three reference values a LOCO plot is read against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocoReferences {
    /// Pretrain validation accuracy at the end of pretraining.
    pub pretrain_end: f64,
    /// Probed pretrain accuracy after plain finetuning.
    pub degraded: f64,
    /// Finetune accuracy after plain finetuning.
    pub finetune_end: f64,
}

/// A pretrained model shared by every method finetuned from it. The PPAP
/// profile, SI path integral and Fisher diagonal are all collected during the
/// single pretraining run; none of them changes the trajectory.
#[derive(Debug, Clone)]
pub struct LocoSession {
    model: ModelSpec,
    pretrain: TaskSpec,
    finetune: TaskSpec,
    cfg: LocoConfig,
    pretrained: ParamStore,
    pretrain_accuracy: f64,
    profile: Arc<PlateauProfile>,
    si: ImportanceMap,
    fisher: Option<ImportanceMap>,
    baseline: Option<LocoPoint>,
}

impl LocoSession {
    pub fn pretrain(model: &ModelSpec, pretrain: TaskSpec, finetune: TaskSpec, cfg: LocoConfig) -> Result<Self> {
        pretrain.validate(model)?;
        finetune.validate(model)?;
        if pretrain.head == finetune.head {
            return Err(Error::config("pretrain and finetune tasks must use different heads"));
        }
        let mut params = model.init_params(cfg.train.seed);
        let active = model.activate_head(&pretrain.head)?;
        active.configure(&mut params)?;
        let mut acc = ActivityAccumulator::new(cfg.k, cfg.trigger)?;
        let mut tracker = SiTracker::new(&params);
        train_task(
            &active,
            &mut params,
            &pretrain,
            &cfg.train,
            0,
            StepHooks {
                accumulator: Some(&mut acc),
                si: Some(&mut tracker),
                ..StepHooks::default()
            },
        )?;
        let profile = Arc::new(acc.finalize(&pretrain.id)?);
        let si = si_consolidate(&tracker, &params, cfg.si_damping)?;
        let pretrain_accuracy = evaluate(model, &params, &pretrain.val, &pretrain.head)?;
        Ok(Self {
            model: model.clone(),
            pretrain,
            finetune,
            cfg,
            pretrained: params,
            pretrain_accuracy,
            profile,
            si,
            fisher: None,
            baseline: None,
        })
    }

    pub fn pretrained(&self) -> &ParamStore {
        &self.pretrained
    }

    pub fn profile(&self) -> &PlateauProfile {
        &self.profile
    }

    pub fn pretrain_accuracy(&self) -> f64 {
        self.pretrain_accuracy
    }

    fn fisher(&mut self) -> Result<&ImportanceMap> {
        if self.fisher.is_none() {
            let active = self.model.activate_head(&self.pretrain.head)?;
            let sample = fisher_sample(
                &self.pretrain.train,
                self.cfg.fisher_samples,
                self.cfg.train.seed,
                FISHER_STREAM,
            );
            self.fisher = Some(ewc_fisher(&active, &self.pretrained, &sample)?);
        }
        Ok(self.fisher.as_ref().expect("set above"))
    }

    /// Finetunes a copy of the pretrained parameters with `method`, then
    /// probes the pretrain head.
    pub fn finetune(&mut self, method: &Method) -> Result<LocoPoint> {
        method.validate()?;
        let mut params = self.pretrained.clone();
        let active = self.model.activate_head(&self.finetune.head)?;
        active.configure(&mut params)?;
        let mut ppap_hook = None;
        let mut penalty = None;
        match method {
            Method::None => {}
            Method::Scratch => {
                return Err(Error::config("training from scratch is not a finetuning method"));
            }
            Method::Ppap(p) => ppap_hook = Some(make_ppap_hook(self.profile.clone(), p.blend()?)),
            Method::Si(s) => {
                let mut map = self.si.clone();
                if s.damping != self.cfg.si_damping {
                    return Err(Error::config("SI damping is fixed by the session"));
                }
                map = map.with_strength(s.strength)?;
                penalty = Some(map);
            }
            Method::Ewc(e) => penalty = Some(self.fisher()?.clone().with_strength(e.strength)?),
        }
        let hooks = StepHooks {
            update: ppap_hook.as_mut().map(|h| h as &mut dyn UpdateHook),
            penalty: penalty.as_ref(),
            ..StepHooks::default()
        };
        train_task(&active, &mut params, &self.finetune, &self.cfg.train, 1, hooks)?;
        let y = evaluate(&self.model, &params, &self.finetune.val, &self.finetune.head)?;
        let x = linear_probe(
            &self.model,
            &params,
            &self.pretrain.head,
            &self.pretrain.train,
            &self.pretrain.val,
            &self.cfg.probe,
        )?;
        Ok(LocoPoint { x, y })
    }

    pub fn references(&mut self) -> Result<LocoReferences> {
        let base = match self.baseline {
            Some(b) => b,
            None => {
                let b = self.finetune(&Method::None)?;
                self.baseline = Some(b);
                b
            }
        };
        Ok(LocoReferences {
            pretrain_end: self.pretrain_accuracy,
            degraded: base.x,
            finetune_end: base.y,
        })
    }

    /// Finetunes with `method` and packages the point with the references.
    pub fn run(&mut self, method: &Method) -> Result<MetricsRecord> {
        let started = Instant::now();
        let refs = self.references()?;
        let point = match method {
            Method::None => self.baseline.expect("computed by references"),
            m => self.finetune(m)?,
        };
        let mut m = MetricsRecord::new(method, self.cfg.train.seed);
        let (pre, fine) = (self.pretrain.id.clone(), self.finetune.id.clone());
        m.push(&pre, "reference-pretrain-end", refs.pretrain_end, None);
        m.push(&pre, "reference-degraded", refs.degraded, None);
        m.push(&fine, "reference-finetune-end", refs.finetune_end, None);
        m.push(&fine, "finetune", point.y, None);
        m.push(&pre, "probe", point.x, Some(point.euclidean_score()));
        m.summarize(point.x, point.y);
        if self.cfg.train.record_wall_time {
            m.wall_time_seconds = started.elapsed().as_secs_f64();
        }
        Ok(m)
    }
}

/// Pretrains, finetunes with `method` and probes.
pub fn run_loco(
    model: &ModelSpec,
    pretrain: TaskSpec,
    finetune: TaskSpec,
    method: &Method,
    cfg: LocoConfig,
) -> Result<MetricsRecord> {
    LocoSession::pretrain(model, pretrain, finetune, cfg)?.run(method)
}

pub const CSV_HEADER: [&str; 9] = [
    "run-id",
    "method",
    "strength-or-r",
    "task-id",
    "stage",
    "accuracy",
    "euclidean-score",
    "seed",
    "wall-time-seconds",
];

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "run-id")]
    pub run_id: String,
    pub method: String,
    #[serde(rename = "strength-or-r")]
    pub strength_or_r: f64,
    #[serde(rename = "task-id")]
    pub task_id: String,
    pub stage: String,
    pub accuracy: f64,
    #[serde(rename = "euclidean-score")]
    pub euclidean_score: Option<f64>,
    pub seed: u64,
    #[serde(rename = "wall-time-seconds")]
    pub wall_time_seconds: f64,
}

impl MetricsRecord {
    pub fn rows(&self) -> impl Iterator<Item = MetricsRow> + '_ {
        self.measurements.iter().map(move |m| MetricsRow {
            run_id: self.run_id.clone(),
            method: self.method.clone(),
            strength_or_r: self.strength_or_r,
            task_id: m.task_id.clone(),
            stage: m.stage.clone(),
            accuracy: m.accuracy,
            euclidean_score: m.euclidean_score,
            seed: self.seed,
            wall_time_seconds: self.wall_time_seconds,
        })
    }
}

pub fn write_metrics_csv<'a, W: Write>(
    out: W,
    records: impl IntoIterator<Item = &'a MetricsRecord>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for record in records {
        for row in record.rows() {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_csv_bytes<'a>(records: impl IntoIterator<Item = &'a MetricsRecord>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records)?;
    Ok(buf)
}

/// Parses a metrics CSV, rejecting files whose header differs from
/// [`CSV_HEADER`] or that contain no rows.
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::config(format!(
            "metrics CSV header {header:?} does not match {CSV_HEADER:?}"
        )));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    if rows.is_empty() {
        return Err(Error::config("metrics CSV has no rows"));
    }
    Ok(rows)
}
