//! Comparator methods: naive fine-tuning, joint source+target training and
//! LwF-style distillation on a binary head, plus a small registry so other
//! methods can be plugged into the same harness.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{sample_batch, Batch, DatasetManifest, SampleStore};
use crate::error::{Error, Result};
use crate::eval::{HeadModel, Scorer};
use crate::model::{build_toy_fas_model, original_loss_var, BinaryHead, FasModel, ModelConfig, Role, SPOOF_CLASS};
use crate::params::Adam;
use crate::train::{batch_targets, fit_original_loss, non_finite, EpochAccumulator, EpochLog, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NaiveFt,
    Joint,
    Lwf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::NaiveFt => "naive_ft",
            Method::Joint => "joint",
            Method::Lwf => "lwf",
        }
    }

    pub fn source_free(self) -> bool {
        self != Method::Joint
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive_ft" => Ok(Method::NaiveFt),
            "joint" => Ok(Method::Joint),
            "lwf" => Ok(Method::Lwf),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Fine-tunes a copy of `source` on `L_Orig` over target data only.
pub fn naive_finetune(
    source: &FasModel,
    target_train: &DatasetManifest,
    store: &dyn SampleStore,
    schedule: &Schedule,
) -> Result<(FasModel, Vec<EpochLog>)> {
    let mut model = source.clone().with_role(Role::TargetTeacher);
    let log = fit_original_loss(&mut model, target_train, store, schedule)?;
    Ok((model, log))
}

/// Trains from scratch on source and target together; each batch is half
/// source, half target. Needs source data, so it is only an upper bound.
pub fn joint_train(
    config: &ModelConfig,
    init_seed: u64,
    source_train: Option<&DatasetManifest>,
    target_train: &DatasetManifest,
    store: &dyn SampleStore,
    schedule: &Schedule,
) -> Result<(FasModel, Vec<EpochLog>)> {
    let source_train = source_train
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::Config("joint training needs the source training manifest".into()))?;
    let mut model = build_toy_fas_model(config.clone(), init_seed)?;
    if target_train.is_empty() {
        let log = fit_original_loss(&mut model, source_train, store, schedule)?;
        return Ok((model, log));
    }
    schedule.validate()?;
    let mut rng = schedule.rng(1);
    let mut opt = Adam::new(schedule.lr);
    let steps = schedule.steps(source_train.len() + target_train.len());
    let half = schedule.batch_size / 2;
    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut acc = EpochAccumulator::default();
        for step in 0..steps {
            let mut batch = sample_batch(source_train, half, schedule.live_fraction, &mut rng)?;
            let t = sample_batch(target_train, schedule.batch_size - half, schedule.live_fraction, &mut rng)?;
            batch.samples.extend(t.samples);
            let images = batch.images(store)?;
            model.check_input(&images)?;
            let targets = batch_targets(&model, &batch);
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let out = model.forward(&p, tape.constant(images.into_dyn()), None);
            let loss = original_loss_var(out.depth, out.live_logit, &targets);
            let value = loss.item();
            if !value.is_finite() {
                return Err(non_finite(epoch, step, schedule.diagnostics_dir.as_deref(), &[("model", &model.params)]));
            }
            let grads = p.grads(&tape.backward(loss));
            opt.step(&mut model.params, &grads);
            acc.add("l_orig", value);
            acc.end_step();
        }
        log.push(acc.finish(epoch, opt.lr));
        opt.decay(schedule.lr_decay);
    }
    Ok((model, log))
}

fn class_targets(batch: &Batch) -> Vec<usize> {
    batch
        .samples
        .iter()
        .map(|s| if s.label.is_spoof() { SPOOF_CLASS } else { 1 - SPOOF_CLASS })
        .collect()
}

/// Records mean cross-entropy of `[N, 2]` log-probabilities.
fn cross_entropy_var<'t>(logp: Var<'t>, classes: &[usize]) -> Var<'t> {
    let n = classes.len();
    let onehot = Array2::from_shape_fn((n, 2), |(i, c)| if classes[i] == c { 1.0 } else { 0.0 });
    let t = logp.tape().constant(onehot.into_dyn());
    logp.mul(t).sum().scale(-1.0 / n as f64)
}

fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits / temperature;
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Records mean over rows of `KL(softmax(src / T) ‖ softmax(student / T))`.
pub fn distillation_var<'t>(student_logits: Var<'t>, source_logits: &Array2<f64>, temperature: f64) -> Var<'t> {
    let p = softmax_rows(source_logits, temperature);
    let n = p.nrows();
    let entropy_term: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let tape = student_logits.tape();
    let logq = student_logits.scale(1.0 / temperature).log_softmax();
    let cross = logq.mul(tape.constant(p.into_dyn())).sum();
    cross.scale(-1.0).add_scalar(entropy_term).scale(1.0 / n as f64)
}

/// Mean KL divergence between softened source and student distributions.
pub fn distillation_loss(student_logits: &Array2<f64>, source_logits: &Array2<f64>, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if student_logits.dim() != source_logits.dim() {
        return Err(Error::Input("logit batches differ in shape".into()));
    }
    let tape = Tape::new();
    let s = tape.constant(student_logits.clone().into_dyn());
    Ok(distillation_var(s, source_logits, temperature).item())
}

fn head_logits(backbone: &FasModel, head: &BinaryHead, images: &ndarray::Array4<f64>) -> Array2<f64> {
    let tape = Tape::new();
    let bp = backbone.params.bind(&tape, false);
    let hp = head.params.bind(&tape, false);
    let pyr = backbone.extract(&bp, tape.constant(images.clone().into_dyn()));
    head.logits(&hp, *pyr.last().unwrap())
        .value()
        .as_ref()
        .clone()
        .into_dimensionality()
        .unwrap()
}

/// Trains only the head on a frozen backbone with cross-entropy.
pub fn train_head(
    backbone: &FasModel,
    mut head: BinaryHead,
    manifest: &DatasetManifest,
    store: &dyn SampleStore,
    schedule: &Schedule,
) -> Result<(BinaryHead, Vec<EpochLog>)> {
    schedule.validate()?;
    let mut rng = schedule.rng(3);
    let mut opt = Adam::new(schedule.lr);
    let steps = schedule.steps(manifest.len());
    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut acc = EpochAccumulator::default();
        for step in 0..steps {
            let batch = sample_batch(manifest, schedule.batch_size, schedule.live_fraction, &mut rng)?;
            let images = batch.images(store)?;
            backbone.check_input(&images)?;
            let pyramid = backbone.extract_features(&images)?;
            let tape = Tape::new();
            let hp = head.params.bind(&tape, true);
            let last = tape.constant(pyramid.levels.last().unwrap().clone().into_dyn());
            let loss = cross_entropy_var(head.logits(&hp, last).log_softmax(), &class_targets(&batch));
            let value = loss.item();
            if !value.is_finite() {
                return Err(non_finite(epoch, step, schedule.diagnostics_dir.as_deref(), &[("head", &head.params)]));
            }
            let grads = hp.grads(&tape.backward(loss));
            opt.step(&mut head.params, &grads);
            acc.add("l_ce", value);
            acc.end_step();
        }
        log.push(acc.finish(epoch, opt.lr));
        opt.decay(schedule.lr_decay);
    }
    Ok((head, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LwfConfig {
    pub schedule: Schedule,
    pub temperature: f64,
    pub distill_weight: f64,
}

impl Default for LwfConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            temperature: 2.0,
            distill_weight: 1.0,
        }
    }
}

/// Fine-tunes backbone and head on target data with cross-entropy plus a
/// distillation term towards the frozen source backbone and head.
pub fn lwf_distill(
    source: &FasModel,
    source_head: &BinaryHead,
    target_train: &DatasetManifest,
    store: &dyn SampleStore,
    config: &LwfConfig,
) -> Result<(HeadModel, Vec<EpochLog>)> {
    if config.temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", config.temperature)));
    }
    if !(config.distill_weight >= 0.0) {
        return Err(Error::Config("distill_weight must be >= 0".into()));
    }
    let schedule = &config.schedule;
    schedule.validate()?;
    let mut student = HeadModel {
        backbone: source.clone().with_role(Role::Student),
        head: source_head.clone(),
    };
    let mut rng = schedule.rng(1);
    let mut opt_backbone = Adam::new(schedule.lr);
    let mut opt_head = Adam::new(schedule.lr);
    let steps = schedule.steps(target_train.len());
    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut acc = EpochAccumulator::default();
        for step in 0..steps {
            let batch = sample_batch(target_train, schedule.batch_size, schedule.live_fraction, &mut rng)?;
            let images = batch.images(store)?;
            source.check_input(&images)?;
            let source_logits = head_logits(source, source_head, &images);
            let tape = Tape::new();
            let bp = student.backbone.params.bind(&tape, true);
            let hp = student.head.params.bind(&tape, true);
            let pyr = student.backbone.extract(&bp, tape.constant(images.into_dyn()));
            let logits = student.head.logits(&hp, *pyr.last().unwrap());
            let ce = cross_entropy_var(logits.log_softmax(), &class_targets(&batch));
            let kl = distillation_var(logits, &source_logits, config.temperature);
            acc.add("l_ce", ce.item());
            acc.add("l_distill", kl.item());
            let total = ce.add(kl.scale(config.distill_weight));
            let value = total.item();
            acc.add("total", value);
            if !value.is_finite() {
                return Err(non_finite(
                    epoch,
                    step,
                    schedule.diagnostics_dir.as_deref(),
                    &[("backbone", &student.backbone.params), ("head", &student.head.params)],
                ));
            }
            let grads = tape.backward(total);
            opt_backbone.step(&mut student.backbone.params, &bp.grads(&grads));
            opt_head.step(&mut student.head.params, &hp.grads(&grads));
            acc.end_step();
        }
        log.push(acc.finish(epoch, opt_backbone.lr));
        opt_backbone.decay(schedule.lr_decay);
        opt_head.decay(schedule.lr_decay);
    }
    Ok((student, log))
}

/// Result of a baseline run; scored through [`Scorer`].
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Sce(FasModel),
    Head(HeadModel),
}

impl Scorer for TrainedModel {
    fn spoof_scores(&self, images: &ndarray::Array4<f64>) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Sce(m) => Scorer::spoof_scores(m, images),
            TrainedModel::Head(h) => h.spoof_scores(images),
        }
    }
}

/// Inputs available to a baseline. `source_train` is only set for methods
/// that declare themselves not source-free.
pub struct BaselineContext<'a> {
    pub model_config: &'a ModelConfig,
    pub source: Option<&'a FasModel>,
    pub source_head: Option<&'a BinaryHead>,
    pub source_train: Option<&'a DatasetManifest>,
    pub target_train: &'a DatasetManifest,
    pub store: &'a dyn SampleStore,
    pub schedule: &'a Schedule,
    pub lwf: &'a LwfConfig,
    pub seed: u64,
}

impl BaselineContext<'_> {
    fn source(&self) -> Result<&FasModel> {
        self.source.ok_or_else(|| Error::Config("this method needs a source checkpoint".into()))
    }
}

pub trait BaselineMethod {
    fn name(&self) -> &str;
    fn source_free(&self) -> bool;
    fn run(&self, ctx: &BaselineContext) -> Result<(TrainedModel, Vec<EpochLog>)>;
}

struct Builtin(Method);

impl BaselineMethod for Builtin {
    fn name(&self) -> &str {
        self.0.as_str()
    }

    fn source_free(&self) -> bool {
        self.0.source_free()
    }

    fn run(&self, ctx: &BaselineContext) -> Result<(TrainedModel, Vec<EpochLog>)> {
        match self.0 {
            Method::NaiveFt => {
                let (m, log) = naive_finetune(ctx.source()?, ctx.target_train, ctx.store, ctx.schedule)?;
                Ok((TrainedModel::Sce(m), log))
            }
            Method::Joint => {
                let (m, log) = joint_train(
                    ctx.model_config,
                    ctx.seed,
                    ctx.source_train,
                    ctx.target_train,
                    ctx.store,
                    ctx.schedule,
                )?;
                Ok((TrainedModel::Sce(m), log))
            }
            Method::Lwf => {
                let head = ctx
                    .source_head
                    .ok_or_else(|| Error::Config("lwf needs a trained binary head checkpoint".into()))?;
                let lwf = LwfConfig {
                    schedule: ctx.schedule.clone(),
                    ..ctx.lwf.clone()
                };
                let (m, log) = lwf_distill(ctx.source()?, head, ctx.target_train, ctx.store, &lwf)?;
                Ok((TrainedModel::Head(m), log))
            }
        }
    }
}

pub struct MethodRegistry {
    methods: BTreeMap<String, Box<dyn BaselineMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self { methods: BTreeMap::new() };
        for m in [Method::NaiveFt, Method::Joint, Method::Lwf] {
            r.register(Box::new(Builtin(m)));
        }
        r
    }
}

impl MethodRegistry {
    pub fn register(&mut self, method: Box<dyn BaselineMethod>) {
        self.methods.insert(method.name().to_string(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn BaselineMethod> {
        self.methods
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.methods.keys().map(String::as_str).collect()
    }
}

/// Row-wise log-softmax of a logit matrix, for oracles and reports.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let m = logits.map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    let shifted = logits - &m.insert_axis(Axis(1));
    let lse: Array1<f64> = shifted.map_axis(Axis(1), |r| r.mapv(f64::exp).sum().ln());
    shifted - &lse.insert_axis(Axis(1))
}
