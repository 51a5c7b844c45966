//! FAS-wrapper: chained multi-scale discriminators, the adversarial and
//! spoof-consistency losses, stage-2 dual-teacher training, the
//! cross-dataset multi-teacher variant, and the exported inference model.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_channels, resize, sigmoid, Tape, Tensor, Var};
use crate::data::{sample_batch, DatasetManifest, Image, SampleStore};
use crate::error::{Error, Result};
use crate::model::{original_loss_var, FasModel, FeaturePyramid, ModelConfig, Role};
use crate::params::{he_normal, Adam, Bound, ParamStore};
use crate::sre::{masks_from_tensor, Sre, SpoofMask};
use crate::train::{batch_targets, non_finite, EpochAccumulator, EpochLog, Schedule};

/// Lower clamp of discriminator probabilities.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    /// Separate `Dis^S`, `Dis^T`, each chained across levels.
    #[default]
    Chained,
    /// One chained discriminator serves both teachers.
    Shared,
    /// All levels resized to the first grid, concatenated, one block.
    SingleConcat,
}

impl FromStr for DiscMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chained" => Ok(Self::Chained),
            "shared" => Ok(Self::Shared),
            "single_concat" => Ok(Self::SingleConcat),
            other => Err(Error::Config(format!("unknown disc_mode `{other}`"))),
        }
    }
}

impl DiscMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Chained => "chained",
            Self::Shared => "shared",
            Self::SingleConcat => "single_concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub mode: DiscMode,
    /// Output channels of every level block.
    pub hidden: usize,
    pub leaky_slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            mode: DiscMode::Chained,
            hidden: 8,
            leaky_slope: 0.1,
        }
    }
}

/// Per-level blocks `disc.level{l}` (3×3 stride-2 conv + leaky ReLU) and the
/// final `disc.fc` affine map on the pooled last activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleDiscriminator {
    pub config: DiscConfig,
    pub level_channels: Vec<usize>,
    pub params: ParamStore,
}

pub struct DiscriminatorOutputs {
    /// Activation of every block, `[N, hidden, ·, ·]`.
    pub levels: Vec<Array4<f64>>,
    /// `[N]`, inside `[ε, 1 − ε]`.
    pub final_prob: Array1<f64>,
}

impl MultiScaleDiscriminator {
    pub fn new(config: DiscConfig, level_channels: &[usize], seed: u64) -> Result<Self> {
        if level_channels.is_empty() || level_channels.contains(&0) || config.hidden == 0 {
            return Err(Error::Config("discriminator needs non-empty positive channel counts".into()));
        }
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let inputs: Vec<usize> = match config.mode {
            DiscMode::SingleConcat => vec![level_channels.iter().sum()],
            _ => level_channels
                .iter()
                .enumerate()
                .map(|(l, &c)| if l == 0 { c } else { c + h })
                .collect(),
        };
        for (l, &c) in inputs.iter().enumerate() {
            params.insert(format!("disc.level{l}.weight"), he_normal(&mut rng, &[h, c, 3, 3], c * 9));
            params.insert(format!("disc.level{l}.bias"), Tensor::zeros(ndarray::IxDyn(&[h])));
        }
        params.insert("disc.fc.weight", he_normal(&mut rng, &[1, h], h).mapv(|v| v * 0.5));
        params.insert("disc.fc.bias", Tensor::zeros(ndarray::IxDyn(&[1])));
        Ok(Self {
            config,
            level_channels: level_channels.to_vec(),
            params,
        })
    }

    pub fn num_blocks(&self) -> usize {
        match self.config.mode {
            DiscMode::SingleConcat => 1,
            _ => self.level_channels.len(),
        }
    }

    /// Records the chain; returns block activations and `[N]` probabilities.
    pub fn forward<'t>(&self, p: &Bound<'t>, pyramid: &[Var<'t>]) -> (Vec<Var<'t>>, Var<'t>) {
        let slope = self.config.leaky_slope;
        let block = |l: usize, x: Var<'t>| {
            x.conv2d(p.get(&format!("disc.level{l}.weight")), p.get(&format!("disc.level{l}.bias")), 2, 1)
                .leaky_relu(slope)
        };
        let mut acts: Vec<Var<'t>> = Vec::with_capacity(pyramid.len());
        match self.config.mode {
            DiscMode::SingleConcat => {
                let s = pyramid[0].shape();
                let parts: Vec<Var<'t>> = pyramid.iter().map(|&f| resize(f, s[2], s[3])).collect();
                acts.push(block(0, concat_channels(&parts)));
            }
            _ => {
                for (l, &f) in pyramid.iter().enumerate() {
                    let input = match acts.last() {
                        None => f,
                        Some(&prev) => {
                            let s = f.shape();
                            concat_channels(&[f, resize(prev, s[2], s[3])])
                        }
                    };
                    acts.push(block(l, input));
                }
            }
        }
        let logit = acts
            .last()
            .unwrap()
            .global_avg_pool()
            .linear(p.get("disc.fc.weight"), p.get("disc.fc.bias"));
        let n = logit.shape()[0];
        let prob = logit.reshape(&[n]).sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
        (acts, prob)
    }

    pub fn check_pyramid(&self, channels: &[usize]) -> Result<()> {
        if channels != self.level_channels.as_slice() {
            return Err(Error::Config(format!(
                "pyramid channels {channels:?} do not match discriminator chain {:?}",
                self.level_channels
            )));
        }
        Ok(())
    }
}

pub fn disc_forward_chain(disc: &MultiScaleDiscriminator, pyramid: &FeaturePyramid) -> Result<DiscriminatorOutputs> {
    let channels: Vec<usize> = pyramid.levels.iter().map(|l| l.dim().1).collect();
    disc.check_pyramid(&channels)?;
    let tape = Tape::new();
    let p = disc.params.bind(&tape, false);
    let levels: Vec<Var> = pyramid.levels.iter().map(|l| tape.constant(l.clone().into_dyn())).collect();
    let (acts, prob) = disc.forward(&p, &levels);
    Ok(DiscriminatorOutputs {
        levels: acts
            .iter()
            .map(|a| a.value().as_ref().clone().into_dimensionality().unwrap())
            .collect(),
        final_prob: prob.value().as_ref().clone().into_dimensionality().unwrap(),
    })
}

/// Records `−mean ln d_teacher − mean ln(1 − d_student)`.
pub fn generator_loss_var<'t>(d_teacher: Var<'t>, d_student: Var<'t>) -> Var<'t> {
    d_teacher
        .ln()
        .mean()
        .add(d_student.rsub_scalar(1.0).ln().mean())
        .scale(-1.0)
}

/// Records `−mean ln(1 − d_teacher) − mean ln d_student`.
pub fn discriminator_loss_var<'t>(d_teacher: Var<'t>, d_student: Var<'t>) -> Var<'t> {
    d_teacher
        .rsub_scalar(1.0)
        .ln()
        .mean()
        .add(d_student.ln().mean())
        .scale(-1.0)
}

/// `(generator_loss, discriminator_loss)` for one teacher side.
pub fn adversarial_losses(d_teacher: &[f64], d_student: &[f64]) -> Result<(f64, f64)> {
    if d_teacher.is_empty() || d_student.is_empty() {
        return Err(Error::Input("empty probability batch".into()));
    }
    let lo = PROB_EPS * (1.0 - 1e-9);
    let hi = 1.0 - lo;
    if let Some(p) = d_teacher.iter().chain(d_student).find(|p| !(lo..=hi).contains(*p)) {
        return Err(Error::Numerical(format!("probability {p} outside [ε, 1 − ε]")));
    }
    let tape = Tape::new();
    let t = tape.constant(Array1::from(d_teacher.to_vec()).into_dyn());
    let s = tape.constant(Array1::from(d_student.to_vec()).into_dyn());
    Ok((generator_loss_var(t, s).item(), discriminator_loss_var(t, s).item()))
}

/// Records `L_Spoof` = mean `|M_new − M_src|`.
pub fn spoof_consistency_var<'t>(m_new: Var<'t>, m_src: Var<'t>) -> Var<'t> {
    m_new.sub(m_src).abs().mean()
}

pub fn spoof_consistency_loss(m_new: &SpoofMask, m_src: &SpoofMask) -> Result<f64> {
    if m_new.soft.dim() != m_src.soft.dim() {
        return Err(Error::Config(format!(
            "mask resolutions differ: {:?} vs {:?}",
            m_new.soft.dim(),
            m_src.soft.dim()
        )));
    }
    Ok((&m_new.soft - &m_src.soft).mapv(f64::abs).mean().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub orig: f64,
    pub spoof: f64,
    pub source_adv: f64,
    pub target_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            orig: 1.0,
            spoof: 1.0,
            source_adv: 0.1,
            target_adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(orig: f64, spoof: f64, source_adv: f64, target_adv: f64) -> Result<Self> {
        let w = Self {
            orig,
            spoof,
            source_adv,
            target_adv,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.orig, self.spoof, self.source_adv, self.target_adv]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {:?}", self.as_array())));
        }
        Ok(())
    }
}

impl FromStr for LossWeights {
    type Err = Error;
    /// Parses `"l1,l2,l3,l4"`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad lambdas `{s}`: {e}")))?;
        match v.as_slice() {
            &[a, b, c, d] => Self::new(a, b, c, d),
            _ => Err(Error::Config(format!("expected four lambdas, got `{s}`"))),
        }
    }
}

/// `λ1·L_Orig + λ2·L_Spoof + λ3·L_S + λ4·L_T`.
pub fn total_loss(l_orig: f64, l_spoof: f64, l_s: f64, l_t: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if ![l_orig, l_spoof, l_s, l_t].iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite loss component".into()));
    }
    Ok(w.orig * l_orig + w.spoof * l_spoof + w.source_adv * l_s + w.target_adv * l_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub schedule: Schedule,
    pub weights: LossWeights,
    /// Discriminator learning rate; defaults to the student's.
    pub disc_lr: Option<f64>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                lr: 1e-6,
                epochs: 10,
                ..Schedule::default()
            },
            weights: LossWeights::default(),
            disc_lr: None,
        }
    }
}

/// `Dis^S` and `Dis^T`; in shared mode `target` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct WrapperDiscriminators {
    pub source: MultiScaleDiscriminator,
    pub target: Option<MultiScaleDiscriminator>,
}

impl WrapperDiscriminators {
    pub fn new(config: DiscConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        let source = MultiScaleDiscriminator::new(config.clone(), &model.channels, seed)?;
        let target = match config.mode {
            DiscMode::Shared => None,
            _ => Some(MultiScaleDiscriminator::new(config, &model.channels, seed.wrapping_add(1))?),
        };
        Ok(Self { source, target })
    }

    pub fn target(&self) -> &MultiScaleDiscriminator {
        self.target.as_ref().unwrap_or(&self.source)
    }

    fn as_vec(&self) -> Vec<MultiScaleDiscriminator> {
        std::iter::once(self.source.clone()).chain(self.target.clone()).collect()
    }
}

pub struct Stage2Output {
    pub student: FasModel,
    pub discriminators: WrapperDiscriminators,
    pub log: Vec<EpochLog>,
    /// Content hashes of the frozen stores, identical before and after.
    pub frozen_hashes: Vec<(String, String)>,
}

/// One adversarial teacher term.
struct TeacherTerm<'a> {
    label: String,
    teacher: &'a FasModel,
    disc: usize,
    weight: f64,
    gen_name: String,
    disc_name: String,
}

struct AdversarialRun<'a> {
    terms: Vec<TeacherTerm<'a>>,
    discs: Vec<MultiScaleDiscriminator>,
    sre: Option<&'a Sre>,
    orig_weight: f64,
    spoof_weight: f64,
    schedule: &'a Schedule,
    disc_lr: f64,
}

fn constant_pyramid<'t>(tape: &'t Tape, pyramid: &FeaturePyramid) -> Vec<Var<'t>> {
    pyramid.levels.iter().map(|l| tape.constant(l.clone().into_dyn())).collect()
}

fn frozen_hashes(terms: &[TeacherTerm], sre: Option<&Sre>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = terms
        .iter()
        .map(|t| (t.label.clone(), t.teacher.params.content_hash()))
        .collect();
    if let Some(sre) = sre {
        out.push(("sre".into(), sre.params.content_hash()));
    }
    out
}

fn run_adversarial(
    student: &mut FasModel,
    run: &mut AdversarialRun,
    manifest: &DatasetManifest,
    store: &dyn SampleStore,
) -> Result<(Vec<EpochLog>, Vec<(String, String)>)> {
    let schedule = run.schedule;
    schedule.validate()?;
    for t in &run.terms {
        if t.teacher.config != student.config {
            return Err(Error::Config("teacher and student configurations differ".into()));
        }
        run.discs[t.disc].check_pyramid(&student.config.channels)?;
    }
    if let Some(sre) = run.sre {
        if sre.level_channels != student.config.channels {
            return Err(Error::Config("SRE was built for a different pyramid".into()));
        }
    }
    let before = frozen_hashes(&run.terms, run.sre);
    let mut rng = schedule.rng(2);
    let mut opt_student = Adam::new(schedule.lr);
    let mut opt_discs: Vec<Adam> = run.discs.iter().map(|_| Adam::new(run.disc_lr)).collect();
    let steps = schedule.steps(manifest.len());
    let mut log = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        let mut acc = EpochAccumulator::default();
        for step in 0..steps {
            let batch = sample_batch(manifest, schedule.batch_size, schedule.live_fraction, &mut rng)?;
            let images = batch.images(store)?;
            student.check_input(&images)?;
            let targets = batch_targets(student, &batch);
            let teacher_pyramids: Vec<FeaturePyramid> = run
                .terms
                .iter()
                .map(|t| t.teacher.extract_features(&images))
                .collect::<Result<_>>()?;

            // Discriminator step on the detached student pyramid.
            let student_pyramid = student.extract_features(&images)?;
            {
                let tape = Tape::new();
                let bound: Vec<Bound> = run.discs.iter().map(|d| d.params.bind(&tape, true)).collect();
                let sp = constant_pyramid(&tape, &student_pyramid);
                let mut total: Option<Var> = None;
                for (t, pyr) in run.terms.iter().zip(&teacher_pyramids) {
                    let disc = &run.discs[t.disc];
                    let (_, d_teacher) = disc.forward(&bound[t.disc], &constant_pyramid(&tape, pyr));
                    let (_, d_student) = disc.forward(&bound[t.disc], &sp);
                    let l = discriminator_loss_var(d_teacher, d_student);
                    acc.add(&t.disc_name, l.item());
                    total = Some(match total {
                        None => l,
                        Some(acc_l) => acc_l.add(l),
                    });
                }
                let total = total.unwrap();
                if !total.item().is_finite() {
                    return Err(diagnose(epoch, step, schedule, student, &run.discs));
                }
                let grads = tape.backward(total);
                for ((disc, opt), b) in run.discs.iter_mut().zip(&mut opt_discs).zip(&bound) {
                    opt.step(&mut disc.params, &b.grads(&grads));
                }
            }

            // Student step with teachers, SRE and discriminators frozen.
            let tape = Tape::new();
            let p = student.params.bind(&tape, true);
            let sre_bound = run.sre.map(|s| s.params.bind(&tape, false));
            let out = student.forward(&p, tape.constant(images.clone().into_dyn()), run.sre.zip(sre_bound.as_ref()));
            let l_orig = original_loss_var(out.depth, out.live_logit, &targets);
            acc.add("l_orig", l_orig.item());
            let mut total = l_orig.scale(run.orig_weight);
            if let (Some(sre), Some(m_new)) = (run.sre, out.mask) {
                if run.spoof_weight > 0.0 {
                    // Source masks come from the first term's teacher, f^S.
                    let src = &teacher_pyramids[0];
                    sre.check_pyramid(src)?;
                    let sb = sre_bound.as_ref().unwrap();
                    let m_src = sre.forward(sb, &constant_pyramid(&tape, src)).detach();
                    let l_spoof = spoof_consistency_var(m_new, m_src);
                    acc.add("l_spoof", l_spoof.item());
                    total = total.add(l_spoof.scale(run.spoof_weight));
                }
            }
            let disc_bound: Vec<Bound> = run.discs.iter().map(|d| d.params.bind(&tape, false)).collect();
            for (t, pyr) in run.terms.iter().zip(&teacher_pyramids) {
                let disc = &run.discs[t.disc];
                let (_, d_teacher) = disc.forward(&disc_bound[t.disc], &constant_pyramid(&tape, pyr));
                let (_, d_student) = disc.forward(&disc_bound[t.disc], &out.pyramid);
                let l = generator_loss_var(d_teacher, d_student);
                acc.add(&t.gen_name, l.item());
                total = total.add(l.scale(t.weight));
            }
            let value = total.item();
            acc.add("total", value);
            if !value.is_finite() {
                return Err(diagnose(epoch, step, schedule, student, &run.discs));
            }
            let grads = p.grads(&tape.backward(total));
            opt_student.step(&mut student.params, &grads);
            acc.end_step();
        }
        log.push(acc.finish(epoch, opt_student.lr));
        opt_student.decay(schedule.lr_decay);
        for o in &mut opt_discs {
            o.decay(schedule.lr_decay);
        }
    }
    let after = frozen_hashes(&run.terms, run.sre);
    if before != after {
        return Err(Error::Pipeline("a frozen model changed during adversarial training".into()));
    }
    Ok((log, after))
}

fn diagnose(
    epoch: usize,
    step: usize,
    schedule: &Schedule,
    student: &FasModel,
    discs: &[MultiScaleDiscriminator],
) -> Error {
    let names: Vec<String> = (0..discs.len()).map(|i| format!("disc{i}")).collect();
    let mut stores: Vec<(&str, &ParamStore)> = vec![("student", &student.params)];
    stores.extend(names.iter().map(String::as_str).zip(discs.iter().map(|d| &d.params)));
    non_finite(epoch, step, schedule.diagnostics_dir.as_deref(), &stores)
}

/// Trains `f^new`, initialised as a copy of `source`, against the frozen
/// source and target teachers. `sre` is frozen and, when present, is
/// inserted between the student extractor and its SCE layers.
pub fn train_stage2(
    source: &FasModel,
    target: &FasModel,
    sre: Option<&Sre>,
    discriminators: &WrapperDiscriminators,
    target_train: &DatasetManifest,
    store: &dyn SampleStore,
    config: &Stage2Config,
) -> Result<Stage2Output> {
    let w = config.weights;
    w.validate()?;
    if w.spoof > 0.0 && sre.is_none() {
        return Err(Error::Config("spoof-consistency weight > 0 requires a spoof region estimator".into()));
    }
    let shared = discriminators.target.is_none();
    let terms = vec![
        TeacherTerm {
            label: "source".into(),
            teacher: source,
            disc: 0,
            weight: w.source_adv,
            gen_name: "l_s".into(),
            disc_name: "l_ds".into(),
        },
        TeacherTerm {
            label: "target".into(),
            teacher: target,
            disc: if shared { 0 } else { 1 },
            weight: w.target_adv,
            gen_name: "l_t".into(),
            disc_name: "l_dt".into(),
        },
    ];
    let mut run = AdversarialRun {
        terms,
        discs: discriminators.as_vec(),
        sre,
        orig_weight: w.orig,
        spoof_weight: w.spoof,
        schedule: &config.schedule,
        disc_lr: config.disc_lr.unwrap_or(config.schedule.lr),
    };
    let mut student = source.clone().with_role(Role::Student);
    let (log, hashes) = run_adversarial(&mut student, &mut run, target_train, store)?;
    let mut discs = run.discs.into_iter();
    let discriminators = WrapperDiscriminators {
        source: discs.next().unwrap(),
        target: discs.next(),
    };
    Ok(Stage2Output {
        student,
        discriminators,
        log,
        frozen_hashes: hashes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossDatasetConfig {
    pub schedule: Schedule,
    pub orig_weight: f64,
    /// Weight of every teacher-specific generator loss.
    pub adv_weight: f64,
    pub disc_lr: Option<f64>,
    /// Allow a teacher count other than three.
    pub allow_any_k: bool,
}

impl Default for CrossDatasetConfig {
    fn default() -> Self {
        Self {
            schedule: Stage2Config::default().schedule,
            orig_weight: 1.0,
            adv_weight: 0.1,
            disc_lr: None,
            allow_any_k: false,
        }
    }
}

pub struct CrossDatasetOutput {
    pub student: FasModel,
    pub discriminators: Vec<MultiScaleDiscriminator>,
    pub log: Vec<EpochLog>,
    pub frozen_hashes: Vec<(String, String)>,
}

/// Multi-teacher variant without a spoof region estimator: one
/// discriminator per teacher.
pub fn train_cross_dataset(
    teachers: &[FasModel],
    student_init: &FasModel,
    discriminators: &[MultiScaleDiscriminator],
    mixed_train: &DatasetManifest,
    store: &dyn SampleStore,
    config: &CrossDatasetConfig,
) -> Result<CrossDatasetOutput> {
    let k = teachers.len();
    if k == 0 || (k != 3 && !config.allow_any_k) {
        return Err(Error::Config(format!("expected 3 teachers, got {k}")));
    }
    if discriminators.len() != k {
        return Err(Error::Config(format!("{k} teachers need {k} discriminators, got {}", discriminators.len())));
    }
    if !(config.orig_weight >= 0.0 && config.adv_weight >= 0.0) {
        return Err(Error::Config("loss weights must be >= 0".into()));
    }
    let terms = teachers
        .iter()
        .enumerate()
        .map(|(i, t)| TeacherTerm {
            label: format!("teacher{i}"),
            teacher: t,
            disc: i,
            weight: config.adv_weight,
            gen_name: format!("l_adv{i}"),
            disc_name: format!("l_disc{i}"),
        })
        .collect();
    let mut run = AdversarialRun {
        terms,
        discs: discriminators.to_vec(),
        sre: None,
        orig_weight: config.orig_weight,
        spoof_weight: 0.0,
        schedule: &config.schedule,
        disc_lr: config.disc_lr.unwrap_or(config.schedule.lr),
    };
    let mut student = student_init.clone().with_role(Role::Student);
    let (log, frozen_hashes) = run_adversarial(&mut student, &mut run, mixed_train, store)?;
    Ok(CrossDatasetOutput {
        student,
        discriminators: run.discs,
        log,
        frozen_hashes,
    })
}

/// `f^new` extractor, SCE layers and the SRE; nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub model: FasModel,
    pub sre: Option<Sre>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub spoof_score: f64,
    pub mask: Option<SpoofMask>,
}

const FASW_FORMAT: &str = "fasw-inference-v1";

#[derive(Serialize, Deserialize)]
struct InferenceMeta {
    model: ModelConfig,
    sre: Option<crate::checkpoint::SreMeta>,
}

pub fn export_inference(student: &FasModel, sre: Option<&Sre>) -> Result<InferenceModel> {
    let expected = crate::model::build_toy_fas_model(student.config.clone(), 0)?;
    for (name, value) in expected.params.iter() {
        match student.params.get(name) {
            Some(v) if v.shape() == value.shape() => {}
            Some(_) => return Err(Error::Export(format!("parameter `{name}` has the wrong shape"))),
            None => return Err(Error::Export(format!("missing parameter `{name}`"))),
        }
    }
    if student.params.len() != expected.params.len() {
        return Err(Error::Export("student carries parameters outside extractor/SCE".into()));
    }
    if let Some(sre) = sre {
        if sre.level_channels != student.config.channels {
            return Err(Error::Export("SRE does not match the student pyramid".into()));
        }
    }
    Ok(InferenceModel {
        model: student.clone().with_role(Role::Student),
        sre: sre.cloned(),
    })
}

impl InferenceModel {
    pub fn parameter_store(&self) -> ParamStore {
        let mut store = self.model.params.clone();
        if let Some(sre) = &self.sre {
            for (k, v) in sre.params.iter() {
                store.insert(k, v.clone());
            }
        }
        store
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_store().num_scalars()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = InferenceMeta {
            model: self.model.config.clone(),
            sre: self.sre.as_ref().map(crate::checkpoint::SreMeta::of),
        };
        let metadata = HashMap::from([
            ("format".to_string(), FASW_FORMAT.to_string()),
            ("config".to_string(), serde_json::to_string(&meta)?),
        ]);
        self.parameter_store().to_bytes(Some(metadata))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParamStore::from_bytes(bytes)?;
        if meta.get("format").map(String::as_str) != Some(FASW_FORMAT) {
            return Err(Error::Container("not an inference model artifact".into()));
        }
        let cfg: InferenceMeta = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::Container("artifact lacks its configuration".into()))?,
        )?;
        let sre = match cfg.sre {
            Some(m) => Some(m.into_sre(store.filter_prefix("sre."), &cfg.model)?),
            None => None,
        };
        let mut params = store.filter_prefix("extractor.");
        for (k, v) in store.filter_prefix("sce.").iter() {
            params.insert(k, v.clone());
        }
        if params.len() + sre.as_ref().map_or(0, |s| s.params.len()) != store.len() {
            return Err(Error::Container("artifact carries unexpected parameters".into()));
        }
        let model = FasModel {
            config: cfg.model,
            params,
            role: Role::Student,
        };
        export_inference(&model, sre.as_ref())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn predict_batch(&self, images: &Array4<f64>) -> Result<Vec<Prediction>> {
        self.model.check_input(images)?;
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, false);
        let sp = self.sre.as_ref().map(|s| s.params.bind(&tape, false));
        let out = self
            .model
            .forward(&p, tape.constant(images.clone().into_dyn()), self.sre.as_ref().zip(sp.as_ref()));
        let masks: Vec<Option<SpoofMask>> = match out.mask {
            Some(m) => masks_from_tensor(&m.value()).into_iter().map(Some).collect(),
            None => vec![None; images.dim().0],
        };
        Ok(out
            .live_logit
            .value()
            .iter()
            .zip(masks)
            .map(|(&z, mask)| Prediction {
                spoof_score: 1.0 - sigmoid(z),
                mask,
            })
            .collect())
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let x = image.data.clone().insert_axis(ndarray::Axis(0));
        Ok(self.predict_batch(&x)?.remove(0))
    }

    pub fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_batch(images)?.into_iter().map(|p| p.spoof_score).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_toy_fas_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_size: (16, 16),
            channels: vec![4, 6, 6],
            stride: 2,
            sce_channels: 4,
            leaky_slope: 0.1,
        }
    }

    fn pyramid(n: usize, seed: u64) -> FeaturePyramid {
        let model = build_toy_fas_model(cfg(), seed).unwrap();
        let x = Array4::from_shape_fn((n, 3, 16, 16), |(i, c, y, x)| {
            ((i * 31 + c * 7 + y * 3 + x) % 13) as f64 / 13.0
        });
        model.extract_features(&x).unwrap()
    }

    #[test]
    fn chain_probabilities_in_range() {
        for mode in [DiscMode::Chained, DiscMode::Shared, DiscMode::SingleConcat] {
            let disc = MultiScaleDiscriminator::new(DiscConfig { mode, ..Default::default() }, &cfg().channels, 1).unwrap();
            let out = disc_forward_chain(&disc, &pyramid(5, 0)).unwrap();
            assert_eq!(out.final_prob.len(), 5);
            assert!(out.final_prob.iter().all(|&p| p > 0.0 && p < 1.0));
            assert_eq!(out.levels.len(), disc.num_blocks());
        }
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let mut disc = MultiScaleDiscriminator::new(DiscConfig::default(), &cfg().channels, 1).unwrap();
        let names: Vec<String> = disc.params.names().map(String::from).collect();
        for n in names {
            disc.params.get_mut(&n).unwrap().fill(0.0);
        }
        let out = disc_forward_chain(&disc, &pyramid(3, 2)).unwrap();
        assert!(out.final_prob.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn single_level_chain_has_no_carried_channels() {
        let disc = MultiScaleDiscriminator::new(DiscConfig::default(), &[4], 0).unwrap();
        assert_eq!(disc.params.get("disc.level0.weight").unwrap().shape(), &[8, 4, 3, 3]);
        let chained = MultiScaleDiscriminator::new(DiscConfig::default(), &[4, 6], 0).unwrap();
        assert_eq!(chained.params.get("disc.level1.weight").unwrap().shape(), &[8, 14, 3, 3]);
    }

    #[test]
    fn pyramid_mismatch_is_config_error() {
        let disc = MultiScaleDiscriminator::new(DiscConfig::default(), &[4, 6], 0).unwrap();
        assert!(matches!(disc_forward_chain(&disc, &pyramid(1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn adversarial_analytic_values() {
        let (g, d) = adversarial_losses(&[0.5, 0.5], &[0.5]).unwrap();
        assert!((g - 4f64.ln()).abs() < 1e-15 && (d - 4f64.ln()).abs() < 1e-15);
        let (g, _) = adversarial_losses(&[1.0 - PROB_EPS], &[PROB_EPS]).unwrap();
        assert!(g < 1e-6);
        assert!(matches!(adversarial_losses(&[0.0], &[0.5]), Err(Error::Numerical(_))));
    }

    #[test]
    fn loss_weight_parsing_and_total() {
        let w: LossWeights = "1,1,1,1".parse().unwrap();
        assert!((total_loss(0.2, 0.1, 1.0, 0.9, &w).unwrap() - 2.2).abs() < 1e-15);
        let w0 = LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(total_loss(0.2, 0.1, 1.0, 0.9, &w0).unwrap(), 0.0);
        assert!("1,2,3".parse::<LossWeights>().is_err());
        assert!(LossWeights::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert_eq!("shared".parse::<DiscMode>().unwrap(), DiscMode::Shared);
        assert!("both".parse::<DiscMode>().is_err());
    }

    #[test]
    fn consistency_loss_cases() {
        let a = SpoofMask { soft: ndarray::Array2::zeros((4, 4)) };
        let b = SpoofMask { soft: ndarray::Array2::ones((4, 4)) };
        assert_eq!(spoof_consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(spoof_consistency_loss(&a, &b).unwrap(), 1.0);
        let c = SpoofMask { soft: ndarray::Array2::zeros((2, 4)) };
        assert!(matches!(spoof_consistency_loss(&a, &c), Err(Error::Config(_))));
    }

    #[test]
    fn spoof_weight_without_sre_is_rejected() {
        let m = build_toy_fas_model(cfg(), 0).unwrap();
        let discs = WrapperDiscriminators::new(DiscConfig::default(), &m.config, 0).unwrap();
        let manifest = DatasetManifest::empty("B", crate::data::Split::Train);
        let store = crate::data::InMemoryStore::new();
        let r = train_stage2(&m, &m, None, &discs, &manifest, &store, &Stage2Config::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn cross_dataset_requires_three_teachers() {
        let m = build_toy_fas_model(cfg(), 0).unwrap();
        let d = MultiScaleDiscriminator::new(DiscConfig::default(), &m.config.channels, 0).unwrap();
        let manifest = DatasetManifest::empty("X", crate::data::Split::Train);
        let store = crate::data::InMemoryStore::new();
        let r = train_cross_dataset(&[m.clone(), m.clone()], &m, &[d.clone(), d], &manifest, &store, &CrossDatasetConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn export_round_trip_and_contents() {
        let m = build_toy_fas_model(cfg(), 3).unwrap();
        let sre = Sre::new(Default::default(), &m.config, 4).unwrap();
        let inf = export_inference(&m, Some(&sre)).unwrap();
        let bytes = inf.to_bytes().unwrap();
        let back = InferenceModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, inf);
        assert!(back.parameter_store().names().all(|n| !n.starts_with("disc") && !n.contains("teacher")));
        assert_eq!(inf.num_parameters(), m.params.num_scalars() + sre.params.num_scalars());
        let x = Array4::from_shape_fn((4, 3, 16, 16), |(i, c, y, x)| ((i + c + y * x) % 5) as f64 / 5.0);
        assert_eq!(inf.predict_batch(&x).unwrap(), back.predict_batch(&x).unwrap());
        let bad = Array4::zeros((1, 3, 8, 8));
        assert!(matches!(inf.predict_batch(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn export_rejects_incomplete_student() {
        let mut m = build_toy_fas_model(cfg(), 3).unwrap();
        m.params = m.params.filter_prefix("extractor.");
        assert!(matches!(export_inference(&m, None), Err(Error::Export(_))));
    }
}
