//! Spoof region estimator (SRE).
//!
//! Preliminary masks threshold the channel-summed absolute difference
//! between a spoof image and its reconstructed live counterpart. The SRE head
//! upsamples every pyramid level to the mask resolution, concatenates them and
//! applies two 3×3 convolutions and a sigmoid. Stage-1 fine-tuning trains the
//! target extractor and the SRE on `L_Orig + L_Mask` for the first
//! `mask_epochs` epochs and on `L_Orig` alone afterwards.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear, concat_channels, nearest_operator, Tape, Tensor, Var};
use crate::data::{sample_batch, BinaryMask, DatasetManifest, Image, ImageSample, Label, SampleStore};
use crate::error::{Error, Result};
use crate::model::{original_loss_var, FasModel, FeaturePyramid, ModelConfig, Role};
use crate::params::{he_normal, Adam, Bound, ParamStore};
use crate::train::{batch_targets, non_finite, EpochAccumulator, EpochLog, Schedule};

/// Default preliminary-mask threshold on the `[0, 3]` channel-sum scale.
pub const DEFAULT_THRESHOLD: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

/// Soft per-pixel spoofness in `[0, 1]`; the binary view is `soft >= 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpoofMask {
    pub soft: Array2<f64>,
}

impl SpoofMask {
    pub fn binary(&self) -> BinaryMask {
        BinaryMask {
            data: self.soft.mapv(|v| u8::from(v >= 0.5)),
        }
    }

    pub fn mean(&self) -> f64 {
        self.soft.mean().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Reconstructor,
    /// Live samples: defined all-zero without reconstruction.
    Live,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreliminaryMask {
    pub mask: BinaryMask,
    pub threshold_used: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructorKind {
    SyntheticOracle,
    LiveAutoencoder,
}

/// Maps a spoof image to an estimate of its live counterpart.
pub trait Reconstructor {
    fn kind(&self) -> ReconstructorKind;
    fn reconstruct(&self, sample: &ImageSample, image: &Image) -> Result<Image>;
}

/// Returns the stored base live image of a synthetic spoof.
pub struct SyntheticOracle<'a> {
    store: &'a dyn SampleStore,
}

impl<'a> SyntheticOracle<'a> {
    pub fn new(store: &'a dyn SampleStore) -> Self {
        Self { store }
    }
}

impl Reconstructor for SyntheticOracle<'_> {
    fn kind(&self) -> ReconstructorKind {
        ReconstructorKind::SyntheticOracle
    }

    fn reconstruct(&self, sample: &ImageSample, _image: &Image) -> Result<Image> {
        self.store.base_live(sample)?.ok_or_else(|| {
            Error::Pipeline(format!("no base live image for `{}`", sample.sample_id))
        })
    }
}

/// Linear autoencoder fitted on live images: reconstruction is the
/// projection onto the top principal components of the live set.
#[derive(Debug, Clone)]
pub struct LiveAutoencoder {
    mean: Array1<f64>,
    /// `[k, d]`, orthonormal rows.
    basis: Array2<f64>,
    shape: (usize, usize, usize),
}

impl LiveAutoencoder {
    pub fn fit(lives: &[Image], components: usize, seed: u64) -> Result<Self> {
        let first = lives
            .first()
            .ok_or_else(|| Error::Data("live autoencoder needs at least one live image".into()))?;
        let shape = first.data.dim();
        let d = shape.0 * shape.1 * shape.2;
        let n = lives.len();
        let mut x = Array2::<f64>::zeros((n, d));
        for (i, img) in lives.iter().enumerate() {
            if img.data.dim() != shape {
                return Err(Error::Input("live images differ in shape".into()));
            }
            x.row_mut(i).assign(&Array1::from_iter(img.data.iter().copied()));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        x -= &mean;
        // Eigenvectors of the n×n Gram matrix map to principal axes.
        let gram = x.dot(&x.t());
        let k = components.min(n.saturating_sub(1)).max(1).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut deflated = gram.clone();
        let mut basis = Array2::<f64>::zeros((k, d));
        let mut kept = 0;
        for _ in 0..k {
            let mut v: Array1<f64> = crate::params::uniform(&mut rng, &[n], 1.0)
                .into_dimensionality()
                .unwrap();
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = deflated.dot(&v);
                let norm = w.dot(&w).sqrt();
                if norm < 1e-14 {
                    break;
                }
                lambda = norm;
                v = w / norm;
            }
            if lambda < 1e-12 {
                break;
            }
            let axis = x.t().dot(&v);
            let axis_norm = axis.dot(&axis).sqrt();
            if axis_norm < 1e-12 {
                break;
            }
            basis.row_mut(kept).assign(&(axis / axis_norm));
            let outer = v
                .view()
                .insert_axis(Axis(1))
                .dot(&v.view().insert_axis(Axis(0)));
            deflated = deflated - outer * lambda;
            kept += 1;
        }
        let basis = basis.slice(s![..kept, ..]).to_owned();
        Ok(Self { mean, basis, shape })
    }
}

impl Reconstructor for LiveAutoencoder {
    fn kind(&self) -> ReconstructorKind {
        ReconstructorKind::LiveAutoencoder
    }

    fn reconstruct(&self, _sample: &ImageSample, image: &Image) -> Result<Image> {
        if image.data.dim() != self.shape {
            return Err(Error::Pipeline("image shape differs from the fitted live set".into()));
        }
        let x = Array1::from_iter(image.data.iter().copied()) - &self.mean;
        let code = self.basis.dot(&x);
        let rec = self.basis.t().dot(&code) + &self.mean;
        let data = Array3::from_shape_vec(self.shape, rec.mapv(|v| v.clamp(0.0, 1.0)).to_vec()).unwrap();
        Ok(Image { data })
    }
}

/// Per-pixel threshold: 1 where `p >= threshold`, 0 otherwise.
pub fn threshold_difference(gray: &Array2<f64>, threshold: f64) -> BinaryMask {
    BinaryMask {
        data: gray.mapv(|p| u8::from(p >= threshold)),
    }
}

/// Channel sum of `|a − b|`.
pub fn gray_difference(a: &Image, b: &Image) -> Array2<f64> {
    (&a.data - &b.data).mapv(f64::abs).sum_axis(Axis(0))
}

pub fn compute_preliminary_mask(
    sample: &ImageSample,
    image: &Image,
    rec: &dyn Reconstructor,
    threshold: f64,
) -> Result<PreliminaryMask> {
    let c = image.data.dim().0 as f64;
    if !(threshold > 0.0 && threshold < c) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, {c})")));
    }
    if sample.label == Label::Live {
        return Ok(PreliminaryMask {
            mask: BinaryMask::zeros(image.height(), image.width()),
            threshold_used: threshold,
            provenance: Provenance::Live,
        });
    }
    let live = rec.reconstruct(sample, image)?;
    if live.data.dim() != image.data.dim() {
        return Err(Error::Pipeline(format!(
            "reconstruction of `{}` is {:?}, input is {:?}",
            sample.sample_id,
            live.data.dim(),
            image.data.dim()
        )));
    }
    Ok(PreliminaryMask {
        mask: threshold_difference(&gray_difference(image, &live), threshold),
        threshold_used: threshold,
        provenance: match rec.kind() {
            ReconstructorKind::SyntheticOracle => Provenance::Oracle,
            ReconstructorKind::LiveAutoencoder => Provenance::Reconstructor,
        },
    })
}

/// Nearest-neighbour resampling of a binary mask.
pub fn resample_mask(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    let (mh, mw) = mask.data.dim();
    if (mh, mw) == (h, w) {
        return mask.clone();
    }
    let rows = nearest_operator(h, mh);
    let cols = nearest_operator(w, mw);
    let m = rows.dot(&mask.to_f64()).dot(&cols.t());
    BinaryMask {
        data: m.mapv(|v| u8::from(v >= 0.5)),
    }
}

/// Fuzzy Jaccard index `Σ min(m, g) / Σ max(m, g)`; 1 when both are empty.
pub fn soft_iou(soft: &Array2<f64>, gt: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&m, &g) in soft.iter().zip(gt.data.iter()) {
        let g = g as f64;
        inter += m.min(g);
        union += m.max(g);
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SreConfig {
    pub hidden: usize,
    /// `(H', W')`; `None` means the model input resolution.
    pub mask_size: Option<(usize, usize)>,
    pub leaky_slope: f64,
    /// Initial bias of the output conv; the untrained mask is `sigmoid(bias)`.
    pub bias_init: f64,
}

impl Default for SreConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            mask_size: None,
            leaky_slope: 0.1,
            bias_init: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sre {
    pub config: SreConfig,
    /// Channels of each pyramid level the head was built for.
    pub level_channels: Vec<usize>,
    pub mask_size: (usize, usize),
    pub params: ParamStore,
}

impl Sre {
    pub fn new(config: SreConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        if config.hidden == 0 {
            return Err(Error::Config("SRE hidden channels must be positive".into()));
        }
        let mask_size = config.mask_size.unwrap_or(model.input_size);
        let total: usize = model.channels.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("sre.conv1.weight", he_normal(&mut rng, &[config.hidden, total, 3, 3], total * 9));
        params.insert("sre.conv1.bias", Tensor::zeros(ndarray::IxDyn(&[config.hidden])));
        params.insert(
            "sre.conv2.weight",
            he_normal(&mut rng, &[1, config.hidden, 3, 3], config.hidden * 9).mapv(|v| v * 0.5),
        );
        params.insert("sre.conv2.bias", Tensor::from_elem(ndarray::IxDyn(&[1]), config.bias_init));
        Ok(Self {
            config,
            level_channels: model.channels.clone(),
            mask_size,
            params,
        })
    }

    /// Records the soft mask `[N, 1, H', W']`.
    pub fn forward<'t>(&self, p: &Bound<'t>, pyramid: &[Var<'t>]) -> Var<'t> {
        let (h, w) = self.mask_size;
        let up: Vec<Var<'t>> = pyramid.iter().map(|&l| bilinear(l, h, w)).collect();
        // Pyramid activations are uncentred; without this the mask collapses to zero.
        concat_channels(&up)
            .instance_norm(NORM_EPS)
            .conv2d(p.get("sre.conv1.weight"), p.get("sre.conv1.bias"), 1, 1)
            .leaky_relu(self.config.leaky_slope)
            .conv2d(p.get("sre.conv2.weight"), p.get("sre.conv2.bias"), 1, 1)
            .sigmoid()
    }

    pub fn check_pyramid(&self, pyramid: &FeaturePyramid) -> Result<()> {
        let channels: Vec<usize> = pyramid.levels.iter().map(|l| l.dim().1).collect();
        if channels != self.level_channels {
            return Err(Error::Input(format!(
                "pyramid channels {channels:?} do not match SRE configuration {:?}",
                self.level_channels
            )));
        }
        Ok(())
    }
}

/// One mask per sample of a batched pyramid.
pub fn sre_forward(sre: &Sre, pyramid: &FeaturePyramid) -> Result<Vec<SpoofMask>> {
    sre.check_pyramid(pyramid)?;
    let tape = Tape::new();
    let p = sre.params.bind(&tape, false);
    let levels: Vec<Var> = pyramid
        .levels
        .iter()
        .map(|l| tape.constant(l.clone().into_dyn()))
        .collect();
    Ok(masks_from_tensor(&sre.forward(&p, &levels).value()))
}

pub(crate) fn masks_from_tensor(t: &Tensor) -> Vec<SpoofMask> {
    let m: Array4<f64> = t.clone().into_dimensionality().unwrap();
    m.outer_iter()
        .map(|s| SpoofMask {
            soft: s.index_axis(Axis(0), 0).to_owned(),
        })
        .collect()
}

/// Records `L_Mask` = mean `|M − I_pre|` for a `[N, 1, H', W']` mask.
pub fn mask_loss_var<'t>(mask: Var<'t>, targets: &Array4<f64>) -> Var<'t> {
    let t = mask.tape().constant(targets.clone().into_dyn());
    mask.sub(t).abs().mean()
}

/// `L_Mask` for one sample; `I_pre` is resampled (nearest) to `M`.
pub fn mask_loss(mask: &SpoofMask, prelim: &PreliminaryMask) -> Result<f64> {
    let (h, w) = mask.soft.dim();
    if h == 0 || w == 0 {
        return Err(Error::Input("empty mask".into()));
    }
    let target = resample_mask(&prelim.mask, h, w).to_f64();
    Ok((&mask.soft - &target).mapv(f64::abs).mean().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub schedule: Schedule,
    /// Epochs (from the start) in which `L_Mask` enters the objective.
    pub mask_epochs: usize,
    pub threshold: f64,
    pub orig_weight: f64,
    pub mask_weight: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                lr: 1e-5,
                epochs: 50,
                ..Schedule::default()
            },
            mask_epochs: 5,
            threshold: DEFAULT_THRESHOLD,
            orig_weight: 1.0,
            mask_weight: 1.0,
        }
    }
}

pub struct Stage1Output {
    pub target_model: FasModel,
    pub sre: Sre,
    pub log: Vec<EpochLog>,
}

/// Fine-tunes a copy of `source` together with `sre` on target data.
/// `source` itself is only read.
pub fn finetune_stage1(
    source: &FasModel,
    sre: &Sre,
    target_train: &DatasetManifest,
    store: &dyn SampleStore,
    rec: &dyn Reconstructor,
    config: &Stage1Config,
) -> Result<Stage1Output> {
    let schedule = &config.schedule;
    schedule.validate()?;
    if config.mask_epochs > schedule.epochs {
        return Err(Error::Config(format!(
            "mask_epochs {} exceeds total epochs {}",
            config.mask_epochs, schedule.epochs
        )));
    }
    if sre.level_channels != source.config.channels {
        return Err(Error::Config("SRE was built for a different pyramid".into()));
    }
    let mut target = source.clone().with_role(Role::TargetTeacher);
    let mut sre = sre.clone();
    let mut rng = schedule.rng(1);
    let mut opt_model = Adam::new(schedule.lr);
    let mut opt_sre = Adam::new(schedule.lr);
    let mut prelim_cache: HashMap<String, BinaryMask> = HashMap::new();
    let steps = schedule.steps(target_train.len());
    let (mh, mw) = sre.mask_size;
    let mut log = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        let supervise_mask = epoch < config.mask_epochs;
        let mut acc = EpochAccumulator::default();
        for step in 0..steps {
            let batch = sample_batch(target_train, schedule.batch_size, schedule.live_fraction, &mut rng)?;
            let images = batch.images(store)?;
            target.check_input(&images)?;
            let targets = batch_targets(&target, &batch);

            let mask_targets = if supervise_mask {
                let mut t = Array4::<f64>::zeros((batch.len(), 1, mh, mw));
                for (i, s) in batch.samples.iter().enumerate() {
                    if !prelim_cache.contains_key(&s.sample_id) {
                        let img = Image {
                            data: images.index_axis(Axis(0), i).to_owned(),
                        };
                        let pm = compute_preliminary_mask(s, &img, rec, config.threshold)?;
                        prelim_cache.insert(s.sample_id.clone(), resample_mask(&pm.mask, mh, mw));
                    }
                    t.slice_mut(s![i, 0, .., ..]).assign(&prelim_cache[&s.sample_id].to_f64());
                }
                Some(t)
            } else {
                None
            };

            let tape = Tape::new();
            let p = target.params.bind(&tape, true);
            let sp = sre.params.bind(&tape, true);
            let out = target.forward(&p, tape.constant(images.into_dyn()), Some((&sre, &sp)));
            let l_orig = original_loss_var(out.depth, out.live_logit, &targets);
            let mut total = l_orig.scale(config.orig_weight);
            acc.add("l_orig", l_orig.item());
            if let Some(t) = &mask_targets {
                let l_mask = mask_loss_var(out.mask.unwrap(), t);
                acc.add("l_mask", l_mask.item());
                total = total.add(l_mask.scale(config.mask_weight));
            } else {
                acc.add("l_mask", f64::NAN);
            }
            let value = total.item();
            acc.add("total", value);
            if !value.is_finite() {
                return Err(non_finite(
                    epoch,
                    step,
                    schedule.diagnostics_dir.as_deref(),
                    &[("target", &target.params), ("sre", &sre.params)],
                ));
            }
            let grads = tape.backward(total);
            opt_model.step(&mut target.params, &p.grads(&grads));
            opt_sre.step(&mut sre.params, &sp.grads(&grads));
            acc.end_step();
        }
        let mut entry = acc.finish(epoch, opt_model.lr);
        if !supervise_mask {
            entry.losses.insert("l_mask".into(), 0.0);
        }
        log.push(entry);
        opt_model.decay(schedule.lr_decay);
        opt_sre.decay(schedule.lr_decay);
    }
    Ok(Stage1Output {
        target_model: target,
        sre,
        log,
    })
}

/// Mean soft IoU of `model + sre` masks against ground truth on spoof rows.
pub fn mean_spoof_iou(
    model: &FasModel,
    sre: &Sre,
    manifest: &DatasetManifest,
    store: &dyn SampleStore,
) -> Result<f64> {
    let spoofs: Vec<ImageSample> = manifest.spoofs().cloned().collect();
    if spoofs.is_empty() {
        return Err(Error::Data("no spoof samples to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in spoofs.chunks(32) {
        let images = crate::data::Batch { samples: chunk.to_vec() }.images(store)?;
        let pyramid = model.extract_features(&images)?;
        for (s, m) in chunk.iter().zip(sre_forward(sre, &pyramid)?) {
            let gt = store
                .gt_mask(s)?
                .ok_or_else(|| Error::Data(format!("`{}` has no ground-truth mask", s.sample_id)))?;
            let (h, w) = m.soft.dim();
            total += soft_iou(&m.soft, &resample_mask(&gt, h, w));
        }
    }
    Ok(total / spoofs.len() as f64)
}

/// Mean soft-mask value over the rows of one label.
pub fn mean_mask_value(
    model: &FasModel,
    sre: &Sre,
    samples: &[ImageSample],
    store: &dyn SampleStore,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let images = crate::data::Batch { samples: chunk.to_vec() }.images(store)?;
        let pyramid = model.extract_features(&images)?;
        total += sre_forward(sre, &pyramid)?.iter().map(SpoofMask::mean).sum::<f64>();
    }
    Ok(total / samples.len().max(1) as f64)
}
