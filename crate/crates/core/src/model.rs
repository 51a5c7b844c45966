//! Generic FAS model: a multi-scale feature extractor `f` producing a
//! feature pyramid, and spoof-cue-estimate layers `g` producing a depth map
//! and a live logit. Also the GAP + FC binary head used by distillation
//! baselines.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logits, resize, sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{he_normal, Bound, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(H0, W0)`.
    pub input_size: (usize, usize),
    /// Output channels of each pyramid level; its length is `L`.
    pub channels: Vec<usize>,
    /// Spatial stride of every level.
    pub stride: usize,
    /// Hidden channels of the spoof-cue-estimate conv.
    pub sce_channels: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (32, 32),
            channels: vec![8, 16, 16],
            stride: 2,
            sce_channels: 16,
            leaky_slope: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "a feature pyramid needs at least 2 levels, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.sce_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let total = self
            .stride
            .checked_pow(self.channels.len() as u32)
            .ok_or_else(|| Error::Config("total stride overflows".into()))?;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the total stride {total}"
            )));
        }
        Ok(())
    }

    /// `(C_t, H_t, W_t)` for every level.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_size;
        self.channels
            .iter()
            .map(|&c| {
                h /= self.stride;
                w /= self.stride;
                (c, h, w)
            })
            .collect()
    }

    /// Spatial size of the depth map.
    pub fn depth_size(&self) -> (usize, usize) {
        let &(_, h, w) = self.level_shapes().last().unwrap();
        (h, w)
    }

    pub fn num_levels(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceTeacher,
    TargetTeacher,
    Student,
}

/// Feature extractor (`extractor.*`) plus SCE layers (`sce.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct FasModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub role: Role,
}

/// Pyramid values `f_t(I)`, each level `[N, C_t, H_t, W_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Array4<f64>>,
}

/// SCE outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SceOutputs {
    /// `[N, Hd, Wd]` in `[0, 1]`.
    pub depth_map: Array3<f64>,
    /// `[N]`.
    pub live_logit: Array1<f64>,
}

/// Supervision for `L_Orig`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceTargets {
    pub depth: Array3<f64>,
    /// 1 for live, 0 for spoof.
    pub live: Array1<f64>,
}

impl SceTargets {
    /// Radial pseudo-depth for live samples, zeros for spoofs.
    pub fn for_labels(is_live: &[bool], depth_size: (usize, usize)) -> Self {
        let bump = pseudo_depth(depth_size.0, depth_size.1);
        let mut depth = Array3::zeros((is_live.len(), depth_size.0, depth_size.1));
        for (i, &live) in is_live.iter().enumerate() {
            if live {
                depth.index_axis_mut(Axis(0), i).assign(&bump);
            }
        }
        let live = is_live.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        Self { depth, live }
    }
}

/// Centred radial bump `max(0, 1 − r²)` with `r = 1` at the mid-edges.
pub fn pseudo_depth(h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(i, j)| {
        let u = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
        let v = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
        (1.0 - (u * u + v * v)).max(0.0)
    })
}

/// Recorded forward pass.
pub struct ForwardVars<'t> {
    pub pyramid: Vec<Var<'t>>,
    /// `[N, 1, H', W']` when a spoof region estimator is inserted.
    pub mask: Option<Var<'t>>,
    /// `[N, Hd, Wd]`.
    pub depth: Var<'t>,
    /// `[N]`.
    pub live_logit: Var<'t>,
}

pub fn build_toy_fas_model(config: ModelConfig, seed: u64) -> Result<FasModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut in_c = 3;
    for (l, &c) in config.channels.iter().enumerate() {
        params.insert(format!("extractor.level{l}.weight"), he_normal(&mut rng, &[c, in_c, 3, 3], in_c * 9));
        params.insert(format!("extractor.level{l}.bias"), Tensor::zeros(ndarray::IxDyn(&[c])));
        in_c = c;
    }
    let s = config.sce_channels;
    params.insert("sce.conv.weight", he_normal(&mut rng, &[s, in_c, 3, 3], in_c * 9));
    params.insert("sce.conv.bias", Tensor::zeros(ndarray::IxDyn(&[s])));
    params.insert("sce.depth.weight", he_normal(&mut rng, &[1, s, 1, 1], s).mapv(|v| v * 0.5));
    params.insert("sce.depth.bias", Tensor::zeros(ndarray::IxDyn(&[1])));
    params.insert("sce.logit.weight", he_normal(&mut rng, &[1, s], s).mapv(|v| v * 0.5));
    params.insert("sce.logit.bias", Tensor::zeros(ndarray::IxDyn(&[1])));
    Ok(FasModel {
        config,
        params,
        role: Role::SourceTeacher,
    })
}

impl FasModel {
    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn extractor_params(&self) -> ParamStore {
        self.params.filter_prefix("extractor.")
    }

    pub fn sce_params(&self) -> ParamStore {
        self.params.filter_prefix("sce.")
    }

    pub fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if (c, h, w) != (3, self.config.input_size.0, self.config.input_size.1) {
            return Err(Error::Input(format!(
                "images are {c}x{h}x{w}, model expects 3x{}x{}",
                self.config.input_size.0, self.config.input_size.1
            )));
        }
        Ok(())
    }

    /// Records `f(I)`.
    pub fn extract<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Vec<Var<'t>> {
        let mut h = x;
        (0..self.config.num_levels())
            .map(|l| {
                h = h
                    .conv2d(
                        p.get(&format!("extractor.level{l}.weight")),
                        p.get(&format!("extractor.level{l}.bias")),
                        self.config.stride,
                        1,
                    )
                    .leaky_relu(self.config.leaky_slope);
                h
            })
            .collect()
    }

    /// Records `g` on the deepest level: `(depth [N, Hd, Wd], live_logit [N])`.
    pub fn sce<'t>(&self, p: &Bound<'t>, last: Var<'t>) -> (Var<'t>, Var<'t>) {
        let hidden = last
            .conv2d(p.get("sce.conv.weight"), p.get("sce.conv.bias"), 1, 1)
            .leaky_relu(self.config.leaky_slope);
        let depth = hidden
            .conv2d(p.get("sce.depth.weight"), p.get("sce.depth.bias"), 1, 0)
            .sigmoid();
        let s = depth.shape();
        let depth = depth.reshape(&[s[0], s[2], s[3]]);
        let logit = hidden
            .global_avg_pool()
            .linear(p.get("sce.logit.weight"), p.get("sce.logit.bias"));
        let n = logit.shape()[0];
        (depth, logit.reshape(&[n]))
    }

    /// Full forward pass. With an estimator, the deepest level is modulated
    /// by `(1 + M)` pooled to its grid before `g`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        sre: Option<(&crate::sre::Sre, &Bound<'t>)>,
    ) -> ForwardVars<'t> {
        let pyramid = self.extract(p, x);
        let mut last = *pyramid.last().unwrap();
        let mask = sre.map(|(sre, sp)| {
            let m = sre.forward(sp, &pyramid);
            let s = last.shape();
            last = last.mul_channel_broadcast(resize(m, s[2], s[3]).add_scalar(1.0));
            m
        });
        let (depth, live_logit) = self.sce(p, last);
        ForwardVars {
            pyramid,
            mask,
            depth,
            live_logit,
        }
    }

    pub fn extract_features(&self, images: &Array4<f64>) -> Result<FeaturePyramid> {
        self.check_input(images)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let levels = self
            .extract(&p, tape.constant(images.clone().into_dyn()))
            .iter()
            .map(|v| v.value().as_ref().clone().into_dimensionality().unwrap())
            .collect();
        Ok(FeaturePyramid { levels })
    }

    pub fn sce_outputs(&self, images: &Array4<f64>, sre: Option<&crate::sre::Sre>) -> Result<SceOutputs> {
        self.check_input(images)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let sp = sre.map(|s| s.params.bind(&tape, false));
        let out = self.forward(
            &p,
            tape.constant(images.clone().into_dyn()),
            sre.zip(sp.as_ref()),
        );
        Ok(SceOutputs {
            depth_map: out.depth.value().as_ref().clone().into_dimensionality().unwrap(),
            live_logit: out.live_logit.value().as_ref().clone().into_dimensionality().unwrap(),
        })
    }

    /// Spoof scores `1 − sigmoid(live_logit)`.
    pub fn spoof_scores(&self, images: &Array4<f64>, sre: Option<&crate::sre::Sre>) -> Result<Vec<f64>> {
        Ok(self
            .sce_outputs(images, sre)?
            .live_logit
            .iter()
            .map(|&z| 1.0 - sigmoid(z))
            .collect())
    }
}

/// Records `L_Orig` = mean squared depth error + mean BCE on the live logit.
pub fn original_loss_var<'t>(depth: Var<'t>, live_logit: Var<'t>, targets: &SceTargets) -> Var<'t> {
    let tape = depth.tape();
    let target_depth = tape.constant(targets.depth.clone().into_dyn());
    let mse = depth.sub(target_depth).square().mean();
    mse.add(bce_with_logits(live_logit, &targets.live.clone().into_dyn()))
}

pub fn original_loss(outputs: &SceOutputs, targets: &SceTargets) -> Result<f64> {
    if outputs.depth_map.dim() != targets.depth.dim() || outputs.live_logit.len() != targets.live.len() {
        return Err(Error::Input("SCE outputs and targets differ in shape".into()));
    }
    if !outputs.depth_map.iter().chain(outputs.live_logit.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite SCE outputs".into()));
    }
    let tape = Tape::new();
    let depth = tape.constant(outputs.depth_map.clone().into_dyn());
    let logit = tape.constant(outputs.live_logit.clone().into_dyn());
    Ok(original_loss_var(depth, logit, targets).item())
}

/// GAP over the deepest level, one affine layer, softmax over
/// `[live, spoof]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHead {
    pub params: ParamStore,
}

pub const LIVE_CLASS: usize = 0;
pub const SPOOF_CLASS: usize = 1;

pub fn attach_binary_head(model: &FasModel, seed: u64) -> BinaryHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = *model.config.channels.last().unwrap();
    let mut params = ParamStore::new();
    params.insert("head.weight", he_normal(&mut rng, &[2, c], c).mapv(|v| v * 0.5));
    params.insert("head.bias", Tensor::zeros(ndarray::IxDyn(&[2])));
    BinaryHead { params }
}

impl BinaryHead {
    /// Records class logits `[N, 2]` from the deepest pyramid level.
    pub fn logits<'t>(&self, p: &Bound<'t>, last_level: Var<'t>) -> Var<'t> {
        last_level
            .global_avg_pool()
            .linear(p.get("head.weight"), p.get("head.bias"))
    }

    /// Class probabilities `[N, 2]`.
    pub fn probabilities(&self, backbone: &FasModel, images: &Array4<f64>) -> Result<Array2<f64>> {
        backbone.check_input(images)?;
        let tape = Tape::new();
        let bp = backbone.params.bind(&tape, false);
        let hp = self.params.bind(&tape, false);
        let pyr = backbone.extract(&bp, tape.constant(images.clone().into_dyn()));
        let logp = self.logits(&hp, *pyr.last().unwrap()).log_softmax();
        Ok(logp.value().mapv(f64::exp).into_dimensionality().unwrap())
    }
}
