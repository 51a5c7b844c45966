use ndarray::{s, Array4};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, ImageSample, SampleStore};
use crate::error::{Error, Result};

/// A mini-batch of manifest rows; live samples first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<ImageSample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.sample_id.as_str()).collect()
    }

    /// Stacks the batch images into `[N, 3, H, W]`.
    pub fn images(&self, store: &dyn SampleStore) -> Result<Array4<f64>> {
        stack_images(&self.samples, store)
    }
}

pub(crate) fn stack_images(samples: &[ImageSample], store: &dyn SampleStore) -> Result<Array4<f64>> {
    let mut out: Option<Array4<f64>> = None;
    for (i, s) in samples.iter().enumerate() {
        let img = store.image(s)?;
        let (c, h, w) = img.data.dim();
        let buf = out.get_or_insert_with(|| Array4::zeros((samples.len(), c, h, w)));
        let (_, bc, bh, bw) = buf.dim();
        if (bc, bh, bw) != (c, h, w) {
            return Err(Error::Input(format!(
                "{}: image is {c}x{h}x{w}, batch expects {:?}",
                s.sample_id,
                &buf.shape()[1..]
            )));
        }
        buf.slice_mut(s![i, .., .., ..]).assign(&img.data);
    }
    out.ok_or_else(|| Error::Input("empty batch".into()))
}

/// Draws `round(batch_size · live_fraction)` live rows and fills the rest
/// with spoof rows, each class without replacement.
pub fn sample_batch(
    manifest: &DatasetManifest,
    batch_size: usize,
    live_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if !(0.0..=1.0).contains(&live_fraction) {
        return Err(Error::Config(format!("live_fraction {live_fraction} outside [0, 1]")));
    }
    let n_live = (batch_size as f64 * live_fraction).round() as usize;
    let n_spoof = batch_size - n_live;
    let lives: Vec<&ImageSample> = manifest.lives().collect();
    let spoofs: Vec<&ImageSample> = manifest.spoofs().collect();
    if lives.len() < n_live || spoofs.len() < n_spoof {
        return Err(Error::Data(format!(
            "manifest {} has {} live / {} spoof samples, batch needs {n_live} / {n_spoof}",
            manifest.subset_id,
            lives.len(),
            spoofs.len()
        )));
    }
    let mut samples = Vec::with_capacity(batch_size);
    for i in index::sample(rng, lives.len(), n_live) {
        samples.push(lives[i].clone());
    }
    for i in index::sample(rng, spoofs.len(), n_spoof) {
        samples.push(spoofs[i].clone());
    }
    Ok(Batch { samples })
}
