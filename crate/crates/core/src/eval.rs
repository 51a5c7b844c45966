//! Scoring a manifest with any trained model and summarising the scores.

use ndarray::Array4;

use crate::data::{Batch, DatasetManifest, SampleStore};
use crate::error::Result;
use crate::metrics::{evaluate_scores, MetricsReport, ScoreSet};
use crate::model::{BinaryHead, FasModel, SPOOF_CLASS};
use crate::sre::Sre;
use crate::wrapper::InferenceModel;

pub const EVAL_BATCH: usize = 32;

/// Anything producing spoof scores (higher = more spoof) for a batch.
pub trait Scorer {
    fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>>;
}

impl Scorer for FasModel {
    fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>> {
        FasModel::spoof_scores(self, images, None)
    }
}

impl Scorer for InferenceModel {
    fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>> {
        InferenceModel::spoof_scores(self, images)
    }
}

/// A model with the spoof region estimator inserted before its SCE layers.
pub struct WithSre<'a>(pub &'a FasModel, pub &'a Sre);

impl Scorer for WithSre<'_> {
    fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>> {
        self.0.spoof_scores(images, Some(self.1))
    }
}

/// Backbone plus binary head; the score is the spoof-class probability.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub backbone: FasModel,
    pub head: BinaryHead,
}

impl Scorer for HeadModel {
    fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>> {
        let p = self.head.probabilities(&self.backbone, images)?;
        Ok(p.column(SPOOF_CLASS).to_vec())
    }
}

pub fn score_manifest(scorer: &dyn Scorer, manifest: &DatasetManifest, store: &dyn SampleStore) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(manifest.len());
    for chunk in manifest.samples.chunks(EVAL_BATCH) {
        let images = Batch { samples: chunk.to_vec() }.images(store)?;
        scores.extend(scorer.spoof_scores(&images)?);
    }
    ScoreSet::new(scores, manifest.samples.iter().map(|s| s.label).collect())?
        .with_attack_types(manifest.samples.iter().map(|s| s.spoof_micro.clone()).collect())
}

pub fn evaluate_manifest(
    scorer: &dyn Scorer,
    manifest: &DatasetManifest,
    store: &dyn SampleStore,
    fpr_targets: &[f64],
    operating_fpr: f64,
) -> Result<MetricsReport> {
    evaluate_scores(&score_manifest(scorer, manifest, store)?, fpr_targets, operating_fpr)
}
