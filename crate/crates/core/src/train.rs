//! Shared training-loop plumbing: schedules, per-epoch loss logs, and the
//! `L_Orig` fitting loop used by source pre-training and the baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{sample_batch, Batch, DatasetManifest, SampleStore};
use crate::error::{Error, Result};
use crate::model::{original_loss_var, FasModel, SceTargets};
use crate::params::{Adam, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub live_fraction: f64,
    /// Defaults to `max(1, n_train / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Where parameters are dumped if a loss turns non-finite.
    pub diagnostics_dir: Option<PathBuf>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_decay: 0.99,
            epochs: 20,
            batch_size: 8,
            live_fraction: 0.5,
            steps_per_epoch: None,
            seed: 0,
            diagnostics_dir: None,
        }
    }
}

impl Schedule {
    pub fn steps(&self, n_samples: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| (n_samples / self.batch_size.max(1)).max(1))
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of each loss component over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
}

/// Renders logs as CSV: `epoch,lr,<loss names...>`.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let names: Vec<&String> = log.first().map(|e| e.losses.keys().collect()).unwrap_or_default();
    let mut out = String::from("epoch,lr");
    for n in &names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for e in log {
        write!(out, "{},{}", e.epoch, e.lr).unwrap();
        for n in &names {
            write!(out, ",{}", e.losses.get(*n).copied().unwrap_or(f64::NAN)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Default)]
pub(crate) struct EpochAccumulator {
    sums: BTreeMap<String, f64>,
    steps: usize,
}

impl EpochAccumulator {
    pub fn add(&mut self, name: &str, value: f64) {
        *self.sums.entry(name.to_string()).or_default() += value;
    }

    pub fn end_step(&mut self) {
        self.steps += 1;
    }

    pub fn finish(self, epoch: usize, lr: f64) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            lr,
            losses: self.sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        }
    }
}

/// Dumps the given stores and builds the abort error.
pub(crate) fn non_finite(
    epoch: usize,
    step: usize,
    dir: Option<&Path>,
    stores: &[(&str, &ParamStore)],
) -> Error {
    let diagnostics = dir.and_then(|dir| {
        std::fs::create_dir_all(dir).ok()?;
        for (name, store) in stores {
            store.save(&dir.join(format!("{name}.safetensors")), None).ok()?;
        }
        Some(dir.to_path_buf())
    });
    Error::NonFiniteLoss {
        epoch,
        step,
        diagnostics,
    }
}

pub(crate) fn batch_targets(model: &FasModel, batch: &Batch) -> SceTargets {
    let is_live: Vec<bool> = batch.samples.iter().map(|s| !s.label.is_spoof()).collect();
    SceTargets::for_labels(&is_live, model.config.depth_size())
}

/// Minimises `L_Orig` on `manifest` in place; no spoof region estimator.
pub fn fit_original_loss(
    model: &mut FasModel,
    manifest: &DatasetManifest,
    store: &dyn SampleStore,
    schedule: &Schedule,
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    let mut rng = schedule.rng(0);
    let mut opt = Adam::new(schedule.lr);
    let steps = schedule.steps(manifest.len());
    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut acc = EpochAccumulator::default();
        for step in 0..steps {
            let batch = sample_batch(manifest, schedule.batch_size, schedule.live_fraction, &mut rng)?;
            let images = batch.images(store)?;
            model.check_input(&images)?;
            let targets = batch_targets(model, &batch);
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
    Ok(log)
}
