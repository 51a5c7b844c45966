//! Safetensors checkpoints for models, estimators, discriminators and heads.
//! Each file stores its configuration as JSON under the `config` metadata
//! key and its kind under `kind`.

use std::collections::HashMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_toy_fas_model, BinaryHead, FasModel, ModelConfig, Role};
use crate::params::ParamStore;
use crate::sre::{Sre, SreConfig};
use crate::wrapper::{DiscConfig, MultiScaleDiscriminator};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SreMeta {
    pub config: SreConfig,
    pub level_channels: Vec<usize>,
    pub mask_size: (usize, usize),
}

impl SreMeta {
    pub fn of(sre: &Sre) -> Self {
        Self {
            config: sre.config.clone(),
            level_channels: sre.level_channels.clone(),
            mask_size: sre.mask_size,
        }
    }

    pub fn into_sre(self, params: ParamStore, model: &ModelConfig) -> Result<Sre> {
        let sized = SreConfig {
            mask_size: Some(self.mask_size),
            ..self.config.clone()
        };
        let reference = Sre::new(sized, model, 0)?;
        if reference.level_channels != self.level_channels {
            return Err(Error::Container("SRE pyramid does not match the model".into()));
        }
        check_layout(&reference.params, &params, "SRE")?;
        Ok(Sre {
            params,
            config: self.config,
            ..reference
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    role: Role,
}

#[derive(Serialize, Deserialize)]
struct DiscMeta {
    config: DiscConfig,
    level_channels: Vec<usize>,
}

fn check_layout(reference: &ParamStore, actual: &ParamStore, what: &str) -> Result<()> {
    if reference.len() != actual.len() {
        return Err(Error::Container(format!(
            "{what} checkpoint has {} tensors, expected {}",
            actual.len(),
            reference.len()
        )));
    }
    for (name, t) in reference.iter() {
        match actual.get(name) {
            Some(a) if a.shape() == t.shape() => {}
            Some(a) => {
                return Err(Error::Container(format!(
                    "{what} tensor `{name}` has shape {:?}, expected {:?}",
                    a.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Container(format!("{what} checkpoint lacks `{name}`"))),
        }
    }
    Ok(())
}

fn save_with<T: Serialize>(path: &Path, kind: &str, params: &ParamStore, meta: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let metadata = HashMap::from([
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), serde_json::to_string(meta)?),
    ]);
    params.save(path, Some(metadata))
}

fn load_with<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(ParamStore, T)> {
    let (params, meta) = ParamStore::load(path)?;
    match meta.get("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Container(format!(
                "{} holds {:?}, expected a {kind} checkpoint",
                path.display(),
                other
            )))
        }
    }
    let cfg = meta
        .get("config")
        .ok_or_else(|| Error::Container(format!("{} lacks its configuration", path.display())))?;
    Ok((params, serde_json::from_str(cfg)?))
}

pub fn save_model(model: &FasModel, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        config: model.config.clone(),
        role: model.role,
    };
    save_with(path, "fas_model", &model.params, &meta)
}

pub fn load_model(path: &Path) -> Result<FasModel> {
    let (params, meta): (_, ModelMeta) = load_with(path, "fas_model")?;
    let reference = build_toy_fas_model(meta.config.clone(), 0)?;
    check_layout(&reference.params, &params, "model")?;
    Ok(FasModel {
        config: meta.config,
        params,
        role: meta.role,
    })
}

pub fn save_sre(sre: &Sre, path: &Path) -> Result<()> {
    save_with(path, "sre", &sre.params, &SreMeta::of(sre))
}

/// `model` supplies the pyramid layout the estimator must match.
pub fn load_sre(path: &Path, model: &ModelConfig) -> Result<Sre> {
    let (params, meta): (_, SreMeta) = load_with(path, "sre")?;
    meta.into_sre(params, model)
}

pub fn save_discriminator(disc: &MultiScaleDiscriminator, path: &Path) -> Result<()> {
    let meta = DiscMeta {
        config: disc.config.clone(),
        level_channels: disc.level_channels.clone(),
    };
    save_with(path, "discriminator", &disc.params, &meta)
}

pub fn load_discriminator(path: &Path) -> Result<MultiScaleDiscriminator> {
    let (params, meta): (_, DiscMeta) = load_with(path, "discriminator")?;
    let reference = MultiScaleDiscriminator::new(meta.config, &meta.level_channels, 0)?;
    check_layout(&reference.params, &params, "discriminator")?;
    Ok(MultiScaleDiscriminator { params, ..reference })
}

pub fn save_head(head: &BinaryHead, path: &Path) -> Result<()> {
    save_with(path, "binary_head", &head.params, &())
}

pub fn load_head(path: &Path) -> Result<BinaryHead> {
    let (params, ()) = load_with(path, "binary_head")?;
    Ok(BinaryHead { params })
}
