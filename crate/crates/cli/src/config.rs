//! Flat `key = value` experiment configuration.
//!
//! Every key has a default. Files are read line by line; `#` starts a
//! comment. Later assignments win, so `--set` overrides and subcommand flags
//! are applied after the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fasw_core::baselines::LwfConfig;
use fasw_core::data::{EthnicityProfile, PatchGenerator, SpoofMacro, SpoofTypeSpec, SyntheticDomainSpec};
use fasw_core::model::ModelConfig;
use fasw_core::protocols::{AttributeTarget, ProtocolConfig};
use fasw_core::sre::{ReconstructorKind, SreConfig, Stage1Config};
use fasw_core::train::Schedule;
use fasw_core::wrapper::{DiscConfig, LossWeights, Stage2Config};
use fasw_core::{Error, Result};

pub const DATA_ROOT_ENV: &str = "FASW_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub model: ModelConfig,
    pub sre: SreConfig,
    pub source: Schedule,
    /// Schedule for the binary head trained on the frozen source backbone.
    pub head: Schedule,
    pub stage1: Stage1Config,
    pub reconstructor: ReconstructorKind,
    pub ae_components: usize,
    pub stage2: Stage2Config,
    pub disc: DiscConfig,
    pub baseline: Schedule,
    pub lwf: LwfConfig,
    pub fpr_targets: Vec<f64>,
    pub operating_fpr: f64,
    pub synth: BTreeMap<String, SyntheticDomainSpec>,
    pub protocol: ProtocolConfig,
    pub kmax: usize,
    pub kmeans_restarts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = |lr: f64, epochs: usize| Schedule {
            lr,
            epochs,
            ..Schedule::default()
        };
        Self {
            seed: 0,
            data_root: None,
            model: ModelConfig::default(),
            sre: SreConfig::default(),
            source: desk(3e-4, 100),
            head: desk(1e-3, 20),
            stage1: Stage1Config {
                schedule: desk(1e-3, 30),
                mask_epochs: 30,
                ..Stage1Config::default()
            },
            reconstructor: ReconstructorKind::SyntheticOracle,
            ae_components: 8,
            stage2: Stage2Config {
                schedule: desk(1e-3, 40),
                weights: LossWeights {
                    orig: 1.0,
                    spoof: 10.0,
                    source_adv: 0.3,
                    target_adv: 0.3,
                },
                disc_lr: Some(1e-4),
            },
            disc: DiscConfig::default(),
            baseline: desk(1e-3, 40),
            lwf: LwfConfig::default(),
            fpr_targets: vec![0.005],
            operating_fpr: 0.005,
            synth: default_benchmark(),
            protocol: ProtocolConfig::default(),
            kmax: 8,
            kmeans_restarts: 10,
        }
    }
}

/// Source subset `A` with full-frame attacks and target subset `B` with
/// localized ones, captured under a warm colour cast.
pub fn default_benchmark() -> BTreeMap<String, SyntheticDomainSpec> {
    let a = SyntheticDomainSpec {
        n_live: 100,
        n_spoof: 100,
        ..SyntheticDomainSpec::default()
    };
    let b = SyntheticDomainSpec {
        spoof_types: vec![
            SpoofTypeSpec::new(SpoofMacro::Mask3d, "mannequin", PatchGenerator::Ellipse),
            SpoofTypeSpec::new(SpoofMacro::Makeup, "cosmetic", PatchGenerator::Strokes),
            SpoofTypeSpec::new(SpoofMacro::Partial, "funny_eyes", PatchGenerator::Eyes),
        ],
        tint: [0.12, 0.06, -0.12],
        ..a.clone()
    };
    BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)])
}

impl ExperimentConfig {
    /// `desk` restores the small-image defaults; `full` switches to 256×256
    /// inputs with long, low-rate schedules.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                let keep = (self.seed, self.data_root.clone(), self.synth.clone());
                *self = Self::default();
                (self.seed, self.data_root, self.synth) = keep;
            }
            "full" => {
                self.source.lr = 3e-4;
                self.source.lr_decay = 0.99;
                self.source.epochs = 180;
                self.stage1.schedule.lr = 1e-5;
                self.stage1.schedule.epochs = 180;
                self.stage1.mask_epochs = 5;
                self.stage2.schedule.lr = 1e-6;
                self.stage2.schedule.epochs = 180;
                self.stage2.weights = LossWeights::default();
                self.stage2.disc_lr = None;
                self.baseline.lr = 1e-5;
                self.baseline.epochs = 180;
                self.model.input_size = (256, 256);
            }
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match (section, field) {
            ("", "seed") => self.seed = parse(value, key)?,
            ("", "preset") => self.apply_preset(value)?,
            ("", "data_root") => self.data_root = Some(PathBuf::from(value)),
            ("model", "input_size") => self.model.input_size = parse_size(value).ok_or_else(bad)?,
            ("model", "channels") => self.model.channels = parse_list(value, key)?,
            ("model", "stride") => self.model.stride = parse(value, key)?,
            ("model", "sce_channels") => self.model.sce_channels = parse(value, key)?,
            ("model", "leaky_slope") => self.model.leaky_slope = parse(value, key)?,
            ("sre", "hidden") => self.sre.hidden = parse(value, key)?,
            ("sre", "mask_size") => {
                self.sre.mask_size = match value {
                    "input" => None,
                    v => Some(parse_size(v).ok_or_else(bad)?),
                }
            }
            ("sre", "leaky_slope") => self.sre.leaky_slope = parse(value, key)?,
            ("sre", "bias_init") => self.sre.bias_init = parse(value, key)?,
            ("source", f) => set_schedule(&mut self.source, f, value, key)?,
            ("head", f) => set_schedule(&mut self.head, f, value, key)?,
            ("stage1", "mask_epochs") => self.stage1.mask_epochs = parse(value, key)?,
            ("stage1", "threshold") => self.stage1.threshold = parse(value, key)?,
            ("stage1", "orig_weight") => self.stage1.orig_weight = parse(value, key)?,
            ("stage1", "mask_weight") => self.stage1.mask_weight = parse(value, key)?,
            ("stage1", "reconstructor") => {
                self.reconstructor = match value {
                    "oracle" => ReconstructorKind::SyntheticOracle,
                    "autoencoder" => ReconstructorKind::LiveAutoencoder,
                    _ => return Err(bad()),
                }
            }
            ("stage1", "ae_components") => self.ae_components = parse(value, key)?,
            ("stage1", f) => set_schedule(&mut self.stage1.schedule, f, value, key)?,
            ("stage2", "lambdas") => self.stage2.weights = value.parse()?,
            ("stage2", "disc_lr") => self.stage2.disc_lr = Some(parse(value, key)?),
            ("stage2", "disc_mode") => self.disc.mode = value.parse()?,
            ("stage2", "disc_hidden") => self.disc.hidden = parse(value, key)?,
            ("stage2", "disc_leaky_slope") => self.disc.leaky_slope = parse(value, key)?,
            ("stage2", f) => set_schedule(&mut self.stage2.schedule, f, value, key)?,
            ("baseline", f) => set_schedule(&mut self.baseline, f, value, key)?,
            ("lwf", "temperature") => self.lwf.temperature = parse(value, key)?,
            ("lwf", "distill_weight") => self.lwf.distill_weight = parse(value, key)?,
            ("eval", "fpr_targets") => self.fpr_targets = parse_list(value, key)?,
            ("eval", "operating_fpr") => self.operating_fpr = parse(value, key)?,
            ("protocol", "holdout") => self.protocol.holdout_micro_types = split_list(value),
            ("protocol", "targets") => {
                self.protocol.targets = value
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse::<AttributeTarget>)
                    .collect::<Result<_>>()?
            }
            ("protocol", "tolerance_pp") => self.protocol.tolerance_pp = parse(value, key)?,
            ("protocol", "test_fraction") => self.protocol.test_fraction = parse(value, key)?,
            ("protocol", "kmax") => self.kmax = parse(value, key)?,
            ("protocol", "restarts") => self.kmeans_restarts = parse(value, key)?,
            ("synth", rest) => self.set_synth(rest, value, key)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_synth(&mut self, rest: &str, value: &str, key: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let (subset, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("expected synth.<subset>.<field>, got `{key}`")))?;
        if field == "remove" {
            if parse::<bool>(value, key)? {
                self.synth.remove(subset);
            }
            return Ok(());
        }
        let spec = self.synth.entry(subset.to_string()).or_default();
        match field {
            "n_live" => spec.n_live = parse(value, key)?,
            "n_spoof" => spec.n_spoof = parse(value, key)?,
            "spoof_types" => spec.spoof_types = parse_spoof_types(value).ok_or_else(bad)?,
            "tint" => spec.tint = parse_triple(value, key)?,
            "blur_sigma" => spec.blur_sigma = parse(value, key)?,
            "brightness" => spec.brightness = parse(value, key)?,
            "brightness_jitter" => spec.brightness_jitter = parse(value, key)?,
            "image_size" => spec.image_size = parse_size(value).ok_or_else(bad)?,
            "seed" => spec.seed = parse(value, key)?,
            "domain_id" => spec.domain_id = Some(value.to_string()),
            "samples_per_subject" => spec.samples_per_subject = parse(value, key)?,
            "test_fraction" => spec.test_fraction = parse(value, key)?,
            "age_range" => {
                let (lo, hi) = value.split_once('-').ok_or_else(bad)?;
                spec.age_range = (parse(lo.trim(), key)?, parse(hi.trim(), key)?);
            }
            "ethnicities" => spec.ethnicities = parse_ethnicities(value).ok_or_else(bad)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Per-subset specs with the experiment seed mixed into each spec seed.
    pub fn synth_specs(&self) -> BTreeMap<String, SyntheticDomainSpec> {
        self.synth
            .iter()
            .map(|(k, s)| {
                let spec = SyntheticDomainSpec {
                    seed: s.seed.wrapping_add(self.seed),
                    image_size: self.model.input_size,
                    ..s.clone()
                };
                (k.clone(), spec)
            })
            .collect()
    }

    pub fn source_schedule(&self) -> Schedule {
        self.seeded(&self.source)
    }

    pub fn head_schedule(&self) -> Schedule {
        self.seeded(&self.head)
    }

    pub fn baseline_schedule(&self) -> Schedule {
        self.seeded(&self.baseline)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            schedule: self.seeded(&self.stage1.schedule),
            ..self.stage1.clone()
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            schedule: self.seeded(&self.stage2.schedule),
            ..self.stage2.clone()
        }
    }

    pub fn lwf_config(&self) -> LwfConfig {
        LwfConfig {
            schedule: self.baseline_schedule(),
            ..self.lwf.clone()
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            seed: self.seed,
            ..self.protocol.clone()
        }
    }

    fn seeded(&self, s: &Schedule) -> Schedule {
        Schedule {
            seed: self.seed,
            ..s.clone()
        }
    }

    /// Resolution order: explicit value, `FASW_DATA_ROOT`, then `fallback`.
    pub fn resolve_data_root(&self, fallback: &Path) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| fallback.to_path_buf())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in [&self.source, &self.head, &self.baseline, &self.stage1.schedule, &self.stage2.schedule] {
            s.validate()?;
        }
        self.stage2.weights.validate()?;
        if self.fpr_targets.iter().any(|f| !(0.0..=1.0).contains(f)) || !(0.0..=1.0).contains(&self.operating_fpr) {
            return Err(Error::Config("FPR targets must lie in [0, 1]".into()));
        }
        if self.lwf.temperature <= 0.0 {
            return Err(Error::Config("lwf.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        if let Some(root) = &self.data_root {
            put("data_root", root.display().to_string());
        }
        let m = &self.model;
        put("model.input_size", fmt_size(m.input_size));
        put("model.channels", join(&m.channels));
        put("model.stride", m.stride.to_string());
        put("model.sce_channels", m.sce_channels.to_string());
        put("model.leaky_slope", m.leaky_slope.to_string());
        put("sre.hidden", self.sre.hidden.to_string());
        put("sre.mask_size", self.sre.mask_size.map_or("input".into(), fmt_size));
        put("sre.leaky_slope", self.sre.leaky_slope.to_string());
        put("sre.bias_init", self.sre.bias_init.to_string());
        for (name, s) in [("source", &self.source), ("head", &self.head)] {
            schedule_text(&mut put, name, s);
        }
        schedule_text(&mut put, "stage1", &self.stage1.schedule);
        put("stage1.mask_epochs", self.stage1.mask_epochs.to_string());
        put("stage1.threshold", self.stage1.threshold.to_string());
        put("stage1.orig_weight", self.stage1.orig_weight.to_string());
        put("stage1.mask_weight", self.stage1.mask_weight.to_string());
        put(
            "stage1.reconstructor",
            match self.reconstructor {
                ReconstructorKind::SyntheticOracle => "oracle",
                ReconstructorKind::LiveAutoencoder => "autoencoder",
            }
            .into(),
        );
        put("stage1.ae_components", self.ae_components.to_string());
        schedule_text(&mut put, "stage2", &self.stage2.schedule);
        put("stage2.lambdas", join(&self.stage2.weights.as_array()));
        if let Some(lr) = self.stage2.disc_lr {
            put("stage2.disc_lr", lr.to_string());
        }
        put("stage2.disc_mode", self.disc.mode.as_str().into());
        put("stage2.disc_hidden", self.disc.hidden.to_string());
        put("stage2.disc_leaky_slope", self.disc.leaky_slope.to_string());
        schedule_text(&mut put, "baseline", &self.baseline);
        put("lwf.temperature", self.lwf.temperature.to_string());
        put("lwf.distill_weight", self.lwf.distill_weight.to_string());
        put("eval.fpr_targets", join(&self.fpr_targets));
        put("eval.operating_fpr", self.operating_fpr.to_string());
        put("protocol.holdout", self.protocol.holdout_micro_types.join(","));
        put(
            "protocol.targets",
            self.protocol
                .targets
                .iter()
                .map(|t| format!("{}:{}:{}:{}", t.subset, t.attribute.name(), t.fraction, t.n_samples))
                .collect::<Vec<_>>()
                .join(";"),
        );
        put("protocol.tolerance_pp", self.protocol.tolerance_pp.to_string());
        put("protocol.test_fraction", self.protocol.test_fraction.to_string());
        put("protocol.kmax", self.kmax.to_string());
        put("protocol.restarts", self.kmeans_restarts.to_string());
        for (name, s) in &self.synth {
            let p = |f: &str| format!("synth.{name}.{f}");
            put(&p("n_live"), s.n_live.to_string());
            put(&p("n_spoof"), s.n_spoof.to_string());
            put(
                &p("spoof_types"),
                s.spoof_types
                    .iter()
                    .map(|t| format!("{}:{}:{}", t.macro_type.as_str(), t.micro, generator_name(t.generator)))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            put(&p("tint"), join(&s.tint));
            put(&p("blur_sigma"), s.blur_sigma.to_string());
            put(&p("brightness"), s.brightness.to_string());
            put(&p("brightness_jitter"), s.brightness_jitter.to_string());
            put(&p("seed"), s.seed.to_string());
            if let Some(d) = &s.domain_id {
                put(&p("domain_id"), d.clone());
            }
            put(&p("samples_per_subject"), s.samples_per_subject.to_string());
            put(&p("test_fraction"), s.test_fraction.to_string());
            put(&p("age_range"), format!("{}-{}", s.age_range.0, s.age_range.1));
            put(
                &p("ethnicities"),
                s.ethnicities
                    .iter()
                    .map(|e| format!("{}:{}:{}", e.label, e.weight, join(&e.tint).replace(',', "/")))
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        out
    }
}

fn schedule_text(put: &mut impl FnMut(&str, String), name: &str, s: &Schedule) {
    put(&format!("{name}.lr"), s.lr.to_string());
    put(&format!("{name}.lr_decay"), s.lr_decay.to_string());
    put(&format!("{name}.epochs"), s.epochs.to_string());
    put(&format!("{name}.batch_size"), s.batch_size.to_string());
    put(&format!("{name}.live_fraction"), s.live_fraction.to_string());
    if let Some(n) = s.steps_per_epoch {
        put(&format!("{name}.steps_per_epoch"), n.to_string());
    }
}

fn set_schedule(s: &mut Schedule, field: &str, value: &str, key: &str) -> Result<()> {
    match field {
        "lr" => s.lr = parse(value, key)?,
        "lr_decay" => s.lr_decay = parse(value, key)?,
        "epochs" => s.epochs = parse(value, key)?,
        "batch_size" => s.batch_size = parse(value, key)?,
        "live_fraction" => s.live_fraction = parse(value, key)?,
        "steps_per_epoch" => s.steps_per_epoch = Some(parse(value, key)?),
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_list<T: std::str::FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    split_list(value).iter().map(|v| parse(v, key)).collect()
}

fn parse_triple(value: &str, key: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list(value, key)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs three comma-separated numbers")))
}

/// `32x32` or a single side length.
pub fn parse_size(value: &str) -> Option<(usize, usize)> {
    match value.split_once('x') {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => value.trim().parse().ok().map(|s| (s, s)),
    }
}

fn fmt_size((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn generator_name(g: PatchGenerator) -> &'static str {
    match g {
        PatchGenerator::Print => "print",
        PatchGenerator::Replay => "replay",
        PatchGenerator::Rect => "rect",
        PatchGenerator::Ellipse => "ellipse",
        PatchGenerator::Eyes => "eyes",
        PatchGenerator::Mouth => "mouth",
        PatchGenerator::Strokes => "strokes",
    }
}

fn parse_generator(s: &str) -> Option<PatchGenerator> {
    Some(match s {
        "print" => PatchGenerator::Print,
        "replay" => PatchGenerator::Replay,
        "rect" => PatchGenerator::Rect,
        "ellipse" => PatchGenerator::Ellipse,
        "eyes" => PatchGenerator::Eyes,
        "mouth" => PatchGenerator::Mouth,
        "strokes" => PatchGenerator::Strokes,
        _ => return None,
    })
}

/// `macro:micro[:generator]`, comma separated.
fn parse_spoof_types(value: &str) -> Option<Vec<SpoofTypeSpec>> {
    split_list(value)
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let macro_type: SpoofMacro = parts.first()?.parse().ok()?;
            let micro = parts.get(1)?;
            let generator = match parts.get(2) {
                Some(g) => parse_generator(g)?,
                None => PatchGenerator::default_for(macro_type),
            };
            (parts.len() <= 3).then(|| SpoofTypeSpec::new(macro_type, micro, generator))
        })
        .collect()
}

/// `label:weight[:r/g/b]`, comma separated.
fn parse_ethnicities(value: &str) -> Option<Vec<EthnicityProfile>> {
    split_list(value)
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let tint = match parts.get(2) {
                Some(t) => {
                    let v: Vec<f64> = t.split('/').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
                    v.try_into().ok()?
                }
                None => [0.0; 3],
            };
            Some(EthnicityProfile {
                label: parts.first()?.to_string(),
                weight: parts.get(1)?.parse().ok()?,
                tint,
            })
        })
        .collect()
}
