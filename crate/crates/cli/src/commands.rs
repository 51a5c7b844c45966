//! Subcommands. Each training command writes one write-once run directory.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array3, Array4, Axis};

use fasw_core::baselines::{BaselineContext, MethodRegistry, TrainedModel};
use fasw_core::checkpoint::{
    load_head, load_model, load_sre, save_discriminator, save_head, save_model, save_sre,
};
use fasw_core::data::{
    generate_synthetic_benchmark, load_manifest, write_benchmark, Batch, DatasetManifest, DiskStore, Image,
    SampleStore,
};
use fasw_core::eval::{score_manifest, HeadModel, Scorer, WithSre};
use fasw_core::metrics::{evaluate_scores, roc_csv, roc_curve};
use fasw_core::model::{attach_binary_head, build_toy_fas_model, FasModel};
use fasw_core::params::ParamStore;
use fasw_core::protocols::{assign_illumination_clusters, build_protocol_splits, check_protocol, sse_curve_csv, write_protocol};
use fasw_core::sre::{
    compute_preliminary_mask, finetune_stage1, mean_spoof_iou, sre_forward, LiveAutoencoder, Reconstructor,
    ReconstructorKind, Sre, SyntheticOracle,
};
use fasw_core::train::{fit_original_loss, loss_log_csv, EpochLog};
use fasw_core::wrapper::{export_inference, train_stage2, InferenceModel, WrapperDiscriminators};
use fasw_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::plots::{self, LinePlot, Tile};
use crate::report::{evaluation_name, Evaluation, Report, REPORT_FILE};
use crate::run::{ensure_fresh, RunDir, ScorerKind};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const HEAD_LOSS_LOG: &str = "head_loss_log.csv";
pub const MASK_SAMPLES: &str = "masks.safetensors";
/// Spoof samples kept for mask grids.
const MASK_ROWS: usize = 4;

#[derive(Debug, Parser)]
#[command(
    name = "fasw",
    version,
    about = "Source-free adaptation of face anti-spoofing models",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image root; defaults to FASW_DATA_ROOT, then the manifest's directory.
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic paired live/spoof benchmark.
    GenerateSynthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Splits a pooled manifest into subsets A to E.
    BuildProtocols {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated spoof types held out of A.
        #[arg(long)]
        holdout: Option<String>,
        #[arg(long)]
        kmax: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the source model and its binary head.
    PretrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long = "eval-manifest")]
        eval_manifests: Vec<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_decay: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skips the binary head used by LwF.
        #[arg(long)]
        no_head: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: fine-tunes a target teacher together with the SRE.
    FinetuneSre {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        target_manifest: PathBuf,
        #[arg(long = "eval-manifest")]
        eval_manifests: Vec<PathBuf>,
        #[arg(long)]
        mask_epochs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long = "threshold-T", alias = "threshold")]
        threshold: Option<f64>,
        /// `oracle` or `autoencoder`.
        #[arg(long)]
        reconstructor: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: trains the student against both teachers.
    TrainWrapper {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        target_ckpt: PathBuf,
        /// Omit to train without the SRE and the spoof-consistency term.
        #[arg(long)]
        sre_ckpt: Option<PathBuf>,
        #[arg(long)]
        target_manifest: PathBuf,
        #[arg(long = "eval-manifest")]
        eval_manifests: Vec<PathBuf>,
        /// `orig,spoof,source_adv,target_adv`.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        disc_mode: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        disc_lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one of the comparison methods.
    RunBaseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// naive_ft, joint or lwf.
        #[arg(long)]
        method: String,
        #[arg(long)]
        source_ckpt: Option<PathBuf>,
        /// Binary head for lwf; defaults to the one in the source run.
        #[arg(long)]
        head_ckpt: Option<PathBuf>,
        /// Source training data; only read by joint.
        #[arg(long)]
        source_manifest: Option<PathBuf>,
        #[arg(long)]
        target_manifest: PathBuf,
        #[arg(long = "eval-manifest")]
        eval_manifests: Vec<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores manifests with an exported model or a run directory.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Comma-separated FPR values.
        #[arg(long)]
        fpr_targets: Option<String>,
        #[arg(long)]
        operating_fpr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Packs a wrapper run into a standalone inference model.
    Export {
        #[arg(long)]
        wrapper_run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores every PNG in a directory.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also writes each predicted mask as a PNG here.
        #[arg(long)]
        masks_dir: Option<PathBuf>,
    },
    /// Renders ROC, loss-curve and mask-grid PNGs from run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or missing inputs; exit status 2.
    Usage(String),
    /// Failure while running; exit status 1.
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }

    /// Machine-readable error record printed on stderr.
    pub fn record(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Run(e) => (e.kind(), e.to_string()),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message } })
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs it and returns the exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenerateSynthetic { cfg, out } => generate_synthetic(&cfg, &out),
        Command::BuildProtocols {
            cfg,
            manifest,
            holdout,
            kmax,
            out,
        } => build_protocols(&cfg, &manifest, holdout, kmax, &out),
        Command::PretrainSource {
            cfg,
            train_manifest,
            eval_manifests,
            lr,
            lr_decay,
            epochs,
            no_head,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            set_opt(&mut c, "source.lr", lr)?;
            set_opt(&mut c, "source.lr_decay", lr_decay)?;
            set_opt(&mut c, "source.epochs", epochs)?;
            pretrain_source(&c, &train_manifest, &eval_manifests, !no_head, &out)
        }
        Command::FinetuneSre {
            cfg,
            source_ckpt,
            target_manifest,
            eval_manifests,
            mask_epochs,
            epochs,
            lr,
            threshold,
            reconstructor,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            set_opt(&mut c, "stage1.mask_epochs", mask_epochs)?;
            set_opt(&mut c, "stage1.epochs", epochs)?;
            set_opt(&mut c, "stage1.lr", lr)?;
            set_opt(&mut c, "stage1.threshold", threshold)?;
            set_opt(&mut c, "stage1.reconstructor", reconstructor)?;
            finetune_sre(&c, &source_ckpt, &target_manifest, &eval_manifests, &out)
        }
        Command::TrainWrapper {
            cfg,
            source_ckpt,
            target_ckpt,
            sre_ckpt,
            target_manifest,
            eval_manifests,
            lambdas,
            disc_mode,
            lr,
            disc_lr,
            epochs,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            set_opt(&mut c, "stage2.lambdas", lambdas)?;
            set_opt(&mut c, "stage2.disc_mode", disc_mode)?;
            set_opt(&mut c, "stage2.lr", lr)?;
            set_opt(&mut c, "stage2.disc_lr", disc_lr)?;
            set_opt(&mut c, "stage2.epochs", epochs)?;
            let ckpts = WrapperInputs {
                source: source_ckpt,
                target: target_ckpt,
                sre: sre_ckpt,
            };
            train_wrapper(&c, &ckpts, &target_manifest, &eval_manifests, &out)
        }
        Command::RunBaseline {
            cfg,
            method,
            source_ckpt,
            head_ckpt,
            source_manifest,
            target_manifest,
            eval_manifests,
            lr,
            epochs,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            set_opt(&mut c, "baseline.lr", lr)?;
            set_opt(&mut c, "baseline.epochs", epochs)?;
            let inputs = BaselineInputs {
                method,
                source_ckpt,
                head_ckpt,
                source_manifest,
                target_manifest,
            };
            run_baseline(&c, &inputs, &eval_manifests, &out)
        }
        Command::Evaluate {
            cfg,
            model,
            manifests,
            fpr_targets,
            operating_fpr,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            set_opt(&mut c, "eval.fpr_targets", fpr_targets)?;
            set_opt(&mut c, "eval.operating_fpr", operating_fpr)?;
            evaluate(&c, &model, &manifests, &out)
        }
        Command::Export { wrapper_run, out } => export(&wrapper_run, &out),
        Command::Predict {
            model,
            images,
            out,
            masks_dir,
        } => predict(&model, &images, &out, masks_dir.as_deref()),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input `{}` does not exist", path.display())))
    }
}

fn require_fresh(path: &Path) -> CliResult<()> {
    ensure_fresh(path).map_err(usage)
}

pub fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            require(p)?;
            ExperimentConfig::from_file(p).map_err(usage)?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &args.set {
        cfg.apply_assignment(kv).map_err(usage)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.data_root {
        cfg.data_root = Some(d.clone());
    }
    Ok(cfg)
}

/// Routes a command-line flag through the config so the snapshot records it.
fn set_opt<T: Display>(cfg: &mut ExperimentConfig, key: &str, value: Option<T>) -> CliResult<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()).map_err(usage),
        None => Ok(()),
    }
}

fn validated(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate().map_err(usage)
}

/// Manifest plus a store rooted at the configured data root.
fn open_manifest(cfg: &ExperimentConfig, path: &Path) -> CliResult<(DatasetManifest, DiskStore)> {
    require(path)?;
    let manifest = load_manifest(path)?;
    let fallback = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, DiskStore::new(cfg.resolve_data_root(&fallback))))
}

/// A checkpoint argument may name the file or the run directory holding it.
fn checkpoint_path(arg: &Path, name: &str) -> CliResult<PathBuf> {
    require(arg)?;
    if arg.is_dir() {
        let p = RunDir::open(arg).map_err(usage)?.checkpoint(name);
        require(&p)?;
        Ok(p)
    } else {
        Ok(arg.to_path_buf())
    }
}

fn write_log(run: &RunDir, name: &str, log: &[EpochLog]) -> Result<()> {
    run.write(name, loss_log_csv(log).as_bytes())
}

/// Scores every manifest, writes `roc_<name>.csv` into `dir` and fills
/// `report.evaluations`.
fn evaluate_manifests(
    cfg: &ExperimentConfig,
    scorer: &dyn Scorer,
    manifests: &[PathBuf],
    dir: &Path,
    report: &mut Report,
) -> CliResult<Vec<(String, PathBuf)>> {
    let mut rocs = Vec::new();
    for path in manifests {
        let (manifest, store) = open_manifest(cfg, path)?;
        let scores = score_manifest(scorer, &manifest, &store)?;
        let metrics = evaluate_scores(&scores, &cfg.fpr_targets, cfg.operating_fpr)?;
        let name = evaluation_name(path, &report.evaluations);
        let roc_path = dir.join(format!("roc_{name}.csv"));
        if roc_path.exists() {
            return Err(CliError::Usage(format!("`{}` already exists", roc_path.display())));
        }
        std::fs::write(&roc_path, roc_csv(&roc_curve(&scores)?)).map_err(|e| Error::io(&roc_path, e))?;
        log::info!("{name}: AUC {:.4}, ACER {:.2}", metrics.auc, metrics.acer);
        report.evaluations.insert(name.clone(), Evaluation::new(path, metrics));
        rocs.push((name, roc_path));
    }
    Ok(rocs)
}

fn finish_run(run: &RunDir, report: &Report) -> Result<()> {
    run.write(REPORT_FILE, report.to_json()?.as_bytes())?;
    println!("{}", run.path.display());
    Ok(())
}

fn new_run(
    cfg: &ExperimentConfig,
    out: &Path,
    command: &str,
    scorer: ScorerKind,
    inputs: &[PathBuf],
) -> CliResult<(RunDir, Report)> {
    validated(cfg)?;
    require_fresh(out)?;
    let run = RunDir::create(out, command, &cfg.to_text(), cfg.seed, scorer, inputs)?;
    let report = Report::new(command, Some(run.info.run_id.clone()), Some(cfg.seed));
    Ok((run, report))
}

fn generate_synthetic(args: &ConfigArgs, out: &Path) -> CliResult<()> {
    let cfg = load_config(args)?;
    validated(&cfg)?;
    require_fresh(out)?;
    let bench = generate_synthetic_benchmark(&cfg.synth_specs())?;
    write_benchmark(&bench, out)?;
    let mut pool: Option<DatasetManifest> = None;
    for (train, test) in bench.subsets.values() {
        for m in [train, test] {
            pool = Some(match pool {
                None => DatasetManifest::new("pool", m.split, m.samples.clone())?,
                Some(p) => p.union(m, "pool")?,
            });
        }
    }
    if let Some(p) = pool {
        fasw_core::data::write_manifest(&p, &out.join("pool.csv"))?;
    }
    let path = out.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    println!("{}", out.display());
    Ok(())
}

fn build_protocols(
    args: &ConfigArgs,
    manifest_path: &Path,
    holdout: Option<String>,
    kmax: Option<usize>,
    out: &Path,
) -> CliResult<()> {
    let mut cfg = load_config(args)?;
    set_opt(&mut cfg, "protocol.holdout", holdout)?;
    set_opt(&mut cfg, "protocol.kmax", kmax)?;
    validated(&cfg)?;
    require_fresh(out)?;
    let (mut manifest, store) = open_manifest(&cfg, manifest_path)?;
    let clusters = assign_illumination_clusters(&mut manifest, &store, cfg.kmax, cfg.kmeans_restarts, cfg.seed)?;
    log::info!("illumination clusters: K = {}", clusters.k);
    let spec = build_protocol_splits(&manifest, &cfg.protocol_config())?;
    check_protocol(&spec, manifest.len())?;
    write_protocol(&spec, out)?;
    for (name, text) in [("sse_curve.csv", sse_curve_csv(&clusters.sse_curve)), ("config.txt", cfg.to_text())] {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    println!("{}", out.display());
    Ok(())
}

fn pretrain_source(
    cfg: &ExperimentConfig,
    train_path: &Path,
    evals: &[PathBuf],
    with_head: bool,
    out: &Path,
) -> CliResult<()> {
    let (train, store) = open_manifest(cfg, train_path)?;
    evals.iter().try_for_each(|p| require(p))?;
    let (run, mut report) = new_run(cfg, out, "pretrain-source", ScorerKind::Sce, &[train_path.to_path_buf()])?;
    let mut model = build_toy_fas_model(cfg.model.clone(), cfg.seed)?;
    let log = fit_original_loss(&mut model, &train, &store, &cfg.source_schedule())?;
    save_model(&model, &run.checkpoint("model"))?;
    write_log(&run, LOSS_LOG, &log)?;
    if with_head {
        let head = attach_binary_head(&model, cfg.seed);
        let (head, head_log) = fasw_core::baselines::train_head(&model, head, &train, &store, &cfg.head_schedule())?;
        save_head(&head, &run.checkpoint("head"))?;
        write_log(&run, HEAD_LOSS_LOG, &head_log)?;
    }
    evaluate_manifests(cfg, &model, evals, &run.path, &mut report)?;
    finish_run(&run, &report)?;
    Ok(())
}

/// First spoof samples of a manifest, for mask grids.
fn mask_rows(manifest: &DatasetManifest, store: &dyn SampleStore) -> Result<(Batch, Array4<f64>)> {
    let batch = Batch {
        samples: manifest.spoofs().take(MASK_ROWS).cloned().collect(),
    };
    let images = batch.images(store)?;
    Ok((batch, images))
}

fn masks_of(model: &FasModel, sre: &Sre, images: &Array4<f64>) -> Result<Vec<ndarray::Array2<f64>>> {
    Ok(sre_forward(sre, &model.extract_features(images)?)?
        .into_iter()
        .map(|m| m.soft)
        .collect())
}

/// Stores the panel inputs of a mask grid; rendered later by `report`.
fn write_mask_samples(run: &RunDir, images: &Array4<f64>, panels: &[(&str, Vec<ndarray::Array2<f64>>)]) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert("input", images.clone().into_dyn());
    for (i, (_, maps)) in panels.iter().enumerate() {
        let (h, w) = maps.first().map(|m| m.dim()).unwrap_or((0, 0));
        let mut stacked = Array3::<f64>::zeros((maps.len(), h, w));
        for (k, m) in maps.iter().enumerate() {
            stacked.index_axis_mut(Axis(0), k).assign(m);
        }
        store.insert(format!("panel{i}"), stacked.into_dyn());
    }
    let mut columns = vec!["input".to_string()];
    columns.extend(panels.iter().map(|(n, _)| n.to_string()));
    let meta = HashMap::from([("columns".to_string(), columns.join(","))]);
    store.save(&run.file(MASK_SAMPLES), Some(meta))
}

fn finetune_sre(
    cfg: &ExperimentConfig,
    source_arg: &Path,
    target_path: &Path,
    evals: &[PathBuf],
    out: &Path,
) -> CliResult<()> {
    let source_path = checkpoint_path(source_arg, "model")?;
    let (target, store) = open_manifest(cfg, target_path)?;
    evals.iter().try_for_each(|p| require(p))?;
    let inputs = [source_path.clone(), target_path.to_path_buf()];
    let (run, mut report) = new_run(cfg, out, "finetune-sre", ScorerKind::SceSre, &inputs)?;
    let source = load_model(&source_path)?;
    let sre = Sre::new(cfg.sre.clone(), &source.config, cfg.seed)?;

    let autoencoder;
    let oracle = SyntheticOracle::new(&store);
    let rec: &dyn Reconstructor = match cfg.reconstructor {
        ReconstructorKind::SyntheticOracle => &oracle,
        ReconstructorKind::LiveAutoencoder => {
            let lives = target.lives().map(|s| store.image(s)).collect::<Result<Vec<Image>>>()?;
            autoencoder = LiveAutoencoder::fit(&lives, cfg.ae_components, cfg.seed)?;
            &autoencoder
        }
    };
    let stage1 = finetune_stage1(&source, &sre, &target, &store, rec, &cfg.stage1_config())?;
    save_model(&stage1.target_model, &run.checkpoint("model"))?;
    save_sre(&stage1.sre, &run.checkpoint("sre"))?;
    write_log(&run, LOSS_LOG, &stage1.log)?;

    let (batch, images) = mask_rows(&target, &store)?;
    if !batch.is_empty() {
        let (mh, mw) = stage1.sre.mask_size;
        let mut prelim = Vec::new();
        let mut gt = Vec::new();
        for (i, s) in batch.samples.iter().enumerate() {
            let img = Image {
                data: images.index_axis(Axis(0), i).to_owned(),
            };
            let pm = compute_preliminary_mask(s, &img, rec, cfg.stage1.threshold)?;
            prelim.push(fasw_core::sre::resample_mask(&pm.mask, mh, mw).to_f64());
            if let Some(g) = store.gt_mask(s)? {
                gt.push(fasw_core::sre::resample_mask(&g, mh, mw).to_f64());
            }
        }
        let mut panels = vec![
            ("preliminary", prelim),
            ("M(f^T)", masks_of(&stage1.target_model, &stage1.sre, &images)?),
        ];
        if gt.len() == batch.len() {
            panels.push(("ground truth", gt));
        }
        write_mask_samples(&run, &images, &panels)?;
    }

    let scorer = WithSre(&stage1.target_model, &stage1.sre);
    evaluate_manifests(cfg, &scorer, evals, &run.path, &mut report)?;
    let mut ious = serde_json::Map::new();
    for path in evals {
        let (m, store) = open_manifest(cfg, path)?;
        let has_gt = m.spoofs().next().is_some() && m.spoofs().all(|s| s.gt_mask_path.is_some());
        if has_gt {
            let iou = mean_spoof_iou(&stage1.target_model, &stage1.sre, &m, &store)?;
            ious.insert(evaluation_name(path, &Default::default()), iou.into());
        }
    }
    if !ious.is_empty() {
        report.extra.insert("mean_spoof_iou".into(), ious.into());
    }
    finish_run(&run, &report)?;
    Ok(())
}

pub struct WrapperInputs {
    pub source: PathBuf,
    pub target: PathBuf,
    pub sre: Option<PathBuf>,
}

fn train_wrapper(
    cfg: &ExperimentConfig,
    ckpts: &WrapperInputs,
    target_path: &Path,
    evals: &[PathBuf],
    out: &Path,
) -> CliResult<()> {
    let source_path = checkpoint_path(&ckpts.source, "model")?;
    let target_ckpt = checkpoint_path(&ckpts.target, "model")?;
    let sre_path = ckpts.sre.as_deref().map(|p| checkpoint_path(p, "sre")).transpose()?;
    let (target, store) = open_manifest(cfg, target_path)?;
    evals.iter().try_for_each(|p| require(p))?;
    let mut inputs = vec![source_path.clone(), target_ckpt.clone(), target_path.to_path_buf()];
    inputs.extend(sre_path.clone());
    let scorer_kind = if sre_path.is_some() { ScorerKind::SceSre } else { ScorerKind::Sce };
    let (run, mut report) = new_run(cfg, out, "train-wrapper", scorer_kind, &inputs)?;

    let source = load_model(&source_path)?;
    let teacher = load_model(&target_ckpt)?;
    let sre = sre_path.map(|p| load_sre(&p, &source.config)).transpose()?;
    let discs = WrapperDiscriminators::new(cfg.disc.clone(), &source.config, cfg.seed)?;
    let stage2 = train_stage2(&source, &teacher, sre.as_ref(), &discs, &target, &store, &cfg.stage2_config())?;

    save_model(&stage2.student, &run.checkpoint("model"))?;
    save_discriminator(&stage2.discriminators.source, &run.checkpoint("disc_source"))?;
    if let Some(t) = &stage2.discriminators.target {
        save_discriminator(t, &run.checkpoint("disc_target"))?;
    }
    if let Some(sre) = &sre {
        save_sre(sre, &run.checkpoint("sre"))?;
    }
    write_log(&run, LOSS_LOG, &stage2.log)?;

    if let Some(sre) = &sre {
        let (batch, images) = mask_rows(&target, &store)?;
        if !batch.is_empty() {
            let panels = [
                ("M(f^S)", masks_of(&source, sre, &images)?),
                ("M(f^T)", masks_of(&teacher, sre, &images)?),
                ("M(f^new)", masks_of(&stage2.student, sre, &images)?),
            ];
            write_mask_samples(&run, &images, &panels)?;
        }
    }

    let frozen: serde_json::Map<String, serde_json::Value> = stage2
        .frozen_hashes
        .iter()
        .map(|(k, v)| (k.clone(), v.clone().into()))
        .collect();
    report.extra.insert("frozen_hashes".into(), frozen.into());
    match &sre {
        Some(sre) => {
            let scorer = WithSre(&stage2.student, sre);
            evaluate_manifests(cfg, &scorer, evals, &run.path, &mut report)?;
        }
        None => {
            evaluate_manifests(cfg, &stage2.student, evals, &run.path, &mut report)?;
        }
    }
    finish_run(&run, &report)?;
    Ok(())
}

pub struct BaselineInputs {
    pub method: String,
    pub source_ckpt: Option<PathBuf>,
    pub head_ckpt: Option<PathBuf>,
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: PathBuf,
}

fn run_baseline(cfg: &ExperimentConfig, args: &BaselineInputs, evals: &[PathBuf], out: &Path) -> CliResult<()> {
    let registry = MethodRegistry::default();
    let method = registry.get(&args.method).map_err(usage)?;
    let source_path = args.source_ckpt.as_deref().map(|p| checkpoint_path(p, "model")).transpose()?;
    let head_path = match (&args.head_ckpt, &args.source_ckpt) {
        (Some(h), _) => Some(checkpoint_path(h, "head")?),
        (None, Some(s)) if s.is_dir() && args.method == "lwf" => Some(checkpoint_path(s, "head")?),
        _ => None,
    };
    if !method.source_free() && args.source_manifest.is_none() {
        return Err(CliError::Usage(format!("`{}` needs --source-manifest", args.method)));
    }
    let (target, store) = open_manifest(cfg, &args.target_manifest)?;
    // Source-free methods never open the source manifest.
    let source_train = match (&args.source_manifest, method.source_free()) {
        (Some(p), false) => Some(open_manifest(cfg, p)?.0),
        _ => None,
    };
    evals.iter().try_for_each(|p| require(p))?;

    let mut inputs: Vec<PathBuf> = source_path.iter().chain(&head_path).cloned().collect();
    inputs.push(args.target_manifest.clone());
    if let (Some(p), false) = (&args.source_manifest, method.source_free()) {
        inputs.push(p.clone());
    }
    let scorer_kind = if args.method == "lwf" { ScorerKind::Head } else { ScorerKind::Sce };
    let command = format!("run-baseline:{}", args.method);
    let (run, mut report) = new_run(cfg, out, &command, scorer_kind, &inputs)?;

    let source = source_path.map(|p| load_model(&p)).transpose()?;
    let head = head_path.map(|p| load_head(&p)).transpose()?;
    let schedule = cfg.baseline_schedule();
    let lwf = cfg.lwf_config();
    let ctx = BaselineContext {
        model_config: source.as_ref().map(|m| &m.config).unwrap_or(&cfg.model),
        source: source.as_ref(),
        source_head: head.as_ref(),
        source_train: source_train.as_ref(),
        target_train: &target,
        store: &store,
        schedule: &schedule,
        lwf: &lwf,
        seed: cfg.seed,
    };
    let (trained, log) = method.run(&ctx)?;
    match &trained {
        TrainedModel::Sce(m) => save_model(m, &run.checkpoint("model"))?,
        TrainedModel::Head(h) => {
            save_model(&h.backbone, &run.checkpoint("model"))?;
            save_head(&h.head, &run.checkpoint("head"))?;
        }
    }
    write_log(&run, LOSS_LOG, &log)?;
    evaluate_manifests(cfg, &trained, evals, &run.path, &mut report)?;
    finish_run(&run, &report)?;
    Ok(())
}

/// Any model `evaluate` can score.
pub enum LoadedModel {
    Exported(InferenceModel),
    Sce(FasModel),
    SceSre(FasModel, Sre),
    Head(HeadModel),
}

impl Scorer for LoadedModel {
    fn spoof_scores(&self, images: &Array4<f64>) -> Result<Vec<f64>> {
        match self {
            LoadedModel::Exported(m) => Scorer::spoof_scores(m, images),
            LoadedModel::Sce(m) => Scorer::spoof_scores(m, images),
            LoadedModel::SceSre(m, sre) => WithSre(m, sre).spoof_scores(images),
            LoadedModel::Head(h) => h.spoof_scores(images),
        }
    }
}

/// Loads a `.fasw` file or the final model of a run directory.
pub fn load_scorer(path: &Path) -> CliResult<(LoadedModel, Option<String>)> {
    require(path)?;
    if !path.is_dir() {
        return Ok((LoadedModel::Exported(InferenceModel::load(path)?), None));
    }
    let run = RunDir::open(path).map_err(usage)?;
    let model = load_model(&run.checkpoint("model"))?;
    let loaded = match run.info.scorer {
        ScorerKind::Sce => LoadedModel::Sce(model),
        ScorerKind::SceSre => {
            let sre = load_sre(&run.checkpoint("sre"), &model.config)?;
            LoadedModel::SceSre(model, sre)
        }
        ScorerKind::Head => LoadedModel::Head(HeadModel {
            head: load_head(&run.checkpoint("head"))?,
            backbone: model,
        }),
    };
    Ok((loaded, Some(run.info.run_id)))
}

fn evaluate(cfg: &ExperimentConfig, model: &Path, manifests: &[PathBuf], out: &Path) -> CliResult<()> {
    validated(cfg)?;
    manifests.iter().try_for_each(|p| require(p))?;
    if out.exists() {
        return Err(CliError::Usage(format!("`{}` already exists", out.display())));
    }
    let (scorer, run_id) = load_scorer(model)?;
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut report = Report::new("evaluate", run_id, None);
    let rocs = evaluate_manifests(cfg, &scorer, manifests, &dir, &mut report)?;
    std::fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
    let mut plot = LinePlot::roc("ROC");
    for (name, path) in &rocs {
        plot.series.push(plots::roc_series(name, path)?);
    }
    plots::save_png(&plot.render(), &dir.join("roc.png"))?;
    println!("{}", out.display());
    Ok(())
}

fn export(run_path: &Path, out: &Path) -> CliResult<()> {
    require(run_path)?;
    if out.exists() {
        return Err(CliError::Usage(format!("`{}` already exists", out.display())));
    }
    let run = RunDir::open(run_path).map_err(usage)?;
    let student = load_model(&run.checkpoint("model"))?;
    let sre_path = run.checkpoint("sre");
    let sre = if run.info.scorer == ScorerKind::SceSre {
        Some(load_sre(&sre_path, &student.config)?)
    } else {
        None
    };
    let exported = export_inference(&student, sre.as_ref())?;
    exported.save(out)?;
    println!("{}", out.display());
    Ok(())
}

fn predict(model: &Path, images: &Path, out: &Path, masks_dir: Option<&Path>) -> CliResult<()> {
    require(model)?;
    require(images)?;
    let model = InferenceModel::load(model)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(images)
        .map_err(|e| Error::io(images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if let Some(d) = masks_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut csv = String::from("file,spoof_score,mask_mean\n");
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        let pred = model.predict(&Image::from_png(&bytes)?)?;
        let name = f.file_name().unwrap_or_default().to_string_lossy();
        let mask_mean = pred.mask.as_ref().map(|m| m.mean().to_string()).unwrap_or_default();
        csv.push_str(&format!("{name},{},{mask_mean}\n", pred.spoof_score));
        if let (Some(d), Some(m)) = (masks_dir, &pred.mask) {
            let p = d.join(&*name);
            std::fs::write(&p, fasw_core::data::soft_map_png(&m.soft)?).map_err(|e| Error::io(&p, e))?;
        }
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    println!("{}", out.display());
    Ok(())
}

/// Mask grid rows from a run's `masks.safetensors`.
fn load_mask_grid(path: &Path) -> Result<(Vec<String>, Vec<Vec<Tile>>)> {
    let (store, meta) = ParamStore::load(path)?;
    let columns: Vec<String> = meta
        .get("columns")
        .ok_or_else(|| Error::Input(format!("`{}` lists no columns", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let input = store
        .get("input")
        .ok_or_else(|| Error::Input(format!("`{}` has no input images", path.display())))?;
    let n = input.shape()[0];
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let mut row = vec![Tile::Rgb(
            input.index_axis(Axis(0), k).to_owned().into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Input(e.to_string()))?,
        )];
        for i in 0..columns.len() - 1 {
            let panel = store
                .get(&format!("panel{i}"))
                .ok_or_else(|| Error::Input(format!("`{}` is missing panel {i}", path.display())))?;
            let map = panel.slice(s![k, .., ..]).to_owned();
            row.push(Tile::Gray(map));
        }
        rows.push(row);
    }
    Ok((columns, rows))
}

fn report(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    runs.iter().try_for_each(|p| require(p))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut missing = Vec::new();
    let mut rendered = Vec::new();
    let mut roc = LinePlot::roc("ROC");
    for run in runs {
        let label = run.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match Report::load(&run.join(REPORT_FILE)) {
            Ok(r) => {
                for name in r.evaluations.keys() {
                    let csv = run.join(format!("roc_{name}.csv"));
                    match plots::roc_series(&format!("{label}:{name}"), &csv) {
                        Ok(s) => roc.series.push(s),
                        Err(_) => missing.push(csv),
                    }
                }
            }
            Err(_) => missing.push(run.join(REPORT_FILE)),
        }
        let log = run.join(LOSS_LOG);
        match plots::loss_series(&log) {
            Ok(series) => {
                let mut plot = LinePlot::new(&format!("{label} losses"), "epoch", "loss");
                plot.series = series;
                let path = out.join(format!("loss_{label}.png"));
                plots::save_png(&plot.render(), &path)?;
                rendered.push(path);
            }
            Err(_) => missing.push(log),
        }
        let masks = run.join(MASK_SAMPLES);
        match load_mask_grid(&masks) {
            Ok((columns, rows)) => {
                let path = out.join(format!("masks_{label}.png"));
                plots::save_png(&plots::mask_grid(&columns, &rows)?, &path)?;
                rendered.push(path);
            }
            Err(_) => missing.push(masks),
        }
    }
    if !roc.series.is_empty() {
        let path = out.join("roc.png");
        plots::save_png(&roc.render(), &path)?;
        rendered.push(path);
    }
    for m in &missing {
        eprintln!("skipped missing artifact {}", m.display());
    }
    if rendered.is_empty() {
        return Err(CliError::Run(Error::Input("no artifacts to render".into())));
    }
    for r in &rendered {
        println!("{}", r.display());
    }
    Ok(())
}
