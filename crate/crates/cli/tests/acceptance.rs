//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `FASW_ACCEPTANCE=1,3,8` runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fasw_cli::config::ExperimentConfig;
use fasw_cli::Report;
use fasw_core::autograd::{Tape, Tensor, Var};
use fasw_core::baselines::{lwf_distill, naive_finetune, train_head};
use fasw_core::data::{
    generate_synthetic_benchmark, write_benchmark, AccessRecorder, BinaryMask, DatasetManifest, DiskStore,
    EthnicityProfile, Image, ImageSample, Label, PatchGenerator, SampleStore, SpoofMacro, SpoofTypeSpec,
    SyntheticBenchmark, SyntheticDomainSpec,
};
use fasw_core::eval::{evaluate_manifest, WithSre};
use fasw_core::metrics::{
    acer, auc_trapezoid, error_rates, evaluate_scores, roc_curve, round_half_away, tpr_at_fpr, ScoreSet,
};
use fasw_core::model::{attach_binary_head, build_toy_fas_model, original_loss_var, ModelConfig, SceTargets};
use fasw_core::params::{Bound, ParamStore};
use fasw_core::protocols::{
    build_protocol_splits, check_protocol, cluster_features, illumination_features, AttributeTarget, ProtocolConfig,
};
use fasw_core::sre::{
    compute_preliminary_mask, finetune_stage1, mask_loss, mask_loss_var, mean_spoof_iou, threshold_difference,
    PreliminaryMask, Provenance, Reconstructor, ReconstructorKind, Sre, SreConfig, SpoofMask, SyntheticOracle,
};
use fasw_core::train::{fit_original_loss, Schedule};
use fasw_core::wrapper::{
    adversarial_losses, discriminator_loss_var, export_inference, generator_loss_var, spoof_consistency_loss,
    spoof_consistency_var, total_loss, train_stage2, DiscConfig, InferenceModel, LossWeights,
    MultiScaleDiscriminator, Stage2Config, WrapperDiscriminators,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("FASW_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));

    let mut pipeline: Option<Vec<SeedRun>> = None;
    let mut failures = 0;
    for n in 1..=10u32 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1_metric_arithmetic(),
            2 => criterion_2_loss_analytics(),
            3 => criterion_3_threshold_oracle(),
            4 | 5 => {
                let runs = pipeline.get_or_insert_with(run_pipeline_seeds);
                if n == 4 {
                    criterion_4_sre_localization(runs)
                } else {
                    criterion_5_anti_forgetting(runs)
                }
            }
            6 => criterion_6_freeze_and_export(),
            7 => criterion_7_protocol_builder(),
            8 => criterion_8_roc_suite(),
            9 => criterion_9_source_free_audit(),
            10 => criterion_10_determinism(),
            _ => unreachable!(),
        }));
        let outcome = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} ({secs:.1}s): {}", outcome.detail);
        failures += usize::from(!outcome.pass);
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

// ---------------------------------------------------------------- 1

fn criterion_1_metric_arithmetic() -> Outcome {
    let start = Instant::now();
    // (APCER, BPCER, rounded ACER)
    let rows = [(9.4, 9.5, 9.5), (8.9, 8.0, 8.5), (11.4, 10.1, 10.8)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (a, b, rounded) in rows {
        let exact = (a + b) / 2.0;
        let got = acer(a, b);
        ok &= got == exact && round_half_away(got, 1) == rounded;

        // Same rates produced from scores: misses out of 1000 per class.
        let n = 1000;
        let miss_spoof = (a * 10.0_f64).round() as usize;
        let reject_live = (b * 10.0_f64).round() as usize;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            scores.push(if i < miss_spoof { 0.2 } else { 0.8 });
            labels.push(Label::Spoof);
            scores.push(if i < reject_live { 0.8 } else { 0.2 });
            labels.push(Label::Live);
        }
        let rates = error_rates(&ScoreSet::new(scores, labels).unwrap(), 0.5).unwrap();
        ok &= rates.apcer == a && rates.bpcer == b && rates.acer == exact;
        detail.push(format!("{a}/{b} -> {got} -> {}", round_half_away(got, 1)));
    }
    let fast = start.elapsed().as_secs_f64() < 1.0;
    Outcome::new(ok && fast, detail.join(", "))
}

// ---------------------------------------------------------------- 2

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_size: (8, 8),
        channels: vec![3, 4],
        stride: 2,
        sce_channels: 3,
        leaky_slope: 0.1,
    }
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 3, h, w), |_| rng.random_range(0.0..1.0))
}

/// Loss built from bound parameter stores; recorded on a fresh tape.
type LossFn<'a> = dyn for<'t> Fn(&'t Tape, &[Bound<'t>]) -> Var<'t> + 'a;

fn loss_fn<F: for<'t> Fn(&'t Tape, &[Bound<'t>]) -> Var<'t>>(f: F) -> F {
    f
}

fn eval_loss(stores: &[ParamStore], trainable: &[bool], f: &LossFn) -> (f64, Vec<BTreeMap<String, Tensor>>) {
    let tape = Tape::new();
    let bounds: Vec<Bound> = stores.iter().zip(trainable).map(|(s, &t)| s.bind(&tape, t)).collect();
    let loss = f(&tape, &bounds);
    let value = loss.item();
    let grads = tape.backward(loss);
    (value, bounds.iter().map(|b| b.grads(&grads)).collect())
}

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over `samples` random coordinates of the
/// trainable stores, with central differences.
fn gradient_error(stores: &[ParamStore], trainable: &[bool], f: &LossFn, samples: usize, seed: u64) -> f64 {
    let (_, grads) = eval_loss(stores, trainable, f);
    let mut coords = Vec::new();
    for (i, store) in stores.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        for (name, t) in store.iter() {
            for k in 0..t.len() {
                coords.push((i, name.to_string(), k));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, coords.len(), samples).into_vec()
    };
    let h = 1e-5;
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for &c in &picks {
        let (i, name, k) = &coords[c];
        let analytic = grads[*i][name].as_slice().unwrap()[*k];
        let mut shifted = stores.to_vec();
        let base = stores[*i].get(name).unwrap().as_slice().unwrap()[*k];
        shifted[*i].get_mut(name).unwrap().as_slice_mut().unwrap()[*k] = base + h;
        let up = eval_loss(&shifted, trainable, f).0;
        shifted[*i].get_mut(name).unwrap().as_slice_mut().unwrap()[*k] = base - h;
        let down = eval_loss(&shifted, trainable, f).0;
        let numeric = (up - down) / (2.0 * h);
        diff += (analytic - numeric).powi(2);
        na += analytic * analytic;
        nb += numeric * numeric;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

fn criterion_2_loss_analytics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_oracle: f64 = 0.0;

    // Scalar oracles on 100 random inputs each.
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let m = rng.random_range(1..20);
        let dt: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let ds: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.99)).collect();
        let (gen, disc) = adversarial_losses(&dt, &ds).unwrap();
        let mut want_gen = 0.0;
        let mut want_disc = 0.0;
        for &p in &dt {
            want_gen -= p.ln() / n as f64;
            want_disc -= (1.0 - p).ln() / n as f64;
        }
        for &p in &ds {
            want_gen -= (1.0 - p).ln() / m as f64;
            want_disc -= p.ln() / m as f64;
        }
        worst_oracle = worst_oracle.max(rel_err(gen, want_gen)).max(rel_err(disc, want_disc));

        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let soft = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let other = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let bits = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.4)));
        let prelim = PreliminaryMask {
            mask: BinaryMask { data: bits.clone() },
            threshold_used: 0.1,
            provenance: Provenance::Oracle,
        };
        let got_mask = mask_loss(&SpoofMask { soft: soft.clone() }, &prelim).unwrap();
        let mut want_mask = 0.0;
        let mut want_spoof = 0.0;
        for y in 0..h {
            for x in 0..w {
                want_mask += (soft[[y, x]] - bits[[y, x]] as f64).abs();
                want_spoof += (soft[[y, x]] - other[[y, x]]).abs();
            }
        }
        want_mask /= (h * w) as f64;
        want_spoof /= (h * w) as f64;
        let got_spoof = spoof_consistency_loss(&SpoofMask { soft: soft.clone() }, &SpoofMask { soft: other }).unwrap();
        worst_oracle = worst_oracle.max(rel_err(got_mask, want_mask)).max(rel_err(got_spoof, want_spoof));

        let parts: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
        let lw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
        let weights = LossWeights::new(lw[0], lw[1], lw[2], lw[3]).unwrap();
        let got_total = total_loss(parts[0], parts[1], parts[2], parts[3], &weights).unwrap();
        let want_total = lw[0] * parts[0] + lw[1] * parts[1] + lw[2] * parts[2] + lw[3] * parts[3];
        worst_oracle = worst_oracle.max(rel_err(got_total, want_total));
    }

    // Gradient checks on toy networks.
    let cfg = toy_model_config();
    let student = build_toy_fas_model(cfg.clone(), 11).unwrap();
    let source = build_toy_fas_model(cfg.clone(), 12).unwrap();
    let target = build_toy_fas_model(cfg.clone(), 13).unwrap();
    let sre = Sre::new(
        SreConfig {
            hidden: 3,
            mask_size: Some((8, 8)),
            ..SreConfig::default()
        },
        &cfg,
        14,
    )
    .unwrap();
    let disc_cfg = DiscConfig {
        hidden: 3,
        ..DiscConfig::default()
    };
    let dis_s = MultiScaleDiscriminator::new(disc_cfg.clone(), &cfg.channels, 15).unwrap();
    let dis_t = MultiScaleDiscriminator::new(disc_cfg, &cfg.channels, 16).unwrap();
    let n_params = [&student.params, &sre.params, &dis_s.params, &dis_t.params]
        .iter()
        .map(|p| p.num_scalars())
        .sum::<usize>();
    let images = random_images(&mut rng, 3, 8, 8);
    let mask_targets = Array4::from_shape_fn((3, 1, 8, 8), |_| f64::from(u8::from(rng.random_bool(0.3))));
    let sce_targets = SceTargets::for_labels(&[true, false, false], cfg.depth_size());
    let weights = LossWeights::new(1.0, 1.0, 0.1, 0.1).unwrap();

    let x = || images.clone().into_dyn();
    // Stores: [student, sre, dis_s, dis_t, source, target]
    let stores = vec![
        student.params.clone(),
        sre.params.clone(),
        dis_s.params.clone(),
        dis_t.params.clone(),
        source.params.clone(),
        target.params.clone(),
    ];
    let adversarial = |teacher: usize, disc: usize, generator: bool| {
        let (student, source, target, dis_s, dis_t, x) = (&student, &source, &target, &dis_s, &dis_t, &x);
        loss_fn(move |tape, b| {
            let input = tape.constant(x());
            let s_pyr = student.extract(&b[0], input);
            let teacher_model = if teacher == 4 { source } else { target };
            let t_pyr = teacher_model.extract(&b[teacher], input);
            let d = if disc == 2 { dis_s } else { dis_t };
            let (_, d_t) = d.forward(&b[disc], &t_pyr);
            let (_, d_s) = d.forward(&b[disc], &s_pyr);
            if generator {
                generator_loss_var(d_t, d_s)
            } else {
                discriminator_loss_var(d_t, d_s)
            }
        })
    };
    let checks: Vec<(&str, Box<LossFn>, [bool; 6])> = vec![
        ("L_S", Box::new(adversarial(4, 2, true)), [true, false, true, false, false, false]),
        ("L_T", Box::new(adversarial(5, 3, true)), [true, false, false, true, false, false]),
        ("L_Ds", Box::new(adversarial(4, 2, false)), [false, false, true, false, false, false]),
        ("L_Dt", Box::new(adversarial(5, 3, false)), [false, false, false, true, false, false]),
        (
            "L_Mask",
            Box::new(loss_fn(|tape, b| {
                let out = student.forward(&b[0], tape.constant(x()), Some((&sre, &b[1])));
                mask_loss_var(out.mask.unwrap(), &mask_targets)
            })),
            [true, true, false, false, false, false],
        ),
        (
            "L_Spoof",
            Box::new(loss_fn(|tape, b| {
                let input = tape.constant(x());
                let m_new = student.forward(&b[0], input, Some((&sre, &b[1]))).mask.unwrap();
                let m_src = source.forward(&b[4], input, Some((&sre, &b[1]))).mask.unwrap();
                spoof_consistency_var(m_new, m_src)
            })),
            [true, false, false, false, false, false],
        ),
        (
            "L_total",
            Box::new(loss_fn(|tape, b| {
                let input = tape.constant(x());
                let out = student.forward(&b[0], input, Some((&sre, &b[1])));
                let l_orig = original_loss_var(out.depth, out.live_logit, &sce_targets);
                let m_src = source.forward(&b[4], input, Some((&sre, &b[1]))).mask.unwrap();
                let l_spoof = spoof_consistency_var(out.mask.unwrap(), m_src);
                let s_pyr = student.extract(&b[0], input);
                let (_, ds_src) = dis_s.forward(&b[2], &source.extract(&b[4], input));
                let (_, ds_new) = dis_s.forward(&b[2], &s_pyr);
                let (_, dt_tgt) = dis_t.forward(&b[3], &target.extract(&b[5], input));
                let (_, dt_new) = dis_t.forward(&b[3], &s_pyr);
                l_orig
                    .scale(weights.orig)
                    .add(l_spoof.scale(weights.spoof))
                    .add(generator_loss_var(ds_src, ds_new).scale(weights.source_adv))
                    .add(generator_loss_var(dt_tgt, dt_new).scale(weights.target_adv))
            })),
            [true, false, false, false, false, false],
        ),
    ];
    let mut worst_grad: f64 = 0.0;
    let mut per_loss = Vec::new();
    for (k, (name, f, trainable)) in checks.iter().enumerate() {
        let e = gradient_error(&stores, trainable, f.as_ref(), 200, k as u64);
        per_loss.push(format!("{name} {e:.1e}"));
        worst_grad = worst_grad.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_oracle <= 1e-10 && worst_grad < 1e-4 && n_params <= 5000 && secs < 60.0;
    Outcome::new(
        pass,
        format!(
            "oracle rel err {worst_oracle:.1e}; gradient rel err [{}]; {n_params} params",
            per_loss.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Returns a fixed reconstruction.
struct FixedReconstruction(Image);

impl Reconstructor for FixedReconstruction {
    fn kind(&self) -> ReconstructorKind {
        ReconstructorKind::SyntheticOracle
    }

    fn reconstruct(&self, _sample: &ImageSample, _image: &Image) -> fasw_core::Result<Image> {
        Ok(self.0.clone())
    }
}

fn spoof_sample() -> ImageSample {
    ImageSample {
        sample_id: "X-s0000_000".into(),
        path: "x.png".into(),
        label: Label::Spoof,
        spoof_macro: SpoofMacro::Print,
        spoof_micro: "print".into(),
        ethnicity: "eth_a".into(),
        age: 30,
        illum_cluster: None,
        domain_id: "X".into(),
        gt_mask_path: None,
    }
}

fn criterion_3_threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut boundary_pixels = 0;
    for _ in 0..100 {
        // Multiples of 1/64 keep every channel sum exact.
        let q = |r: &mut ChaCha8Rng| r.random_range(0..=64) as f64 / 64.0;
        let a = Array3::from_shape_fn((3, 8, 8), |_| q(&mut rng));
        let b = Array3::from_shape_fn((3, 8, 8), |_| q(&mut rng));
        let mut p = Array2::<f64>::zeros((8, 8));
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    p[[y, x]] += (a[[c, y, x]] - b[[c, y, x]]).abs();
                }
            }
        }
        // Threshold taken from an actual pixel so the boundary is exercised.
        let t = loop {
            let v = p[[rng.random_range(0..8), rng.random_range(0..8)]];
            if v > 0.0 && v < 3.0 {
                break v;
            }
            if p.iter().all(|&v| v <= 0.0 || v >= 3.0) {
                break 0.5;
            }
        };
        let rec = FixedReconstruction(Image { data: b });
        let got = compute_preliminary_mask(&spoof_sample(), &Image { data: a }, &rec, t)
            .unwrap()
            .mask;
        let direct = threshold_difference(&p, t);
        for y in 0..8 {
            for x in 0..8 {
                let want = u8::from(p[[y, x]] >= t);
                boundary_pixels += usize::from(p[[y, x]] == t);
                mismatches += usize::from(got.data[[y, x]] != want) + usize::from(direct.data[[y, x]] != want);
            }
        }
    }
    Outcome::new(
        mismatches == 0 && boundary_pixels > 0,
        format!("{mismatches} mismatches over 100 images, {boundary_pixels} pixels exactly at T"),
    )
}

// ---------------------------------------------------------------- 4, 5

struct SeedRun {
    seed: u64,
    iou: f64,
    /// Source-domain AUC drop for naive, −L_Spoof and full.
    source_drop: [f64; 3],
    target_auc: [f64; 3],
}

fn auc(scorer: &dyn fasw_core::eval::Scorer, m: &DatasetManifest, store: &dyn SampleStore) -> f64 {
    evaluate_manifest(scorer, m, store, &[0.005], 0.005).unwrap().auc
}

/// Source pre-training, stage 1, naive fine-tuning and both wrapper variants
/// with the default experiment configuration.
fn run_pipeline(seed: u64) -> SeedRun {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let bench = generate_synthetic_benchmark(&cfg.synth_specs()).unwrap();
    let st = &bench.store;
    let (a_tr, a_te) = &bench.subsets["A"];
    let (b_tr, b_te) = &bench.subsets["B"];

    let mut source = build_toy_fas_model(cfg.model.clone(), seed).unwrap();
    fit_original_loss(&mut source, a_tr, st, &cfg.source_schedule()).unwrap();
    let base = auc(&source, a_te, st);

    let sre0 = Sre::new(cfg.sre.clone(), &source.config, seed).unwrap();
    let s1 = finetune_stage1(&source, &sre0, b_tr, st, &SyntheticOracle::new(st), &cfg.stage1_config()).unwrap();
    let iou = mean_spoof_iou(&s1.target_model, &s1.sre, b_te, st).unwrap();

    let (naive, _) = naive_finetune(&source, b_tr, st, &cfg.baseline_schedule()).unwrap();
    let mut drops = [base - auc(&naive, a_te, st), 0.0, 0.0];
    let mut target = [auc(&naive, b_te, st), 0.0, 0.0];
    for (i, spoof_weight) in [(1, 0.0), (2, cfg.stage2.weights.spoof)] {
        let mut c2 = cfg.stage2_config();
        c2.weights.spoof = spoof_weight;
        let discs = WrapperDiscriminators::new(cfg.disc.clone(), &source.config, seed).unwrap();
        let out = train_stage2(&source, &s1.target_model, Some(&s1.sre), &discs, b_tr, st, &c2).unwrap();
        let scorer = WithSre(&out.student, &s1.sre);
        drops[i] = base - auc(&scorer, a_te, st);
        target[i] = auc(&scorer, b_te, st);
    }
    SeedRun {
        seed,
        iou,
        source_drop: drops,
        target_auc: target,
    }
}

fn run_pipeline_seeds() -> Vec<SeedRun> {
    (0..3)
        .map(|seed| {
            let r = run_pipeline(seed);
            println!(
                "  seed {}: IoU {:.3}; source AUC drop naive {:.4}, -L_Spoof {:.4}, full {:.4}; target AUC {:.4} {:.4} {:.4}",
                r.seed,
                r.iou,
                r.source_drop[0],
                r.source_drop[1],
                r.source_drop[2],
                r.target_auc[0],
                r.target_auc[1],
                r.target_auc[2]
            );
            r
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_4_sre_localization(runs: &[SeedRun]) -> Outcome {
    let m = median(runs.iter().map(|r| r.iou).collect());
    let per: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.iou)).collect();
    Outcome::new(m >= 0.5, format!("median soft IoU {m:.3} (seeds: {})", per.join(", ")))
}

fn criterion_5_anti_forgetting(runs: &[SeedRun]) -> Outcome {
    let med = |i: usize| median(runs.iter().map(|r| r.source_drop[i]).collect());
    let tmed = |i: usize| median(runs.iter().map(|r| r.target_auc[i]).collect());
    let (naive, no_spoof, full) = (med(0), med(1), med(2));
    let t = [tmed(0), tmed(1), tmed(2)];
    let spread = t.iter().copied().fold(f64::NEG_INFINITY, f64::max) - t.iter().copied().fold(f64::INFINITY, f64::min);
    let per_seed_spread = runs
        .iter()
        .map(|r| {
            r.target_auc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - r.target_auc.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let pass = full < no_spoof && no_spoof <= naive && spread <= 0.03;
    Outcome::new(
        pass,
        format!(
            "median source AUC drop full {full:.4} < -L_Spoof {no_spoof:.4} <= naive {naive:.4}; \
             median target AUC {:.4}/{:.4}/{:.4} (spread {spread:.4}, worst per-seed {per_seed_spread:.4})",
            t[0], t[1], t[2]
        ),
    )
}

// ---------------------------------------------------------------- 6

fn tiny_specs(seed: u64) -> BTreeMap<String, SyntheticDomainSpec> {
    let a = SyntheticDomainSpec {
        n_live: 16,
        n_spoof: 16,
        seed,
        ..SyntheticDomainSpec::default()
    };
    let b = SyntheticDomainSpec {
        spoof_types: vec![
            SpoofTypeSpec::new(SpoofMacro::Mask3d, "mannequin", PatchGenerator::Ellipse),
            SpoofTypeSpec::new(SpoofMacro::Partial, "funny_eyes", PatchGenerator::Eyes),
        ],
        seed: seed + 1,
        ..a.clone()
    };
    BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)])
}

fn short(epochs: usize, seed: u64) -> Schedule {
    Schedule {
        epochs,
        lr: 1e-3,
        seed,
        ..Schedule::default()
    }
}

fn criterion_6_freeze_and_export() -> Outcome {
    let bench = generate_synthetic_benchmark(&tiny_specs(6)).unwrap();
    let st = &bench.store;
    let (a_tr, _) = &bench.subsets["A"];
    let (b_tr, b_te) = &bench.subsets["B"];
    let cfg = ModelConfig::default();
    let mut source = build_toy_fas_model(cfg.clone(), 6).unwrap();
    fit_original_loss(&mut source, a_tr, st, &short(2, 6)).unwrap();
    let sre0 = Sre::new(SreConfig::default(), &cfg, 6).unwrap();
    let stage1 = fasw_core::sre::Stage1Config {
        schedule: short(2, 6),
        mask_epochs: 2,
        ..Default::default()
    };
    let s1 = finetune_stage1(&source, &sre0, b_tr, st, &SyntheticOracle::new(st), &stage1).unwrap();
    let before = [
        source.params.content_hash(),
        s1.target_model.params.content_hash(),
        s1.sre.params.content_hash(),
    ];
    let discs = WrapperDiscriminators::new(DiscConfig::default(), &cfg, 6).unwrap();
    let c2 = Stage2Config {
        schedule: short(2, 6),
        ..Default::default()
    };
    let out = train_stage2(&source, &s1.target_model, Some(&s1.sre), &discs, b_tr, st, &c2).unwrap();
    let after = [
        source.params.content_hash(),
        s1.target_model.params.content_hash(),
        s1.sre.params.content_hash(),
    ];
    let frozen = before == after;
    let reported = out.frozen_hashes.iter().all(|(_, h)| after.contains(h)) && !out.frozen_hashes.is_empty();

    let exported = export_inference(&out.student, Some(&s1.sre)).unwrap();
    let reloaded = InferenceModel::from_bytes(&exported.to_bytes().unwrap()).unwrap();
    let store = reloaded.parameter_store();
    let no_foreign = store.names().all(|n| !n.starts_with("disc")) && !store.is_empty();
    let counts_match =
        reloaded.num_parameters() == out.student.params.num_scalars() + s1.sre.params.num_scalars();
    let student_weights = out
        .student
        .params
        .iter()
        .all(|(k, v)| store.get(k) == Some(v));

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let inputs = random_images(&mut rng, 100, cfg.input_size.0, cfg.input_size.1);
    let a = reloaded.spoof_scores(&inputs).unwrap();
    let b = out.student.spoof_scores(&inputs, Some(&s1.sre)).unwrap();
    let agree = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let _ = b_te;
    Outcome::new(
        frozen && reported && no_foreign && counts_match && student_weights && agree,
        format!(
            "hashes unchanged {frozen}, reported {reported}; export has {} params, no discriminator/teacher entries {}, \
             bit-identical on 100 inputs {agree}",
            reloaded.num_parameters(),
            no_foreign && counts_match && student_weights
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7_protocol_builder() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;

    // Three brightness populations.
    let mut ks = Vec::new();
    for seed in 0..3u64 {
        let mut feats = Vec::new();
        for (i, brightness) in [-0.25, 0.0, 0.25].into_iter().enumerate() {
            let spec = SyntheticDomainSpec {
                n_live: 40,
                n_spoof: 0,
                brightness,
                seed: seed * 10 + i as u64,
                ..SyntheticDomainSpec::default()
            };
            let bench = generate_synthetic_benchmark(&BTreeMap::from([("A".to_string(), spec)])).unwrap();
            let (tr, te) = &bench.subsets["A"];
            for s in tr.samples.iter().chain(&te.samples) {
                feats.push(illumination_features(&bench.store.image(s).unwrap()));
            }
        }
        let x = Array2::from_shape_fn((feats.len(), feats[0].len()), |(i, j)| feats[i][j]);
        let k = cluster_features(&x, 8, 10, seed).unwrap().k;
        ks.push(k);
        ok &= k == 3;
    }
    details.push(format!("elbow K {ks:?}"));

    // Ethnicity marginal and A/B disjointness over several protocols.
    let spec = SyntheticDomainSpec {
        n_live: 300,
        n_spoof: 300,
        spoof_types: vec![
            SpoofTypeSpec::new(SpoofMacro::Print, "print", PatchGenerator::Print),
            SpoofTypeSpec::new(SpoofMacro::Replay, "replay", PatchGenerator::Replay),
            SpoofTypeSpec::new(SpoofMacro::Mask3d, "mannequin", PatchGenerator::Ellipse),
            SpoofTypeSpec::new(SpoofMacro::Makeup, "cosmetic", PatchGenerator::Strokes),
            SpoofTypeSpec::new(SpoofMacro::Partial, "funny_eyes", PatchGenerator::Eyes),
        ],
        ethnicities: vec![
            EthnicityProfile {
                label: "eth_a".into(),
                weight: 0.75,
                tint: [0.0; 3],
            },
            EthnicityProfile {
                label: "eth_x".into(),
                weight: 0.25,
                tint: [-0.1, -0.08, -0.05],
            },
        ],
        age_range: (18, 70),
        image_size: (16, 16),
        seed: 70,
        ..SyntheticDomainSpec::default()
    };
    let bench = generate_synthetic_benchmark(&BTreeMap::from([("A".to_string(), spec)])).unwrap();
    let pool = pooled(&bench);
    let mut achieved = Vec::new();
    let mut emitted = 0;
    for seed in 0..3u64 {
        for holdout in [["mannequin"], ["replay"], ["funny_eyes"]] {
            let cfg = ProtocolConfig {
                holdout_micro_types: holdout.iter().map(|s| s.to_string()).collect(),
                targets: vec![
                    "C:ethnicity=eth_x:0.52:100".parse::<AttributeTarget>().unwrap(),
                    "D:age>=50:0.6:60".parse::<AttributeTarget>().unwrap(),
                ],
                seed,
                ..ProtocolConfig::default()
            };
            let spec = build_protocol_splits(&pool, &cfg).unwrap();
            ok &= check_protocol(&spec, pool.len()).is_ok();
            let a = spec.micro_types("A");
            let b = spec.micro_types("B");
            ok &= a.is_disjoint(&b);
            let c = spec.all("C");
            let frac = c.iter().filter(|s| s.ethnicity == "eth_x").count() as f64 / c.len() as f64;
            ok &= (frac - 0.52).abs() <= 0.02 + 1e-9;
            achieved.push(format!("{:.1}%", 100.0 * frac));
            emitted += 1;
        }
    }
    details.push(format!("C minority marginal {} (target 52% ± 2pp)", achieved.join(" ")));
    details.push(format!("A/B disjoint on {emitted} protocols"));
    Outcome::new(ok, details.join("; "))
}

fn pooled(bench: &SyntheticBenchmark) -> DatasetManifest {
    let mut samples = Vec::new();
    for (tr, te) in bench.subsets.values() {
        samples.extend(tr.samples.iter().cloned());
        samples.extend(te.samples.iter().cloned());
    }
    DatasetManifest::new("pool", fasw_core::data::Split::Train, samples).unwrap()
}

// ---------------------------------------------------------------- 8

/// Mann-Whitney count with ties as one half.
fn pairwise_oracle(spoof: &[f64], live: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &s in spoof {
        for &l in live {
            wins += if s > l {
                1.0
            } else if s == l {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (spoof.len() * live.len()) as f64
}

fn score_set(spoof: &[f64], live: &[f64]) -> ScoreSet {
    let scores = spoof.iter().chain(live).copied().collect();
    let labels = spoof
        .iter()
        .map(|_| Label::Spoof)
        .chain(live.iter().map(|_| Label::Live))
        .collect();
    ScoreSet::new(scores, labels).unwrap()
}

fn criterion_8_roc_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let n = rng.random_range(2..=1000);
        let n_spoof = rng.random_range(1..n);
        // Every other set is quantised to force ties.
        let draw = |r: &mut ChaCha8Rng, shift: f64| {
            let v: f64 = r.random_range(0.0..1.0) + shift;
            if i % 2 == 0 {
                (v * 20.0).round() / 20.0
            } else {
                v
            }
        };
        let spoof: Vec<f64> = (0..n_spoof).map(|_| draw(&mut rng, 0.3)).collect();
        let live: Vec<f64> = (0..n - n_spoof).map(|_| draw(&mut rng, 0.0)).collect();
        let got = auc_trapezoid(&roc_curve(&score_set(&spoof, &live)).unwrap());
        worst = worst.max((got - pairwise_oracle(&spoof, &live)).abs());
    }
    let separated = score_set(&[0.9, 0.8, 0.95, 0.7], &[0.1, 0.2, 0.3, 0.05]);
    let tpr = tpr_at_fpr(&roc_curve(&separated).unwrap(), 0.005);
    let constant = score_set(&[0.5; 7], &[0.5; 5]);
    let const_auc = evaluate_scores(&constant, &[0.005], 0.005).unwrap().auc;
    Outcome::new(
        worst <= 1e-12 && tpr == 1.0 && const_auc == 0.5,
        format!("max |trapezoid - pairwise| {worst:.1e} over 50 sets; TPR@0.5% separated {tpr}; constant AUC {const_auc}"),
    )
}

// ---------------------------------------------------------------- 9

fn touches_subset_a(p: &Path) -> bool {
    p.components().any(|c| c.as_os_str() == "A")
        || p.file_name().is_some_and(|f| f.to_string_lossy().starts_with("A-"))
}

fn criterion_9_source_free_audit() -> Outcome {
    let bench = generate_synthetic_benchmark(&tiny_specs(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(&bench, dir.path()).unwrap();
    let mem = &bench.store;
    let (a_tr, _) = &bench.subsets["A"];
    let (b_tr, _) = &bench.subsets["B"];
    let cfg = ModelConfig::default();

    // Source-side artefacts are produced before auditing starts.
    let mut source = build_toy_fas_model(cfg.clone(), 9).unwrap();
    fit_original_loss(&mut source, a_tr, mem, &short(1, 9)).unwrap();
    let (head, _) = train_head(&source, attach_binary_head(&source, 9), a_tr, mem, &short(1, 9)).unwrap();

    let mut counts = Vec::new();
    let mut ok = true;
    let audited = |name: &str, run: &dyn Fn(&DiskStore)| {
        let recorder = AccessRecorder::new();
        let store = DiskStore::new(dir.path()).with_recorder(recorder.clone());
        run(&store);
        let a = recorder.count_matching(touches_subset_a);
        let total = recorder.paths().len();
        (name.to_string(), a, total)
    };
    let stage1 = fasw_core::sre::Stage1Config {
        schedule: short(1, 9),
        mask_epochs: 1,
        ..Default::default()
    };
    let sre0 = Sre::new(SreConfig::default(), &cfg, 9).unwrap();
    let s1 = finetune_stage1(&source, &sre0, b_tr, mem, &SyntheticOracle::new(mem), &stage1).unwrap();

    counts.push(audited("naive_ft", &|st| {
        naive_finetune(&source, b_tr, st, &short(1, 9)).unwrap();
    }));
    counts.push(audited("lwf", &|st| {
        let lwf = fasw_core::baselines::LwfConfig {
            schedule: short(1, 9),
            ..Default::default()
        };
        lwf_distill(&source, &head, b_tr, st, &lwf).unwrap();
    }));
    counts.push(audited("finetune_stage1", &|st| {
        finetune_stage1(&source, &sre0, b_tr, st, &SyntheticOracle::new(st), &stage1).unwrap();
    }));
    counts.push(audited("train_stage2", &|st| {
        let discs = WrapperDiscriminators::new(DiscConfig::default(), &cfg, 9).unwrap();
        let c2 = Stage2Config {
            schedule: short(1, 9),
            ..Default::default()
        };
        train_stage2(&source, &s1.target_model, Some(&s1.sre), &discs, b_tr, st, &c2).unwrap();
    }));
    // The guard itself must see subset-A reads when they happen.
    let control = audited("control", &|st| {
        st.image(&a_tr.samples[0]).unwrap();
    });
    ok &= control.1 > 0;
    let mut parts = Vec::new();
    for (name, a, total) in &counts {
        ok &= *a == 0 && *total > 0;
        parts.push(format!("{name} {a}/{total}"));
    }
    Outcome::new(ok, format!("subset-A reads / total reads: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 10

fn fasw(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fasw"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FASW_DATA_ROOT")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "fasw {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn chain(root: &Path, config: &Path) -> Vec<PathBuf> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = config.to_string_lossy().into_owned();
    fasw(&["generate-synthetic", "--config", &c, "--out", &p("data")]);
    fasw(&[
        "pretrain-source", "--config", &c, "--train-manifest", &p("data/A_train.csv"),
        "--eval-manifest", &p("data/A_test.csv"), "--eval-manifest", &p("data/B_test.csv"), "--out", &p("source"),
    ]);
    fasw(&[
        "finetune-sre", "--config", &c, "--source-ckpt", &p("source"), "--target-manifest", &p("data/B_train.csv"),
        "--eval-manifest", &p("data/B_test.csv"), "--out", &p("stage1"),
    ]);
    fasw(&[
        "train-wrapper", "--config", &c, "--source-ckpt", &p("source"), "--target-ckpt", &p("stage1"),
        "--sre-ckpt", &p("stage1"), "--target-manifest", &p("data/B_train.csv"),
        "--eval-manifest", &p("data/A_test.csv"), "--eval-manifest", &p("data/B_test.csv"), "--out", &p("wrapper"),
    ]);
    fasw(&[
        "run-baseline", "--config", &c, "--method", "lwf", "--source-ckpt", &p("source"),
        "--target-manifest", &p("data/B_train.csv"), "--eval-manifest", &p("data/A_test.csv"), "--out", &p("lwf"),
    ]);
    fasw(&["export", "--wrapper-run", &p("wrapper"), "--out", &p("model.fasw")]);
    fasw(&[
        "evaluate", "--config", &c, "--model", &p("model.fasw"), "--manifest", &p("data/A_test.csv"),
        "--manifest", &p("data/B_test.csv"), "--out", &p("eval/report.json"),
    ]);
    ["source", "stage1", "wrapper", "lwf", "eval"]
        .iter()
        .map(|d| root.join(d).join("report.json"))
        .collect()
}

fn criterion_10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.cfg");
    std::fs::write(
        &config,
        "seed = 10\n\
         synth.A.n_live = 16\nsynth.A.n_spoof = 16\n\
         synth.B.n_live = 16\nsynth.B.n_spoof = 15\n\
         source.epochs = 3\nhead.epochs = 2\nbaseline.epochs = 2\n\
         stage1.epochs = 2\nstage1.mask_epochs = 2\nstage2.epochs = 2\n",
    )
    .unwrap();
    let first = chain(&dir.path().join("run1"), &config);
    let second = chain(&dir.path().join("run2"), &config);
    let mut identical = 0;
    let mut differing = Vec::new();
    for (a, b) in first.iter().zip(&second) {
        let (ra, rb) = (Report::load(a).unwrap(), Report::load(b).unwrap());
        let same = ra.metrics_json().unwrap() == rb.metrics_json().unwrap()
            && ra.extra == rb.extra
            && !ra.evaluations.is_empty();
        if same {
            identical += 1;
        } else {
            differing.push(a.parent().unwrap().file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    Outcome::new(
        differing.is_empty(),
        format!("{identical}/{} report.json files bit-identical across two runs {differing:?}", first.len()),
    )
}
