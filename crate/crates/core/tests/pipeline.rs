use std::collections::BTreeMap;

use fasw_core::checkpoint::{load_model, load_sre, save_model, save_sre};
use fasw_core::data::{
    generate_synthetic_benchmark, load_manifest, write_benchmark, DiskStore, PatchGenerator, SpoofMacro,
    SpoofTypeSpec, SyntheticDomainSpec,
};
use fasw_core::eval::{score_manifest, WithSre};
use fasw_core::model::{build_toy_fas_model, ModelConfig};
use fasw_core::sre::{finetune_stage1, Sre, SreConfig, Stage1Config, SyntheticOracle};
use fasw_core::train::{fit_original_loss, Schedule};
use fasw_core::wrapper::{export_inference, train_stage2, DiscConfig, InferenceModel, Stage2Config, WrapperDiscriminators};

fn specs() -> BTreeMap<String, SyntheticDomainSpec> {
    let a = SyntheticDomainSpec {
        n_live: 12,
        n_spoof: 12,
        image_size: (16, 16),
        ..SyntheticDomainSpec::default()
    };
    let b = SyntheticDomainSpec {
        spoof_types: vec![SpoofTypeSpec::new(SpoofMacro::Partial, "funny_eyes", PatchGenerator::Eyes)],
        tint: [0.1, 0.05, -0.1],
        seed: 1,
        ..a.clone()
    };
    BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)])
}

fn schedule(epochs: usize) -> Schedule {
    Schedule {
        epochs,
        lr: 1e-3,
        ..Schedule::default()
    }
}

#[test]
fn stages_run_from_disk_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate_synthetic_benchmark(&specs()).unwrap();
    write_benchmark(&bench, dir.path()).unwrap();
    let store = DiskStore::new(dir.path());
    let a_train = load_manifest(&dir.path().join("A_train.csv")).unwrap();
    let b_train = load_manifest(&dir.path().join("B_train.csv")).unwrap();
    let b_test = load_manifest(&dir.path().join("B_test.csv")).unwrap();
    assert_eq!(&b_train, bench.train("B").unwrap());

    let cfg = ModelConfig {
        input_size: (16, 16),
        ..ModelConfig::default()
    };
    let mut source = build_toy_fas_model(cfg.clone(), 0).unwrap();
    let log = fit_original_loss(&mut source, &a_train, &store, &schedule(2)).unwrap();
    assert_eq!(log.len(), 2);

    let sre = Sre::new(SreConfig::default(), &cfg, 0).unwrap();
    let stage1 = Stage1Config {
        schedule: schedule(2),
        mask_epochs: 1,
        ..Stage1Config::default()
    };
    let s1 = finetune_stage1(&source, &sre, &b_train, &store, &SyntheticOracle::new(&store), &stage1).unwrap();
    assert_ne!(s1.target_model.params, source.params);
    assert!(s1.log[0].losses["l_mask"].is_finite());
    let e1 = &s1.log[1].losses;
    assert_eq!(e1["l_mask"], 0.0);
    assert!((e1["total"] - e1["l_orig"]).abs() < 1e-12, "{e1:?}");

    let discs = WrapperDiscriminators::new(DiscConfig::default(), &cfg, 0).unwrap();
    let c2 = Stage2Config {
        schedule: schedule(1),
        ..Stage2Config::default()
    };
    let out = train_stage2(&source, &s1.target_model, Some(&s1.sre), &discs, &b_train, &store, &c2).unwrap();

    save_model(&out.student, &dir.path().join("student.safetensors")).unwrap();
    save_sre(&s1.sre, &dir.path().join("sre.safetensors")).unwrap();
    let student = load_model(&dir.path().join("student.safetensors")).unwrap();
    let sre = load_sre(&dir.path().join("sre.safetensors"), &student.config).unwrap();
    assert_eq!(student, out.student);
    assert_eq!(sre, s1.sre);

    let exported = export_inference(&student, Some(&sre)).unwrap();
    exported.save(&dir.path().join("model.fasw")).unwrap();
    let loaded = InferenceModel::load(&dir.path().join("model.fasw")).unwrap();
    let a = score_manifest(&loaded, &b_test, &store).unwrap();
    let b = score_manifest(&WithSre(&out.student, &s1.sre), &b_test, &store).unwrap();
    assert_eq!(a, b);
}
