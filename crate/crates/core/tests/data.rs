use childpredictor::data::synth::{synth_dataset, synth_family, ChildCountLaw, SynthConfig};
use childpredictor::data::{check_disjoint, load_manifest, manifest_json, write_manifest, Attribute, Split};
use childpredictor::Error;

fn cfg() -> SynthConfig {
    SynthConfig {
        resolution: 16,
        ..SynthConfig::default()
    }
}

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = synth_dataset(&cfg(), 2, 5, ChildCountLaw::Constant(1)).unwrap();
    let extra = m.families[1].children[0].clone();
    m.families[1].children.push(extra);
    m.families[1].children[1].source = "images/extra.png".into();
    let path = dir.path().join("train.json");
    write_manifest(&m, &path).unwrap();

    let back = load_manifest(&path, 16).unwrap();
    assert_eq!(back.families.len(), 2);
    assert_eq!(back.families.iter().map(|f| f.children.len()).sum::<usize>(), 3);
    // 8-bit quantization is the only loss
    for (a, b) in m.faces().zip(back.faces()) {
        assert_eq!(a.attrs, b.attrs);
        assert_eq!(a.genome, b.genome);
        assert!(a.image.mean_abs_diff(&b.image) <= 1.0 / 255.0);
    }
    assert_eq!(manifest_json(&back), manifest_json(&load_manifest(&path, 16).unwrap()));
}

#[test]
fn non_binary_attribute_names_the_family() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&cfg(), 1, 6, ChildCountLaw::Constant(1)).unwrap();
    let path = dir.path().join("m.json");
    write_manifest(&m, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let child_gender = text.rfind("\"gender\": ").unwrap() + "\"gender\": ".len();
    let mut bad = text.clone();
    bad.replace_range(child_gender..child_gender + 1, "2");
    std::fs::write(&path, bad).unwrap();
    match load_manifest(&path, 16) {
        Err(Error::Validation { subject, .. }) => assert_eq!(subject, "train-0000"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn missing_manifest_names_the_path() {
    let err = load_manifest(std::path::Path::new("/nonexistent/m.json"), 16).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/m.json"), "{err}");
}

#[test]
fn synth_dataset_is_reproducible_and_seed_sensitive() {
    let a = synth_dataset(&cfg(), 10, 3, ChildCountLaw::Uniform(0, 3)).unwrap();
    assert_eq!(a.families.len(), 10);
    assert_eq!(manifest_json(&a), manifest_json(&synth_dataset(&cfg(), 10, 3, ChildCountLaw::Uniform(0, 3)).unwrap()));
    let b = synth_dataset(&cfg(), 10, 4, ChildCountLaw::Uniform(0, 3)).unwrap();
    let genomes = |m: &childpredictor::data::DatasetManifest| {
        m.faces().map(|f| f.genome.clone().unwrap().params().to_vec()).collect::<Vec<_>>()
    };
    assert_ne!(genomes(&a), genomes(&b));

    let four = synth_dataset(&cfg(), 5, 3, ChildCountLaw::Constant(4)).unwrap();
    assert!(four.families.iter().all(|f| f.children.len() == 4));
    assert!(synth_dataset(&cfg(), 0, 3, ChildCountLaw::Constant(4)).is_err());
}

#[test]
fn synth_family_roles() {
    let f = synth_family(&cfg(), 7, 3).unwrap();
    assert_eq!(f, synth_family(&cfg(), 7, 3).unwrap());
    assert_eq!(f.father.attrs.get(Attribute::Gender), Some(1));
    assert_eq!(f.mother.attrs.get(Attribute::Gender), Some(0));
    assert!(synth_family(&cfg(), 7, 0).unwrap().children.is_empty());
}

#[test]
fn train_and_val_splits_are_disjoint() {
    let train = synth_dataset(&cfg(), 4, 1, ChildCountLaw::Constant(2)).unwrap();
    let val_cfg = SynthConfig {
        split: Split::Val,
        ..cfg()
    };
    let val = synth_dataset(&val_cfg, 4, 2, ChildCountLaw::Constant(2)).unwrap();
    check_disjoint(&train, &val).unwrap();
    assert!(check_disjoint(&train, &train).is_err());
}
