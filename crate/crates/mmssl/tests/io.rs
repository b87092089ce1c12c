use std::fs;

use mmssl::checkpoint::{self, DataShape};
use mmssl::error::Error;
use mmssl::formats::{load_data_dir, write_synthetic, MANIFEST_FILE};
use mmssl::run;
use mmssl_core::graph::{generate_synthetic, SyntheticSpec};
use mmssl_core::trainer::Config;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_users: 20,
        num_items: 15,
        modality_dims: vec![5, 3, 4],
        interactions_per_user: 10,
        ..SyntheticSpec::default()
    }
}

#[test]
fn data_dir_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let s = generate_synthetic(&small_spec(), &mut mmssl_core::seeded_rng(2)).unwrap();
    write_synthetic(&s, tmp.path(), Some("small".into())).unwrap();
    let d = load_data_dir(tmp.path()).unwrap();
    assert_eq!(d.graph, s.graph);
    assert_eq!(d.features.len(), 3);
    for (a, b) in d.features.iter().zip(&s.features) {
        assert_eq!(a.modality, b.modality);
        let diff = a.features.max_abs_diff(&b.features);
        assert!(diff < 1e-6, "f32 storage error {diff}");
    }
    assert_eq!(d.manifest.unwrap().name.as_deref(), Some("small"));
}

#[test]
fn manifest_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let s = generate_synthetic(&small_spec(), &mut mmssl_core::seeded_rng(2)).unwrap();
    write_synthetic(&s, tmp.path(), None).unwrap();
    fs::write(tmp.path().join(MANIFEST_FILE), r#"{"users": 20, "items": 15, "interactions": 99}"#).unwrap();
    assert!(matches!(load_data_dir(tmp.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_features_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("interactions.tsv"), "0\t0\n").unwrap();
    assert!(load_data_dir(tmp.path()).is_err());
}

#[test]
fn checkpoint_file_save_load_save_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let s = generate_synthetic(&small_spec(), &mut mmssl_core::seeded_rng(3)).unwrap();
    write_synthetic(&s, &data, None).unwrap();
    let mut cfg = Config::default();
    cfg.train.epochs = 2;
    cfg.train.dim = 8;
    cfg.enc.topk = 3;
    let out = run::train(&cfg, &data, &tmp.path().join("run"), None, 1, |_| {}).unwrap();
    let first = fs::read(&out.checkpoint).unwrap();
    let ck = checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(ck.state, out.state);
    let again = tmp.path().join("again.mmck");
    checkpoint::save(&again, &ck.config, ck.data, &ck.state).unwrap();
    assert_eq!(fs::read(&again).unwrap(), first);
    assert_eq!(ck.data, DataShape::of(&s.graph));

    let mut bad = first.clone();
    bad[..4].copy_from_slice(b"NOPE");
    let path = tmp.path().join("bad.mmck");
    fs::write(&path, bad).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Version { .. })));
}

#[test]
fn checkpoint_eval_rejects_other_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let other = tmp.path().join("other");
    write_synthetic(&generate_synthetic(&small_spec(), &mut mmssl_core::seeded_rng(4)).unwrap(), &data, None).unwrap();
    let spec = SyntheticSpec {
        num_users: 21,
        ..small_spec()
    };
    write_synthetic(&generate_synthetic(&spec, &mut mmssl_core::seeded_rng(4)).unwrap(), &other, None).unwrap();
    let mut cfg = Config::default();
    cfg.train.epochs = 1;
    cfg.train.dim = 8;
    cfg.enc.topk = 3;
    let out = run::train(&cfg, &data, &tmp.path().join("run"), None, 1, |_| {}).unwrap();
    let ck = checkpoint::load(&out.checkpoint).unwrap();
    run::evaluate_checkpoint(&ck, &data, 10, 2).unwrap();
    assert!(matches!(run::evaluate_checkpoint(&ck, &other, 10, 2), Err(Error::Invalid(_))));
}
