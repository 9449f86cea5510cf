//! Full training-loop runs against real directories: seeded determinism,
//! bitwise-exact resume from a periodic checkpoint, warm-cache training
//! without the upscaler, and error paths only a complete run can reach.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use derain_core::fixtures::{gen_fixtures, FixtureSpec};
use derain_core::srdn::SrdnModel;
use derain_core::trainer::{
    load_derain_checkpoint, save_srdn_checkpoint, train, Adam, TrainConfig, TrainerError,
};
use derain_core::transform::TransformError;

fn tiny_fixtures(dir: &Path, count: usize, seed: u64) {
    let spec = FixtureSpec {
        count,
        height: 16,
        width: 16,
        streak_count: (2, 5),
        streak_length: (4.0, 8.0),
        seed,
        ..FixtureSpec::default()
    };
    gen_fixtures(&spec, dir).unwrap();
}

fn untrained_srdn(path: &Path) {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let model = SrdnModel::new(&mut rng);
    save_srdn_checkpoint(path, &model, &Adam::new(), 0, &[]).unwrap();
}

/// Four epochs, two steps each, on 16px fixtures; every run below shares
/// these numbers so checkpoints stay comparable.
fn tiny_config(root: &Path, ckpt: &str) -> TrainConfig {
    TrainConfig {
        total_epochs: 4,
        soft_only_epochs: 1,
        lr_initial: 1e-3,
        batch: 2,
        patch: 16,
        seed: 3,
        rainy_dir: root.join("rain/rainy"),
        clean_dir: root.join("aux/clean"),
        label_cache_dir: root.join("labels"),
        checkpoint_dir: root.join(ckpt),
        srdn_checkpoint: Some(root.join("srdn.ckpt")),
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn populate(root: &Path) {
    tiny_fixtures(&root.join("rain"), 4, 31);
    tiny_fixtures(&root.join("aux"), 2, 32);
    untrained_srdn(&root.join("srdn.ckpt"));
}

/// Every trained scalar, bit-exact, in parameter-walk order.
fn final_param_bits(ckpt_dir: &Path) -> Vec<(String, Vec<u32>)> {
    let state = load_derain_checkpoint(&ckpt_dir.join("derain-final.ckpt")).unwrap();
    let mut params = state.model.named_params();
    params.extend(state.detail.named_params());
    params
        .into_iter()
        .map(|(name, t)| (name, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn one_seed_always_lands_on_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let a = tiny_config(dir.path(), "ckpt-a");
    let b = tiny_config(dir.path(), "ckpt-b");
    train(&a, None, &mut |_| {}).unwrap();
    train(&b, None, &mut |_| {}).unwrap();
    assert_eq!(
        final_param_bits(&a.checkpoint_dir),
        final_param_bits(&b.checkpoint_dir)
    );
}

#[test]
fn resuming_a_periodic_checkpoint_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let straight = tiny_config(dir.path(), "ckpt-straight");
    train(&straight, None, &mut |_| {}).unwrap();

    // The same run leaves a two-epoch periodic checkpoint behind; finishing
    // from it in a fresh directory must reproduce the final weights bitwise.
    let halfway = straight.checkpoint_dir.join("derain-epoch00002.ckpt");
    assert!(halfway.is_file(), "periodic checkpoint missing");
    let resumed = tiny_config(dir.path(), "ckpt-resumed");
    let mut first_epoch = None;
    train(&resumed, Some(&halfway), &mut |r| {
        first_epoch.get_or_insert(r.epoch);
    })
    .unwrap();
    assert_eq!(first_epoch, Some(2), "resume should skip finished epochs");
    assert_eq!(
        final_param_bits(&straight.checkpoint_dir),
        final_param_bits(&resumed.checkpoint_dir)
    );
}

#[test]
fn a_warm_label_cache_trains_without_the_upscaler() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let with_srdn = tiny_config(dir.path(), "ckpt-with");
    train(&with_srdn, None, &mut |_| {}).unwrap();

    let mut without = tiny_config(dir.path(), "ckpt-without");
    without.srdn_checkpoint = None;
    train(&without, None, &mut |_| {}).unwrap();
    assert_eq!(
        final_param_bits(&with_srdn.checkpoint_dir),
        final_param_bits(&without.checkpoint_dir)
    );
}

#[test]
fn a_cold_cache_without_the_upscaler_refuses_to_train() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let mut config = tiny_config(dir.path(), "ckpt-cold");
    config.srdn_checkpoint = None;
    config.label_cache_dir = dir.path().join("cold-labels");
    let err = train(&config, None, &mut |_| {}).unwrap_err();
    assert!(
        matches!(
            err,
            TrainerError::Transform(TransformError::UnkeyedCache { .. })
        ),
        "unexpected error: {err}"
    );
}

#[test]
fn an_empty_rainy_directory_refuses_to_train() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let config = TrainConfig {
        rainy_dir: empty.clone(),
        ..tiny_config(dir.path(), "ckpt-empty")
    };
    let err = train(&config, None, &mut |_| {}).unwrap_err();
    match err {
        TrainerError::EmptyCorpus { dir } => assert_eq!(dir, empty),
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn periodic_checkpoints_follow_the_cadence() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let config = tiny_config(dir.path(), "ckpt-cadence");
    train(&config, None, &mut |_| {}).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(&config.checkpoint_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    // Epoch 4 is the end of the run, so only the final file marks it.
    assert_eq!(names, ["derain-epoch00002.ckpt", "derain-final.ckpt"]);
}

#[test]
fn resume_rejects_a_checkpoint_from_beyond_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let long = tiny_config(dir.path(), "ckpt-long");
    train(&long, None, &mut |_| {}).unwrap();

    let mut short = tiny_config(dir.path(), "ckpt-short");
    short.total_epochs = 2;
    let final_path: PathBuf = long.checkpoint_dir.join("derain-final.ckpt");
    let err = train(&short, Some(&final_path), &mut |_| {}).unwrap_err();
    assert!(
        matches!(err, TrainerError::Config(_)),
        "unexpected error: {err}"
    );
}
