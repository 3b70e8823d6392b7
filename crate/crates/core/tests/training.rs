use std::fs;

use hdc::checkpoint::{Checkpoint, load_checkpoint, save_checkpoint};
use hdc::dataset::generate_videos;
use hdc::encoder::{EncoderConfig, Params, init_params};
use hdc::error::HdcError;
use hdc::report::read_metrics;
use hdc::seeding::{derive_seed, stream};
use hdc::trainer::{TrainOutputs, checkpoint_path, pretrain};
use hdc::verify::{pooling_law, tiny_run_config};

#[test]
fn metrics_files_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(21);
    cfg.trainer.steps = 6;
    cfg.trainer.prefetch = true;
    let videos = generate_videos(&cfg.dataset, cfg.seed).unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let path = dir.path().join(format!("{run}.csv"));
        let out = TrainOutputs {
            metrics: Some(path.clone()),
            checkpoint_dir: None,
        };
        let result = pretrain(&cfg, &videos, &out, None).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), result.log);
        files.push(fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    // Seven lines: header plus one per step.
    assert_eq!(files[0].iter().filter(|b| **b == b'\n').count(), 7);
}

#[test]
fn prefetch_does_not_change_results() {
    let mut cfg = tiny_run_config(22);
    let videos = generate_videos(&cfg.dataset, cfg.seed).unwrap();
    let plain = pretrain(&cfg, &videos, &TrainOutputs::default(), None).unwrap();
    cfg.trainer.prefetch = true;
    let fetched = pretrain(&cfg, &videos, &TrainOutputs::default(), None).unwrap();
    assert_eq!(plain.params, fetched.params);
    assert_eq!(plain.log, fetched.log);
}

#[test]
fn resume_from_saved_checkpoint_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(23);
    let videos = generate_videos(&cfg.dataset, cfg.seed).unwrap();
    let full = pretrain(&cfg, &videos, &TrainOutputs::default(), None).unwrap();

    let ckpts = dir.path().join("ckpt");
    fs::create_dir_all(&ckpts).unwrap();
    let out = TrainOutputs {
        metrics: None,
        checkpoint_dir: Some(ckpts.clone()),
    };
    pretrain(&cfg, &videos, &out, None).unwrap();
    // checkpoint_every = 2 over 4 steps.
    for step in [2, 4] {
        assert!(checkpoint_path(&ckpts, step).exists());
    }
    let mid: Checkpoint<f32> = load_checkpoint(&checkpoint_path(&ckpts, 2)).unwrap();
    assert_eq!(mid.state.step, 2);
    let resumed = pretrain(&cfg, &videos, &TrainOutputs::default(), Some(mid)).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.log, full.log[2..]);
    let last: Checkpoint<f32> = load_checkpoint(&checkpoint_path(&ckpts, 4)).unwrap();
    assert_eq!(last.params, full.params);
}

#[test]
fn different_seeds_differ() {
    let a_cfg = tiny_run_config(1);
    let b_cfg = tiny_run_config(2);
    let a = pretrain(
        &a_cfg,
        &generate_videos(&a_cfg.dataset, 1).unwrap(),
        &TrainOutputs::default(),
        None,
    )
    .unwrap();
    let b = pretrain(
        &b_cfg,
        &generate_videos(&b_cfg.dataset, 2).unwrap(),
        &TrainOutputs::default(),
        None,
    )
    .unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn training_changes_only_parameters_with_gradients() {
    let mut cfg = tiny_run_config(24);
    // Spatial contrast at scale 5 only: the temporal heads and the other
    // scales' heads get no gradient.
    for (k, a) in cfg.loss.alphas.iter_mut() {
        *a = if *k == 5 { 1.0 } else { 0.0 };
    }
    cfg.loss.betas.values_mut().for_each(|b| *b = 0.0);
    let videos = generate_videos(&cfg.dataset, cfg.seed).unwrap();
    let init: Params<f32> =
        init_params(&cfg.encoder, derive_seed(&[cfg.seed, stream::INIT])).unwrap();
    let trained = pretrain(&cfg, &videos, &TrainOutputs::default(), None).unwrap();
    for ((name, before), (_, after)) in init.iter().zip(trained.params.iter()) {
        let moved = before != after;
        let expect = !name.starts_with("head")
            || name.starts_with("head5.o.")
            || name.starts_with("head5.s.");
        assert_eq!(moved, expect, "{name}");
    }
}

#[test]
fn checkpoint_errors_are_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(25);
    let params: Params<f32> = init_params(&cfg.encoder, 1).unwrap();
    let path = dir.path().join("c.hdck");
    save_checkpoint(
        &Checkpoint {
            params,
            state: Default::default(),
        },
        &path,
    )
    .unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&path),
        Err(HdcError::CorruptFile { .. })
    ));
    let mut bumped = bytes.clone();
    bumped[4] = 9;
    fs::write(&path, &bumped).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&path),
        Err(HdcError::VersionMismatch { .. })
    ));
    // Resuming into a differently shaped encoder is rejected.
    fs::write(&path, &bytes).unwrap();
    let ckpt = load_checkpoint::<f32>(&path).unwrap();
    let mut other = cfg.clone();
    other.encoder.projection_dim = 8;
    let videos = generate_videos(&other.dataset, 1).unwrap();
    assert!(pretrain(&other, &videos, &TrainOutputs::default(), Some(ckpt)).is_err());
}

#[test]
fn spatial_vector_counts_follow_temporal_extent() {
    let (counts, gap) = pooling_law(&EncoderConfig::default(), [8, 32, 32], 0).unwrap();
    assert_eq!(counts, vec![(3, 2, 2), (4, 1, 1), (5, 1, 1)]);
    assert!(gap <= 1e-6, "{gap:e}");
    let (counts, gap) = pooling_law(&EncoderConfig::default(), [16, 32, 32], 1).unwrap();
    assert_eq!(counts, vec![(3, 4, 4), (4, 2, 2), (5, 2, 2)]);
    assert!(gap <= 1e-6, "{gap:e}");
}

#[test]
fn loss_falls_over_the_first_200_steps() {
    let mut cfg = hdc::config::RunConfig::default();
    cfg.trainer.steps = 200;
    let videos = generate_videos(&cfg.dataset, cfg.seed).unwrap();
    let run = pretrain(&cfg, &videos, &TrainOutputs::default(), None).unwrap();
    let mean = |r: &[hdc::trainer::StepRecord]| {
        r.iter().map(|x| x.losses.total).sum::<f64>() / r.len() as f64
    };
    let (first, last) = (mean(&run.log[..10]), mean(&run.log[190..]));
    assert!(last < first, "first {first}, last {last}");
}
