use interctc::config::RunConfig;
use interctc::trainer::{
    average_checkpoints, evaluate, evaluate_model, train, Checkpoint, CheckpointEntry, Split, SyntheticTask,
    TrainError, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_run(overrides: &str) -> RunConfig {
    let mut run = RunConfig::parse(
        "model.layers=2\nmodel.d_model=16\nmodel.heads=2\nmodel.d_ff=32\n\
         task.train_size=64\ntask.dev_size=16\ntask.test_size=16\n\
         train.epochs=1\ntrain.batch=8\ntrain.warmup=50",
    )
    .unwrap();
    for line in overrides.lines() {
        let (k, v) = line.split_once('=').unwrap();
        run.set(k, v).unwrap();
    }
    run
}

#[test]
fn first_batch_loss_decreases_over_fifty_steps() {
    let run = RunConfig::default();
    let task = SyntheticTask::new(run.task.clone()).unwrap();
    let data = task.generate_n(Split::Train, 50 * run.train.batch);
    let batches: Vec<_> = data.chunks(run.train.batch).collect();
    let mut trainer = Trainer::new(run).unwrap();
    let mut marks = vec![trainer.eval_loss(batches[0]).unwrap()];
    for (i, batch) in batches.iter().enumerate() {
        trainer.step(batch).unwrap();
        if (i + 1) % 10 == 0 {
            marks.push(trainer.eval_loss(batches[0]).unwrap());
        }
    }
    assert!(marks.windows(2).all(|w| w[1] < w[0]), "{marks:?}");
    assert!(marks[5] < 0.5 * marks[0], "{marks:?}");
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(&small_run(""), Some(dir.path())).unwrap();
    let b = train(&small_run(""), None).unwrap();
    let on_disk = std::fs::read(dir.path().join("epoch-001.ckpt")).unwrap();
    assert_eq!(on_disk, b.checkpoints[1].to_bytes());
    assert_eq!(a.epochs, b.epochs);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert_eq!(metrics.trim_end().split('\t').count(), 3);
    assert!(dir.path().join("epoch-000.ckpt").exists());
    assert!(dir.path().join("averaged.ckpt").exists());

    let other = train(&small_run("train.seed=2"), None).unwrap();
    assert_ne!(other.checkpoints[1], b.checkpoints[1]);
}

#[test]
fn zero_epochs_write_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small_run("train.epochs=0"), Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints.len(), 1);
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(files.iter().any(|f| f == "epoch-000.ckpt"));
    assert!(!files.iter().any(|f| f == "epoch-001.ckpt"));
}

#[test]
fn overfits_four_utterances() {
    let run = small_run(
        "model.d_model=32\nmodel.d_ff=64\nmodel.p_last=1.0\nloss.variant=none\ntrain.warmup=20\ntrain.lr_factor=2",
    );
    let task = SyntheticTask::new(run.task.clone()).unwrap();
    let batch = task.generate_n(Split::Train, 4);
    let mut trainer = Trainer::new(run).unwrap();
    for _ in 0..300 {
        trainer.step(&batch).unwrap();
    }
    let eval = evaluate_model(trainer.model(), &batch).unwrap();
    assert_eq!(eval.rate, 0.0, "{:?}", eval.hypotheses);
    for (utt, hyp) in batch.iter().zip(&eval.hypotheses) {
        assert_eq!(&utt.labels, hyp);
    }
}

#[test]
fn evaluation_is_deterministic_and_matches_checkpoint_path() {
    let out = train(&small_run(""), None).unwrap();
    let run = small_run("");
    let dev = SyntheticTask::new(run.task.clone()).unwrap().generate(Split::Dev);
    let a = evaluate(&out.checkpoints[1], &dev).unwrap();
    let b = evaluate(&out.checkpoints[1], &dev).unwrap();
    assert_eq!(a.hypotheses, b.hypotheses);
    assert_eq!(a.rate, b.rate);
    assert!(matches!(
        evaluate(&out.checkpoints[1], &[]),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn checkpoint_files_round_trip() {
    let out = train(&small_run("train.epochs=0"), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    out.checkpoints[0].save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoints[0]);
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    assert_eq!(RunConfig::parse(&back.config).unwrap(), small_run("train.epochs=0"));
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let entry = |name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng| CheckpointEntry {
        name: name.into(),
        values: (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-3.0f32..3.0))
            .collect(),
        shape,
    };
    Checkpoint {
        entries: vec![
            entry("w", vec![4, 5], rng),
            entry("b", vec![5], rng),
            entry("k", vec![2, 3, 2], rng),
        ],
        config: String::new(),
    }
}

#[test]
fn mean_of_three_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cks: Vec<_> = (0..3).map(|_| random_checkpoint(&mut rng)).collect();
    let avg = average_checkpoints(&cks).unwrap();
    for (e, entry) in avg.entries.iter().enumerate() {
        for (i, &v) in entry.values.iter().enumerate() {
            let direct = cks.iter().map(|c| f64::from(c.entries[e].values[i])).sum::<f64>() / 3.0;
            let direct = direct as f32;
            let ulps = (v.to_bits() as i64 - direct.to_bits() as i64).abs();
            assert!(ulps <= 1 || v == direct, "{v} vs {direct}");
        }
    }
}

#[test]
fn averaging_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cks: Vec<_> = (0..5).map(|_| random_checkpoint(&mut rng)).collect();
    let reference = average_checkpoints(&cks).unwrap();
    for rotation in 1..5 {
        let mut perm = cks.clone();
        perm.rotate_left(rotation);
        perm.swap(0, 3);
        assert_eq!(average_checkpoints(&perm).unwrap().entries, reference.entries);
    }
}
