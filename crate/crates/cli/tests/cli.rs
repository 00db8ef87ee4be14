use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use interctc::config::RunConfig;
use interctc::trainer::{average_checkpoints, evaluate, Checkpoint, CheckpointEntry, Split, SyntheticTask};

const SMALL: &str = "model.layers=2\nmodel.d_model=16\nmodel.heads=2\nmodel.d_ff=32\n\
                     task.train_size=128\ntask.dev_size=32\ntask.test_size=32\n\
                     train.epochs=3\ntrain.batch=8\ntrain.warmup=50\n";

fn interctc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interctc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_small(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join("run");
    let o = interctc(&["train", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn train_eval_and_average() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path());
    for e in 0..=3 {
        assert!(out.join(format!("epoch-{e:03}.ckpt")).exists());
    }
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let epoch1_dev: f64 = metrics
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();

    let ck1 = out.join("epoch-001.ckpt");
    let o = interctc(&["eval", "--checkpoint", path(&ck1), "--split", "dev"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let printed: f64 = text.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert_eq!(printed, epoch1_dev);

    // Same numbers through the library.
    let ck = Checkpoint::load(&ck1).unwrap();
    let run = RunConfig::parse(&ck.config).unwrap();
    let dev = SyntheticTask::new(run.task).unwrap().generate(Split::Dev);
    let lib = evaluate(&ck, &dev).unwrap();
    assert_eq!(format!("{:.6}", lib.rate), format!("{printed:.6}"));
    assert!(text.contains(&format!("{} reference tokens", lib.counts.reference_len)));

    // Pinned on the first verified run of this configuration.
    assert!(text.starts_with("token error rate 0.012195 "), "{text}");

    let avg = dir.path().join("avg.ckpt");
    let inputs: Vec<String> = (1..=3)
        .map(|e| path(&out.join(format!("epoch-{e:03}.ckpt"))).to_string())
        .collect();
    let mut args = vec!["average", "--out", path(&avg), "--inputs"];
    args.extend(inputs.iter().map(String::as_str));
    let o = interctc(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cks: Vec<_> = inputs.iter().map(|p| Checkpoint::load(p).unwrap()).collect();
    assert_eq!(Checkpoint::load(&avg).unwrap(), average_checkpoints(&cks).unwrap());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let o = interctc(&["train", "--config", path(&missing), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "model.layers=2\nmodel.colour=blue\n").unwrap();
    let o = interctc(&["train", "--config", path(&bad), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.colour"), "{}", stderr(&o));

    let o = interctc(&["train", "--config"]);
    assert_eq!(o.status.code(), Some(1));
    let o = interctc(&["eval", "--checkpoint", "x", "--split", "validation"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupted_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.ckpt");
    fs::write(&ck, b"ICTX\x01\x00\x00\x00").unwrap();
    let o = interctc(&["eval", "--checkpoint", path(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn decode_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let uniform = dir.path().join("uniform.txt");
    let v = -(2f64).ln();
    fs::write(&uniform, format!("2 1\n{v} {v}\n{v} {v}\n")).unwrap();
    let o = interctc(&["decode", "--logits", path(&uniform)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "\n");

    // Rows are log-softmax of small integer logits; argmax path 0 1 1 0 2.
    let rows = [
        [2.0, 0.0, 0.0],
        [0.0, 3.0, 1.0],
        [0.0, 2.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.5],
    ];
    let mut text = String::from("5 2\n");
    for r in rows {
        let lse = r.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        let line: Vec<String> = r.iter().map(|x| format!("{}", x - lse)).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    let grid = dir.path().join("grid.txt");
    fs::write(&grid, text).unwrap();
    let o = interctc(&["decode", "--logits", path(&grid)]);
    assert_eq!(stdout(&o), "1 2\n");

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "2\n0 0\n").unwrap();
    let o = interctc(&["decode", "--logits", path(&bad)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_small_and_mutation() {
    let start = Instant::now();
    let o = interctc(&["gradcheck", "--scale", "small"]);
    assert!(start.elapsed() < Duration::from_secs(10));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("max rel"));
    assert!(text.contains("frontend.weight"));

    let o = interctc(&["gradcheck", "--scale", "small", "--inject-fault", "glu"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).lines().any(|l| l.starts_with("glu") && l.contains("FAIL")));
}

#[test]
fn oracle_trials_pass_and_repeat() {
    let a = interctc(&["oracle", "--trials", "200", "--seed", "9"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    let b = interctc(&["oracle", "--trials", "200", "--seed", "9"]);
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("200 trials"));
}

#[test]
fn average_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = Checkpoint {
        entries: vec![CheckpointEntry {
            name: "w".into(),
            shape: vec![2, 2],
            values: vec![0.5, -1.25, 3.0, 1e-3],
        }],
        config: "train.seed=1\n".into(),
    };
    let mut neg = p.clone();
    neg.entries[0].values.iter_mut().for_each(|v| *v = -*v);
    let (pp, np) = (dir.path().join("p.ckpt"), dir.path().join("n.ckpt"));
    p.save(&pp).unwrap();
    neg.save(&np).unwrap();

    let same = dir.path().join("same.ckpt");
    let o = interctc(&[
        "average",
        "--inputs",
        path(&pp),
        path(&pp),
        path(&pp),
        "--out",
        path(&same),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&same).unwrap(), fs::read(&pp).unwrap());

    let zero = dir.path().join("zero.ckpt");
    let o = interctc(&["average", "--inputs", path(&pp), path(&np), "--out", path(&zero)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(Checkpoint::load(&zero).unwrap().entries[0]
        .values
        .iter()
        .all(|&v| v == 0.0));

    let mut other = p.clone();
    other.entries[0].shape = vec![4];
    let op = dir.path().join("o.ckpt");
    other.save(&op).unwrap();
    let o = interctc(&["average", "--inputs", path(&pp), path(&op), "--out", path(&zero)]);
    assert_eq!(o.status.code(), Some(2));
}
