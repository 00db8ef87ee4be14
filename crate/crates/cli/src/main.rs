use std::fmt::Display;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use interctc::config::RunConfig;
use interctc::ctc::parse_logits;
use interctc::gradcheck::suite::{self, Scale};
use interctc::trainer::{self, average_checkpoints, evaluate, model_from_checkpoint, Checkpoint, Split, SyntheticTask};
use interctc::{greedy_decode, oracle_trials, Primitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "interctc",
    version,
    about = "Train and inspect CTC encoders with intermediate CTC losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task, writing one checkpoint per epoch.
    Train {
        /// key=value run configuration; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a split and print its token error rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: Split,
    },
    /// Greedy-decode a log-probability file and print the token ids.
    Decode {
        #[arg(long)]
        logits: PathBuf,
    },
    /// Finite-difference check of every primitive and a small encoder.
    Gradcheck {
        #[arg(long, default_value = "small")]
        scale: Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate one primitive's backward rule, to confirm the check notices.
        #[arg(long, hide = true)]
        inject_fault: Option<Primitive>,
    },
    /// Compare the CTC recursion with exhaustive alignment enumeration.
    Oracle {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Average checkpoints parameter by parameter.
    Average {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    /// Bad arguments or configuration.
    Usage(String),
    Runtime(String),
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn train(config: PathBuf, out: PathBuf) -> Result<(), Failure> {
    let text = fs::read_to_string(&config).map_err(|e| usage(format!("{}: {e}", config.display())))?;
    let run = RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", config.display())))?;
    run.validate()
        .map_err(|e| usage(format!("{}: {e}", config.display())))?;
    let outcome = trainer::train(&run, Some(&out)).map_err(runtime)?;
    println!("epoch\ttrain_loss\tdev_ter");
    for m in &outcome.epochs {
        println!("{}", m.log_line());
    }
    if outcome.skipped > 0 {
        println!("skipped {} infeasible utterances", outcome.skipped);
    }
    println!(
        "wrote {} checkpoints and {} to {}",
        outcome.checkpoints.len(),
        trainer::AVERAGED_FILE,
        out.display()
    );
    Ok(())
}

fn eval(path: PathBuf, split: Split) -> Result<(), Failure> {
    let ck = Checkpoint::load(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let (run, _) = model_from_checkpoint(&ck).map_err(runtime)?;
    let data = SyntheticTask::new(run.task.clone()).map_err(runtime)?.generate(split);
    let result = evaluate(&ck, &data).map_err(runtime)?;
    let c = result.counts;
    println!(
        "token error rate {:.6} ({} sub, {} ins, {} del, {} reference tokens, {} utterances)",
        result.rate,
        c.substitutions,
        c.insertions,
        c.deletions,
        c.reference_len,
        data.len()
    );
    Ok(())
}

fn decode(path: PathBuf) -> Result<(), Failure> {
    let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let grid = parse_logits(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    println!("{}", greedy_decode(&grid));
    Ok(())
}

fn gradcheck(scale: Scale, seed: u64, fault: Option<Primitive>) -> Result<(), Failure> {
    if let Some(p) = fault {
        interctc::tape::fault::inject_sign_flip(p);
    }
    let entries = suite::run(scale, seed);
    interctc::tape::fault::clear();
    let entries = entries.map_err(runtime)?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passes() { "ok" } else { "FAIL" };
        failed += usize::from(!e.passes());
        println!(
            "{:<16} {status:<4} max rel error {:.3e}",
            e.name,
            e.report.max_rel_error()
        );
        for p in &e.report.params {
            println!(
                "    {:<32} {:>6} coords  max rel {:.3e}  max abs {:.3e}",
                p.name, p.checked, p.max_rel_error, p.max_abs_error
            );
        }
    }
    if failed > 0 {
        return Err(runtime(format!(
            "{failed} of {} checks exceed {:e}",
            entries.len(),
            suite::TOLERANCE
        )));
    }
    println!("all {} checks within {:e}", entries.len(), suite::TOLERANCE);
    Ok(())
}

fn oracle(trials: usize, seed: u64) -> Result<(), Failure> {
    let report = oracle_trials(trials, &mut ChaCha8Rng::seed_from_u64(seed));
    println!(
        "{} trials ({} feasible), max |recursion - enumeration| = {:.3e}",
        report.trials, report.feasible, report.max_abs_diff
    );
    for f in &report.failures {
        println!("  {f}");
    }
    if report.passes(1e-10) {
        Ok(())
    } else {
        Err(runtime("recursion disagrees with enumeration"))
    }
}

fn average(inputs: Vec<PathBuf>, out: PathBuf) -> Result<(), Failure> {
    let cks = inputs
        .iter()
        .map(|p| Checkpoint::load(p).map_err(|e| runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let avg = average_checkpoints(&cks).map_err(runtime)?;
    avg.save(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    println!("averaged {} checkpoints into {}", cks.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train { config, out } => train(config, out),
        Command::Eval { checkpoint, split } => eval(checkpoint, split),
        Command::Decode { logits } => decode(logits),
        Command::Gradcheck {
            scale,
            seed,
            inject_fault,
        } => gradcheck(scale, seed, inject_fault),
        Command::Oracle { trials, seed } => oracle(trials, seed),
        Command::Average { inputs, out } => average(inputs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
