//! Optimization loop, evaluation and the per-epoch checkpoint series.
//!
//! Each step builds one tape per utterance; utterances of a batch run in
//! parallel and their gradients are summed in batch order, so results do not
//! depend on the number of worker threads.

pub mod checkpoint;
pub mod data;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use checkpoint::{average_checkpoints, Checkpoint, CheckpointEntry, CheckpointError};
pub use data::{Dataset, Split, SyntheticTask, SyntheticTaskConfig, TaskConfigError, Utterance};
pub use optim::{OptimizerState, Schedule};

use crate::config::{ConfigError, RunConfig};
use crate::ctc::{ctc_loss_node, required_length, CtcError, LabelSequence};
use crate::encoder::{EncoderError, Mode};
use crate::metrics::{edit_distance, ErrorCounts};
use crate::model::Model;
use crate::objective::{eval_decode, total_loss, IntermediateLossSpec, LossBreakdown, LossPlan, ObjectiveError};
use crate::tape::Tape;
use crate::tensor::TensorError;

/// Global gradient-norm ceiling applied before every update.
pub const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid training config: {0}")]
pub struct TrainConfigError(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Number of trailing epoch checkpoints averaged into the final model.
    pub average_last: usize,
    pub warmup: u64,
    pub lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            seed: 1,
            average_last: 5,
            warmup: 1000,
            lr_factor: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainConfigError> {
        let bad = |m: &str| Err(TrainConfigError(m.into()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.average_last == 0 {
            return bad("average_last must be positive");
        }
        if self.warmup == 0 {
            return bad("warmup must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return bad("lr_factor must be a positive number");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskConfigError),
    #[error(transparent)]
    Model(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// One entry per utterance that contributed, in batch order.
    pub losses: Vec<LossBreakdown>,
    pub skipped: usize,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty()).then(|| self.losses.iter().map(|b| b.total).sum::<f64>() / self.losses.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-utterance training objective over the epoch.
    pub train_loss: f64,
    pub dev_ter: f64,
    pub skipped: usize,
}

impl EpochMetrics {
    /// `epoch<TAB>train_loss<TAB>dev_ter`
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}", self.epoch, self.train_loss, self.dev_ter)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub rate: f64,
    pub counts: ErrorCounts,
    pub hypotheses: Vec<LabelSequence>,
}

pub struct Trainer {
    run: RunConfig,
    spec: IntermediateLossSpec,
    model: Model,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    skipped: usize,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self, TrainError> {
        run.validate()?;
        let model = Model::new(run.model_config())?;
        let schedule = Schedule {
            factor: run.train.lr_factor,
            d_model: run.model.d_model,
            warmup: run.train.warmup,
        };
        let optimizer = OptimizerState::new(&model.params, schedule);
        // Stream 0 of the same seed initializes the model.
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        rng.set_stream(1);
        Ok(Self {
            spec: run.loss_spec(),
            run,
            model,
            optimizer,
            rng,
            skipped: 0,
        })
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    /// Utterances skipped so far because no alignment fits their length.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.model.params, &self.run.to_text())
    }

    pub fn step(&mut self, batch: &[Utterance]) -> Result<StepReport, TrainError> {
        let refs: Vec<&Utterance> = batch.iter().collect();
        self.step_refs(&refs)
    }

    fn step_refs(&mut self, batch: &[&Utterance]) -> Result<StepReport, TrainError> {
        let step = self.optimizer.step + 1;
        let plan = LossPlan::sample(&self.spec, self.model.encoder.config.layers, &mut self.rng)?;
        let step_seed = self.rng.next_u64();

        let results: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, utt)| utterance_gradient(&self.model, utt, &plan, step_seed, i as u64))
            .collect();

        let mut losses = Vec::with_capacity(batch.len());
        let mut sum: Option<Vec<Vec<f64>>> = None;
        let mut skipped = 0;
        for r in results {
            match r.map_err(|e| divergence(step, e))? {
                None => skipped += 1,
                Some((breakdown, grads)) => {
                    if !breakdown.total.is_finite() {
                        return Err(TrainError::Divergence {
                            step,
                            reason: format!("non-finite loss {}", breakdown.total),
                        });
                    }
                    losses.push(breakdown);
                    match &mut sum {
                        None => sum = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grads) {
                                a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                            }
                        }
                    }
                }
            }
        }
        if skipped > 0 {
            warn!("step {step}: skipped {skipped} infeasible utterance(s)");
            self.skipped += skipped;
        }
        let Some(mut grads) = sum else {
            warn!("step {step}: no usable utterances, update skipped");
            return Ok(StepReport {
                step: self.optimizer.step,
                lr: 0.0,
                losses,
                skipped,
                grad_norm: 0.0,
            });
        };
        let n = losses.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        let grad_norm = optim::clip_global_norm(&mut grads, GRAD_CLIP);
        if !grad_norm.is_finite() {
            return Err(TrainError::Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let lr = self.optimizer.update(&mut self.model.params, &grads);
        Ok(StepReport {
            step,
            lr,
            losses,
            skipped,
            grad_norm,
        })
    }

    /// One shuffled pass over `data`; returns the mean per-utterance
    /// objective.
    pub fn train_epoch(&mut self, data: &[Utterance]) -> Result<f64, TrainError> {
        let mut order: Vec<&Utterance> = data.iter().collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(self.run.train.batch) {
            let report = self.step_refs(batch)?;
            total += report.losses.iter().map(|b| b.total).sum::<f64>();
            count += report.losses.len();
        }
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }

    /// Eval-mode mean final-layer CTC loss; no parameters change.
    pub fn eval_loss(&self, data: &[Utterance]) -> Result<f64, TrainError> {
        final_ctc_loss(&self.model, data)
    }
}

fn divergence(step: u64, e: TrainError) -> TrainError {
    match e {
        TrainError::Objective(ObjectiveError::Ctc(CtcError::Tensor(TensorError::NonFinite { op }))) => {
            TrainError::Divergence {
                step,
                reason: format!("non-finite value in {op}"),
            }
        }
        e => e,
    }
}

/// Loss terms and one gradient per parameter.
type UtteranceGradient = (LossBreakdown, Vec<Vec<f64>>);

fn utterance_gradient(
    model: &Model,
    utt: &Utterance,
    plan: &LossPlan,
    step_seed: u64,
    index: u64,
) -> Result<Option<UtteranceGradient>, TrainError> {
    if utt.features.rows() < required_length(&utt.labels) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(index);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let trace = model
        .encoder
        .forward(&mut tape, &p, &utt.features, Mode::Train, &mut rng)
        .map_err(ObjectiveError::from)?;
    let (loss, breakdown) = total_loss(&mut tape, &p, &trace, &utt.labels, plan, &model.heads)?;
    tape.backward(loss).map_err(ObjectiveError::from)?;
    Ok(Some((breakdown, p.grads(&tape))))
}

/// Eval-mode mean final-layer CTC loss over the feasible utterances of `data`.
pub fn final_ctc_loss(model: &Model, data: &[Utterance]) -> Result<f64, TrainError> {
    let losses: Vec<Option<f64>> = data
        .par_iter()
        .map(|utt| -> Result<Option<f64>, TrainError> {
            if utt.features.rows() < required_length(&utt.labels) {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let trace = eval_forward(model, &mut tape, &p, utt)?;
            let logp = model
                .heads
                .final_head
                .log_posteriors(&mut tape, &p, trace.last())
                .map_err(ObjectiveError::from)?;
            let loss = ctc_loss_node(&mut tape, logp, &utt.labels).map_err(ObjectiveError::from)?;
            Ok(Some(tape.value(loss).item()))
        })
        .collect::<Result<_, _>>()?;
    let used: Vec<f64> = losses.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

fn eval_forward(
    model: &Model,
    tape: &mut Tape,
    p: &crate::params::Bound,
    utt: &Utterance,
) -> Result<crate::encoder::LayerTrace, TrainError> {
    // Eval mode draws nothing from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    Ok(model
        .encoder
        .forward(tape, p, &utt.features, Mode::Eval, &mut unused)
        .map_err(ObjectiveError::from)?)
}

/// Greedy final-layer decoding of every utterance and the micro-averaged
/// token error rate.
pub fn evaluate_model(model: &Model, data: &[Utterance]) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let hypotheses: Vec<LabelSequence> = data
        .par_iter()
        .map(|utt| {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let trace = eval_forward(model, &mut tape, &p, utt)?;
            Ok(eval_decode(&mut tape, &p, &trace, &model.heads)?)
        })
        .collect::<Result<_, TrainError>>()?;
    let mut counts = ErrorCounts::default();
    for (utt, hyp) in data.iter().zip(&hypotheses) {
        let c = edit_distance(utt.labels.tokens(), hyp.tokens());
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
        counts.reference_len += c.reference_len;
    }
    Ok(Evaluation {
        rate: counts.rate(),
        counts,
        hypotheses,
    })
}

/// Rebuilds the model a checkpoint was trained as, from its config echo.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Model), TrainError> {
    let run = RunConfig::parse(&ck.config)?;
    run.validate()?;
    let model = Model::with_params(run.model_config(), ck.to_params())?;
    Ok((run, model))
}

pub fn evaluate(ck: &Checkpoint, data: &[Utterance]) -> Result<Evaluation, TrainError> {
    let (_, model) = model_from_checkpoint(ck)?;
    evaluate_model(&model, data)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Initial parameters followed by one checkpoint per epoch.
    pub checkpoints: Vec<Checkpoint>,
    /// Mean of the last `average_last` epoch checkpoints (the initial one
    /// when no epoch ran).
    pub averaged: Checkpoint,
    pub skipped: usize,
    pub steps: u64,
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

pub const AVERAGED_FILE: &str = "averaged.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";

/// Full protocol: generate the task, train for `train.epochs` epochs with a
/// dev evaluation after each, and average the trailing checkpoints. With
/// `out_dir`, every checkpoint, the average and the metrics log are written
/// there as they are produced.
pub fn train(run: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(run.clone())?;
    let task = SyntheticTask::new(run.task.clone())?;
    let train_set = task.generate(Split::Train);
    let dev_set = task.generate(Split::Dev);

    let save = |ck: &Checkpoint, name: &str| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            ck.save(dir.join(name))?;
        }
        Ok(())
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let mut checkpoints = vec![trainer.checkpoint()];
    save(&checkpoints[0], &checkpoint_file_name(0))?;
    let mut epochs = Vec::with_capacity(run.train.epochs);
    let mut log_text = String::new();
    for epoch in 1..=run.train.epochs {
        let skipped_before = trainer.skipped();
        let train_loss = trainer.train_epoch(&train_set)?;
        let dev_ter = if dev_set.is_empty() {
            f64::NAN
        } else {
            evaluate_model(trainer.model(), &dev_set)?.rate
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            dev_ter,
            skipped: trainer.skipped() - skipped_before,
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.4}, dev TER {:.2}%, lr {:.2e}",
            dev_ter * 100.0,
            trainer.optimizer().schedule.rate(trainer.optimizer().step)
        );
        log_text.push_str(&metrics.log_line());
        log_text.push('\n');
        if let Some(dir) = out_dir {
            let path = dir.join(METRICS_FILE);
            fs::write(&path, &log_text).map_err(|source| TrainError::Io { path, source })?;
        }
        let ck = trainer.checkpoint();
        save(&ck, &checkpoint_file_name(epoch))?;
        checkpoints.push(ck);
        epochs.push(metrics);
    }

    let tail = if run.train.epochs == 0 {
        &checkpoints[..]
    } else {
        let from = checkpoints.len().saturating_sub(run.train.average_last).max(1);
        &checkpoints[from..]
    };
    let averaged = average_checkpoints(tail)?;
    save(&averaged, AVERAGED_FILE)?;
    if trainer.skipped() > 0 {
        warn!("skipped {} infeasible utterance(s) in total", trainer.skipped());
    }
    Ok(TrainOutcome {
        epochs,
        steps: trainer.optimizer().step,
        skipped: trainer.skipped(),
        checkpoints,
        averaged,
    })
}
