//! Synthetic sequence-labeling task.
//!
//! Each token id owns a fixed random prototype vector. An utterance is the
//! concatenation of its tokens' prototypes, each repeated for a random
//! duration, with i.i.d. Gaussian noise on every frame. Equal neighbouring
//! tokens are separated by one silence (all-zero prototype) frame so the
//! boundary is observable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::ctc::{required_length, LabelSequence};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid task config: {0}")]
pub struct TaskConfigError(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskConfig {
    pub vocab: usize,
    pub dim: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            vocab: 5,
            dim: 16,
            min_labels: 2,
            max_labels: 8,
            min_duration: 2,
            max_duration: 4,
            noise: 0.25,
            train_size: 2048,
            dev_size: 256,
            test_size: 256,
            seed: 1234,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<(), TaskConfigError> {
        let bad = |m: &str| Err(TaskConfigError(m.into()));
        if self.vocab == 0 || self.dim == 0 {
            return bad("vocab and dim must be positive");
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return bad("label length range must satisfy 1 <= min <= max");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("duration range must satisfy 1 <= min <= max");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `T × D` frames.
    pub features: Tensor,
    pub labels: LabelSequence,
    /// Frames spent on each label, excluding silence separators.
    pub durations: Vec<usize>,
}

pub type Dataset = Vec<Utterance>;

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    config: SyntheticTaskConfig,
    prototypes: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: SyntheticTaskConfig) -> Result<Self, TaskConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prototypes = (0..config.vocab)
            .map(|_| (0..config.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Ok(Self { config, prototypes })
    }

    pub fn config(&self) -> &SyntheticTaskConfig {
        &self.config
    }

    /// Prototype of token `id` (1-based).
    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id - 1]
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.train_size,
            Split::Dev => self.config.dev_size,
            Split::Test => self.config.test_size,
        }
    }

    pub fn generate(&self, split: Split) -> Dataset {
        self.generate_n(split, self.split_size(split))
    }

    /// First `n` utterances of a split. Each split draws from its own
    /// random stream.
    pub fn generate_n(&self, split: Split, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(split.stream());
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Utterance {
        let c = &self.config;
        loop {
            let len = rng.random_range(c.min_labels..=c.max_labels);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..=c.vocab)).collect();
            let durations: Vec<usize> = (0..len)
                .map(|_| rng.random_range(c.min_duration..=c.max_duration))
                .collect();
            let mut frames: Vec<f64> = Vec::new();
            let silence = vec![0.0; c.dim];
            for (i, (&tok, &dur)) in tokens.iter().zip(&durations).enumerate() {
                if i > 0 && tokens[i - 1] == tok {
                    frames.extend_from_slice(&silence);
                }
                for _ in 0..dur {
                    frames.extend_from_slice(self.prototype(tok));
                }
            }
            if c.noise > 0.0 {
                for v in &mut frames {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += c.noise * z;
                }
            }
            let labels = LabelSequence::new(tokens).expect("non-blank ids");
            let t = frames.len() / c.dim;
            // Unreachable with min_duration >= 1; kept as a hard guarantee.
            if t < required_length(&labels) {
                continue;
            }
            return Utterance {
                features: Tensor::new(&[t, c.dim], frames).expect("shape"),
                labels,
                durations,
            };
        }
    }
}
