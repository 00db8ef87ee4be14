//! Benchmark fixtures.

use interctc::config::RunConfig;
use interctc::trainer::{Dataset, Split, SyntheticTask};

/// One training batch drawn from the default synthetic task.
pub fn default_batch() -> (RunConfig, Dataset) {
    let run = RunConfig::default();
    let task = SyntheticTask::new(run.task.clone()).expect("default task");
    let batch = task.generate_n(Split::Train, run.train.batch);
    (run, batch)
}
