//! Batch evaluation across threads with results kept in pair order.

use std::num::NonZeroUsize;

use rspu_core::losses::LossConfig;
use rspu_core::model::DerainModel;
use rspu_core::train::{pair_objective, Dataset, PairResult, TrainingPair};

use crate::{CliError, CliResult};

pub const THREADS_VAR: &str = "RSPU_THREADS";

/// Thread cap from `RSPU_THREADS`, 1 when unset.
pub fn thread_count() -> CliResult<NonZeroUsize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(NonZeroUsize::MIN),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
    }
}

pub fn evaluate_pairs(
    model: &DerainModel,
    dataset: &Dataset,
    pairs: &[TrainingPair],
    cfg: &LossConfig,
    threads: NonZeroUsize,
) -> rspu_core::Result<Vec<PairResult>> {
    let threads = threads.get().min(pairs.len().max(1));
    if threads == 1 {
        return pairs.iter().map(|&p| pair_objective(model, dataset, p, cfg)).collect();
    }
    let chunk = pairs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&p| pair_objective(model, dataset, p, cfg))
                        .collect::<rspu_core::Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("pair evaluation thread panicked")?);
        }
        Ok(out)
    })
}
