//! Target collection over worker threads. Every example depends only on the
//! dataset spec and its index, so the result is identical to the sequential
//! collector for any thread count.

use std::num::NonZeroUsize;
use std::thread;

use vstream_core::estimator::TrainingSet;
use vstream_core::oracle::{check_collect_spec, collect_example, AblationOracle, Dataset, DatasetSpec, SpecOracle};

/// Worker count from the machine, at least one.
pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, NonZeroUsize::get)
}

pub fn collect_dataset(spec: &DatasetSpec, threads: usize) -> vstream_core::Result<Dataset> {
    let oracle = SpecOracle::build(spec)?;
    collect_with(&oracle, spec, threads)
}

pub fn collect_with(oracle: &SpecOracle, spec: &DatasetSpec, threads: usize) -> vstream_core::Result<Dataset> {
    check_collect_spec(spec)?;
    let before = oracle.pass_count();
    let threads = threads.clamp(1, spec.num_examples.max(1));
    let chunk = spec.num_examples.div_ceil(threads).max(1);
    let parts: Vec<vstream_core::Result<Vec<_>>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..spec.num_examples)
            .step_by(chunk)
            .map(|lo| {
                let hi = (lo + chunk).min(spec.num_examples);
                scope.spawn(move || (lo..hi).map(|e| collect_example(oracle, spec, e)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collection worker panicked"))
            .collect()
    });
    let mut examples = Vec::with_capacity(spec.num_examples);
    let mut samples = Vec::new();
    for part in parts {
        for (ex, s) in part? {
            examples.push(ex);
            samples.extend(s);
        }
    }
    Ok(Dataset {
        examples,
        training: TrainingSet { samples },
        forward_passes: oracle.pass_count() - before,
    })
}
