//! Scoring generated examples with the estimator and the two baselines.

use vstream_core::estimator::{attention_baseline, random_baseline, score_regions, EstimatorWeights};
use vstream_core::features::pool_span_region;
use vstream_core::metrics::{evaluate, ground_truth, EvalReport};
use vstream_core::oracle::{example_seed, generate_example, GeneratedExample, SpecOracle, DatasetSpec};

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Estimator(&'a EstimatorWeights),
    Attention,
    Random { seed: u64 },
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Estimator(_) => "vstream",
            Method::Attention => "attention",
            Method::Random { .. } => "random",
        }
    }
}

/// Region scores as `[example][span][region]`.
pub fn method_scores(examples: &[GeneratedExample], method: Method<'_>) -> vstream_core::Result<Vec<Vec<Vec<f64>>>> {
    examples
        .iter()
        .enumerate()
        .map(|(e, ex)| {
            ex.spans
                .iter()
                .enumerate()
                .map(|(s, span)| match method {
                    Method::Estimator(w) => score_regions(w, &pool_span_region(&ex.trace, span, &ex.partition)?),
                    Method::Attention => attention_baseline(&ex.trace, span, &ex.partition),
                    Method::Random { seed } => Ok(random_baseline(
                        ex.partition.num_regions(),
                        example_seed(seed, e, 1000 + s as u64),
                    )),
                })
                .collect()
        })
        .collect()
}

/// `count` examples that follow the training range of `spec`, from the same model.
pub fn held_out_examples(oracle: &SpecOracle, spec: &DatasetSpec, count: usize) -> vstream_core::Result<Vec<GeneratedExample>> {
    (spec.num_examples..spec.num_examples + count)
        .map(|i| generate_example(oracle, spec, i))
        .collect()
}

/// Evaluates every method against the same ground truth.
pub fn evaluate_methods(
    oracle: &SpecOracle,
    examples: &[GeneratedExample],
    methods: &[Method<'_>],
    top_k: usize,
) -> vstream_core::Result<Vec<EvalReport>> {
    let truth = ground_truth(oracle, examples)?;
    methods
        .iter()
        .map(|&m| evaluate(m.name(), oracle, examples, &truth, &method_scores(examples, m)?, top_k))
        .collect()
}
