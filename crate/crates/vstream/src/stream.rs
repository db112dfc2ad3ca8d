//! Real-time attribution: a producer thread segments the token stream and
//! pushes per-token attention rows into a bounded buffer; a consumer thread
//! folds rows into running span sums and scores each span as it closes.
//!
//! Nothing here runs the model. Rows are read from a [`TokenSource`], which is
//! the attention the decoder already computed.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use vstream_core::estimator::{score_regions, EstimatorWeights};
use vstream_core::features::{SpanAccumulator, SpanFeatureMatrix};
use vstream_core::refine::refine_to_patches;
use vstream_core::segment::{SegmenterConfig, SpanSegmenter};
use vstream_core::trace::{AttentionTrace, Span};
use vstream_core::unitization::RegionPartition;

pub const DEFAULT_CAPACITY: usize = 1024;

/// Whether the producer waits for each span's frame before reading on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Wait for the frame; output, including `tokens_behind`, is deterministic.
    Lockstep,
    /// Never wait except on a full buffer.
    Free,
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    /// Buffer size in token rows.
    pub capacity: usize,
    pub pacing: Pacing,
    pub segmenter: SegmenterConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            capacity: DEFAULT_CAPACITY,
            pacing: Pacing::Lockstep,
            segmenter: SegmenterConfig::default(),
        }
    }
}

/// One decoded token and the attention it emitted, `[layer][head][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub text: String,
    pub rows: Vec<f32>,
}

pub trait TokenSource: Send {
    /// `(layers, heads, vision tokens)`.
    fn dims(&self) -> (usize, usize, usize);
    fn next_step(&mut self) -> Option<StepRecord>;
}

/// Replays a cached trace step by step.
#[derive(Debug)]
pub struct TraceSource<'a> {
    trace: &'a AttentionTrace,
    next: usize,
}

impl<'a> TraceSource<'a> {
    pub fn new(trace: &'a AttentionTrace) -> Self {
        TraceSource { trace, next: 0 }
    }
}

impl TokenSource for TraceSource<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.trace.num_layers, self.trace.num_heads, self.trace.num_vision_tokens)
    }

    fn next_step(&mut self) -> Option<StepRecord> {
        if self.next >= self.trace.num_steps {
            return None;
        }
        let t = self.next;
        self.next += 1;
        Some(StepRecord {
            text: self.trace.tokens[t].clone(),
            rows: self.trace.step_rows(t),
        })
    }
}

/// Turns pooled span features into region scores.
pub trait RegionScorer: Send {
    /// Expected feature dimension `L * H`.
    fn dim(&self) -> usize;
    fn score(&mut self, features: &SpanFeatureMatrix) -> vstream_core::Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct LinearScorer(pub EstimatorWeights);

impl RegionScorer for LinearScorer {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn score(&mut self, features: &SpanFeatureMatrix) -> vstream_core::Result<Vec<f64>> {
        score_regions(&self.0, features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionFrame {
    pub span_id: usize,
    pub token_range: [usize; 2],
    pub region_scores: Vec<f64>,
    pub patch_scores: Vec<f64>,
    pub tokens_behind: usize,
    /// Since stream start, when the span was closed by the producer.
    #[serde(skip)]
    pub enqueued_at: Duration,
    /// Since stream start, when the frame left the consumer.
    #[serde(skip)]
    pub emitted_at: Duration,
    /// Consumer time spent folding rows and scoring this span.
    #[serde(skip)]
    pub compute_time: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("consumer panicked: {0}")]
    ConsumerPanicked(String),
    #[error("producer panicked: {0}")]
    ProducerPanicked(String),
    #[error("consumer failed: {0}")]
    Consumer(#[from] vstream_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSummary {
    pub tokens: usize,
    pub frames: usize,
}

enum Message {
    Row(Vec<f32>),
    Close { span: Span, enqueued_at: Duration },
}

/// Consumer-side state: running sums for the open span and what is needed to
/// score it. Folding a row does not allocate.
pub struct SpanConsumer<'a, C> {
    acc: SpanAccumulator,
    partition: &'a RegionPartition,
    saliency: &'a [f64],
    scorer: C,
    next_id: usize,
    busy: Duration,
}

impl<'a, C: RegionScorer> SpanConsumer<'a, C> {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        partition: &'a RegionPartition,
        saliency: &'a [f64],
        scorer: C,
    ) -> Self {
        SpanConsumer {
            acc: SpanAccumulator::new(num_layers, num_heads, partition.num_regions()),
            partition,
            saliency,
            scorer,
            next_id: 0,
            busy: Duration::ZERO,
        }
    }

    /// Number of reals held for the open span.
    pub fn state_len(&self) -> usize {
        self.acc.state_len()
    }

    pub fn on_row(&mut self, row: &[f32]) -> vstream_core::Result<()> {
        self.acc.add_step(row, self.partition)
    }

    pub fn close(&mut self, span: &Span) -> vstream_core::Result<AttributionFrame> {
        if self.acc.tokens() != span.len() {
            return Err(vstream_core::Error::Validation {
                field: "span",
                reason: format!("{} rows folded for span of {} tokens", self.acc.tokens(), span.len()),
            });
        }
        let features = self.acc.finish(self.partition)?;
        let region_scores = self.scorer.score(&features)?;
        let patch_scores = refine_to_patches(&region_scores, self.partition, self.saliency)?;
        let id = self.next_id;
        self.next_id += 1;
        Ok(AttributionFrame {
            span_id: id,
            token_range: [span.start, span.end],
            region_scores,
            patch_scores,
            tokens_behind: 0,
            enqueued_at: Duration::ZERO,
            emitted_at: Duration::ZERO,
            compute_time: Duration::ZERO,
        })
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<(), PipelineError> {
    if expected == actual {
        Ok(())
    } else {
        Err(PipelineError::Dimension { what, expected, actual })
    }
}

/// Producer side of the buffer. Rows wait in `held` until their span is
/// settled, then go out in token order.
struct Outbox {
    tx: mpsc::SyncSender<Message>,
    ack: mpsc::Receiver<()>,
    lockstep: bool,
    alive: bool,
    held: VecDeque<Vec<f32>>,
    sent: usize,
    start: Instant,
}

impl Outbox {
    fn send(&mut self, msg: Message) {
        if self.alive && self.tx.send(msg).is_err() {
            log::warn!("consumer gone; producer continues without attribution");
            self.alive = false;
        }
    }

    fn release(&mut self, upto: usize) {
        while self.sent < upto {
            let row = self.held.pop_front().expect("a held row for every unsent token");
            self.send(Message::Row(row));
            self.sent += 1;
        }
    }

    fn close(&mut self, span: Span) {
        self.release(span.end);
        let enqueued_at = self.start.elapsed();
        self.send(Message::Close { span, enqueued_at });
        if self.lockstep && self.alive && self.ack.recv().is_err() {
            self.alive = false;
        }
    }
}

/// Streams `source` through segmentation, pooling, scoring and patch
/// refinement, calling `on_frame` for every span in order.
///
/// A consumer failure or panic ends attribution with an error, but the
/// producer still drains the source to its end.
pub fn stream_attribute<S, C, F>(
    mut source: S,
    partition: &RegionPartition,
    scorer: C,
    saliency: &[f64],
    config: &StreamConfig,
    mut on_frame: F,
) -> Result<StreamSummary, PipelineError>
where
    S: TokenSource,
    C: RegionScorer,
    F: FnMut(AttributionFrame),
{
    let (l, h, m) = source.dims();
    check_dim("scorer feature dimension", l * h, scorer.dim())?;
    check_dim("partition vision tokens", m, partition.num_tokens())?;
    check_dim("saliency length", m, saliency.len())?;
    if config.capacity == 0 {
        return Err(PipelineError::Config("buffer capacity must be at least 1".into()));
    }

    let start = Instant::now();
    let generated = AtomicUsize::new(0);
    let (row_tx, row_rx) = mpsc::sync_channel::<Message>(config.capacity);
    let (frame_tx, frame_rx) = mpsc::channel::<AttributionFrame>();
    let (ack_tx, ack_rx) = mpsc::channel::<()>();
    let lockstep = config.pacing == Pacing::Lockstep;
    let seg_config = config.segmenter.clone();
    let generated = &generated;

    let (frames, producer, consumer) = thread::scope(|scope| {
        let producer = scope.spawn(move || {
            let mut out = Outbox {
                tx: row_tx,
                ack: ack_rx,
                lockstep,
                alive: true,
                held: VecDeque::new(),
                sent: 0,
                start,
            };
            let mut seg = SpanSegmenter::new(seg_config);
            let mut tokens = 0usize;
            while let Some(step) = source.next_step() {
                tokens += 1;
                generated.store(tokens, Ordering::SeqCst);
                out.held.push_back(step.rows);
                for span in seg.push(&step.text) {
                    out.close(span);
                }
                out.release(seg.stable_len());
            }
            if let Some(span) = seg.finish() {
                out.close(span);
            }
            tokens
        });

        let consumer = scope.spawn(move || -> Result<(), PipelineError> {
            let mut state = SpanConsumer::new(l, h, partition, saliency, scorer);
            let mut first_row: Option<Instant> = None;
            for msg in row_rx {
                match msg {
                    Message::Row(row) => {
                        let t = Instant::now();
                        first_row.get_or_insert(t);
                        state.on_row(&row)?;
                        state.busy += t.elapsed();
                    }
                    Message::Close { span, enqueued_at } => {
                        let t = Instant::now();
                        let mut frame = state.close(&span)?;
                        frame.compute_time = state.busy + t.elapsed();
                        state.busy = Duration::ZERO;
                        frame.enqueued_at = enqueued_at;
                        frame.tokens_behind = generated.load(Ordering::SeqCst).saturating_sub(span.end);
                        frame.emitted_at = start.elapsed();
                        if frame_tx.send(frame).is_err() {
                            break;
                        }
                        let _ = ack_tx.send(());
                    }
                }
            }
            Ok(())
        });

        let mut frames = 0;
        for frame in frame_rx {
            on_frame(frame);
            frames += 1;
        }
        (frames, producer.join(), consumer.join())
    });

    let tokens = producer.map_err(|p| PipelineError::ProducerPanicked(panic_message(p)))?;
    match consumer {
        Err(p) => Err(PipelineError::ConsumerPanicked(panic_message(p))),
        Ok(Err(e)) => Err(e),
        Ok(Ok(())) => Ok(StreamSummary { tokens, frames }),
    }
}

/// Offline counterpart: pools each span of the full trace and scores it.
pub fn attribute_offline<C: RegionScorer>(
    trace: &AttentionTrace,
    spans: &[Span],
    partition: &RegionPartition,
    mut scorer: C,
    saliency: &[f64],
) -> vstream_core::Result<Vec<AttributionFrame>> {
    spans
        .iter()
        .enumerate()
        .map(|(id, span)| {
            let f = vstream_core::features::pool_span_region(trace, span, partition)?;
            let region_scores = scorer.score(&f)?;
            let patch_scores = refine_to_patches(&region_scores, partition, saliency)?;
            Ok(AttributionFrame {
                span_id: id,
                token_range: [span.start, span.end],
                region_scores,
                patch_scores,
                tokens_behind: 0,
                enqueued_at: Duration::ZERO,
                emitted_at: Duration::ZERO,
                compute_time: Duration::ZERO,
            })
        })
        .collect()
}
