//! Runs alone in its own binary so the counting allocator sees only this.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use vstream::stream::{LinearScorer, SpanConsumer};
use vstream_core::estimator::EstimatorWeights;
use vstream_core::trace::Span;
use vstream_core::unitization::partition_voronoi;

struct Counting;

static ALLOCS: AtomicUsize = AtomicUsize::new(0);
static ARMED: AtomicBool = AtomicBool::new(false);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if ARMED.load(Ordering::SeqCst) {
            ALLOCS.fetch_add(1, Ordering::SeqCst);
        }
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if ARMED.load(Ordering::SeqCst) {
            ALLOCS.fetch_add(1, Ordering::SeqCst);
        }
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

#[test]
fn folding_rows_never_allocates() {
    let (l, h, m) = (2, 4, 64);
    let partition = partition_voronoi((8, 8), 9).unwrap();
    let saliency = vec![1.0; m];
    let w = EstimatorWeights::new(l, h, (0..l * h).map(|i| i as f64).collect()).unwrap();
    let mut consumer = SpanConsumer::new(l, h, &partition, &saliency, LinearScorer(w));
    let row: Vec<f32> = (0..l * h * m).map(|i| (i % 7) as f32 / 1000.0).collect();
    let state = consumer.state_len();
    assert_eq!(state, 9 * l * h);

    for len in [1usize, 10, 1000] {
        ALLOCS.store(0, Ordering::SeqCst);
        ARMED.store(true, Ordering::SeqCst);
        for _ in 0..len {
            consumer.on_row(&row).unwrap();
        }
        ARMED.store(false, Ordering::SeqCst);
        assert_eq!(ALLOCS.load(Ordering::SeqCst), 0, "allocated while folding {len} rows");
        assert_eq!(consumer.state_len(), state);
        let frame = consumer.close(&Span::new(0, len)).unwrap();
        assert_eq!(frame.region_scores.len(), 9);
    }
}
