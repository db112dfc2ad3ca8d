//! File formats, the threaded streaming pipeline, parallel data collection and
//! the command-line driver built on `vstream-core`.

pub mod cli;
pub mod collect;
pub mod config;
pub mod evaluation;
pub mod formats;
pub mod stream;
pub mod trace_io;

pub use stream::{stream_attribute, AttributionFrame, PipelineError, StreamConfig};
pub use trace_io::{load_trace, save_trace, validate_trace, TraceFileError};
