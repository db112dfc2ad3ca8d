//! `VSTRACE` v1 binary files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VSTR"  u32 version=1
//! u32 L, H, T, M, D, rows, cols
//! u32 n_tokens, then per token: u32 byte length, UTF-8 bytes
//! f32 attn[L][H][T][M]
//! f32 feature_grid[M][D]
//! f32 saliency[M]
//! u32 n_spans, then per span: u32 start, u32 end, u32 label length, UTF-8 label
//! u64 CRC-64/XZ of every preceding byte
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use vstream_core::trace::{AttentionTrace, Span, Violation};

pub const MAGIC: [u8; 4] = *b"VSTR";
pub const VERSION: u32 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, thiserror::Error)]
pub enum TraceFileError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"VSTR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("{what} is not valid UTF-8")]
    BadUtf8 { what: &'static str },
    #[error("{count} value(s) do not fit in the format's u32 fields")]
    TooLarge { count: usize },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("{0} trailing byte(s) after checksum")]
    TrailingBytes(usize),
    #[error("invalid trace: {}", .0.first().map(ToString::to_string).unwrap_or_default())]
    Invalid(Vec<Violation>),
}

impl TraceFileError {
    /// The offending field for invariant violations.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            TraceFileError::Invalid(v) => v.first().map(|v| v.field),
            _ => None,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), TraceFileError> {
    let v = u32::try_from(v).map_err(|_| TraceFileError::TooLarge { count: v })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), TraceFileError> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes a valid trace, checksum included.
pub fn encode_trace(trace: &AttentionTrace) -> Result<Vec<u8>, TraceFileError> {
    let violations = trace.validate();
    if !violations.is_empty() {
        return Err(TraceFileError::Invalid(violations));
    }
    let floats = trace.attn.len() + trace.feature_grid.len() + trace.saliency.len();
    let mut out = Vec::with_capacity(64 + 4 * floats);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        trace.num_layers,
        trace.num_heads,
        trace.num_steps,
        trace.num_vision_tokens,
        trace.feature_dim,
        trace.grid_dims.0,
        trace.grid_dims.1,
    ] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, trace.tokens.len())?;
    for t in &trace.tokens {
        put_str(&mut out, t)?;
    }
    for x in trace.attn.iter().chain(&trace.feature_grid).chain(&trace.saliency) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    put_u32(&mut out, trace.spans.len())?;
    for s in &trace.spans {
        put_u32(&mut out, s.start)?;
        put_u32(&mut out, s.end)?;
        put_str(&mut out, &s.label)?;
    }
    let crc = CHECKSUM.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes the encoded trace and returns the byte count.
pub fn save_trace<W: Write>(trace: &AttentionTrace, mut sink: W) -> Result<usize, TraceFileError> {
    let bytes = encode_trace(trace)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len())
}

pub fn save_trace_file(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<(), TraceFileError> {
    let bytes = encode_trace(trace)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TraceFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(TraceFileError::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, TraceFileError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &'static str) -> Result<String, TraceFileError> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| TraceFileError::BadUtf8 { what })
    }

    fn f32s(&mut self, count: Option<usize>, what: &'static str) -> Result<Vec<f32>, TraceFileError> {
        let bytes = count
            .and_then(|c| c.checked_mul(4))
            .ok_or(TraceFileError::Truncated { what })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses and checks a complete file image.
pub fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace, TraceFileError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(TraceFileError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(TraceFileError::UnsupportedVersion(version as u32));
    }
    let l = c.u32("header")?;
    let h = c.u32("header")?;
    let t = c.u32("header")?;
    let m = c.u32("header")?;
    let d = c.u32("header")?;
    let rows = c.u32("header")?;
    let cols = c.u32("header")?;

    let n_tokens = c.u32("token table")?;
    let mut tokens = Vec::with_capacity(n_tokens.min(bytes.len() / 4));
    for _ in 0..n_tokens {
        tokens.push(c.string("token table")?);
    }
    let n_attn = l.checked_mul(h).and_then(|x| x.checked_mul(t)).and_then(|x| x.checked_mul(m));
    let attn = c.f32s(n_attn, "attention")?;
    let feature_grid = c.f32s(m.checked_mul(d), "feature grid")?;
    let saliency = c.f32s(Some(m), "saliency")?;
    let n_spans = c.u32("span table")?;
    let mut spans = Vec::with_capacity(n_spans.min(bytes.len() / 12));
    for _ in 0..n_spans {
        let start = c.u32("span table")?;
        let end = c.u32("span table")?;
        let label = c.string("span table")?;
        spans.push(Span::labeled(start, end, label));
    }
    let body_len = c.pos;
    let stored = u64::from_le_bytes(c.take(8, "checksum")?.try_into().expect("8 bytes"));
    let computed = CHECKSUM.checksum(&bytes[..body_len]);
    if stored != computed {
        return Err(TraceFileError::Checksum { stored, computed });
    }
    if c.pos != bytes.len() {
        return Err(TraceFileError::TrailingBytes(bytes.len() - c.pos));
    }

    let trace = AttentionTrace {
        num_layers: l,
        num_heads: h,
        num_steps: t,
        num_vision_tokens: m,
        feature_dim: d,
        grid_dims: (rows, cols),
        tokens,
        attn,
        feature_grid,
        saliency,
        spans,
    };
    let violations = trace.validate();
    if !violations.is_empty() {
        return Err(TraceFileError::Invalid(violations));
    }
    Ok(trace)
}

pub fn load_trace<R: Read>(mut source: R) -> Result<AttentionTrace, TraceFileError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

pub fn load_trace_file(path: impl AsRef<Path>) -> Result<AttentionTrace, TraceFileError> {
    decode_trace(&std::fs::read(path)?)
}

/// All invariant violations of a trace; empty when it is valid.
pub fn validate_trace(trace: &AttentionTrace) -> Vec<Violation> {
    trace.validate()
}
