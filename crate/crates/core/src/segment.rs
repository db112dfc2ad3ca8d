//! Incremental segmentation of a generated token stream into spans.
//!
//! Boundaries:
//! - sentence-final `.`, `?` or `!` followed by whitespace (numbered list
//!   markers such as `2.` do not count);
//! - a newline inside a token;
//! - thinking delimiters: a boundary before an opening delimiter and after a
//!   closing one;
//! - `Step N:` markers, which start a new span.
//!
//! Whitespace-only tokens after a boundary stay with the span they close.
//! Every token ends up in exactly one span.

use alloc::string::String;
use alloc::vec::Vec;

use crate::trace::Span;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmenterConfig {
    pub open_delimiters: Vec<String>,
    pub close_delimiters: Vec<String>,
    pub step_markers: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            open_delimiters: alloc::vec![String::from("<think>"), String::from("<|think|>")],
            close_delimiters: alloc::vec![String::from("</think>"), String::from("<|/think|>")],
            step_markers: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Terminal {
    /// Needs the next token to start with whitespace.
    Sentence,
    /// Closes before the next non-whitespace token no matter what.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Pending,
    Match,
    Fail,
}

fn step_marker(s: &str) -> Marker {
    let mut chars = s.chars().peekable();
    for want in "Step".chars() {
        match chars.next() {
            None => return Marker::Pending,
            Some(c) if c == want => {}
            Some(_) => return Marker::Fail,
        }
    }
    while chars.peek() == Some(&' ') {
        chars.next();
    }
    let mut digits = 0;
    while let Some(c) = chars.peek() {
        if c.is_ascii_digit() {
            digits += 1;
            chars.next();
        } else {
            break;
        }
    }
    match chars.peek() {
        None => return Marker::Pending,
        Some(_) if digits == 0 => return Marker::Fail,
        _ => {}
    }
    while chars.peek() == Some(&' ') {
        chars.next();
    }
    match chars.next() {
        None => Marker::Pending,
        Some(':') => Marker::Match,
        Some(_) => Marker::Fail,
    }
}

fn is_blank(s: &str) -> bool {
    s.chars().all(char::is_whitespace)
}

fn is_list_number(s: &str) -> bool {
    let body = s.trim().trim_end_matches('.');
    !body.is_empty() && body.chars().all(|c| c.is_ascii_digit())
}

/// Push-based segmenter. Feed tokens with [`push`](Self::push); it returns the
/// spans that token closed. [`stable_len`](Self::stable_len) tells how many
/// tokens have a final span assignment.
#[derive(Debug, Clone)]
pub struct SpanSegmenter {
    config: SegmenterConfig,
    pushed: usize,
    start: usize,
    /// Text of tokens `start..pushed`.
    texts: Vec<String>,
    terminal: Option<Terminal>,
    step_pending: Option<usize>,
}

impl Default for SpanSegmenter {
    fn default() -> Self {
        Self::new(SegmenterConfig::default())
    }
}

impl SpanSegmenter {
    pub fn new(config: SegmenterConfig) -> Self {
        SpanSegmenter {
            config,
            pushed: 0,
            start: 0,
            texts: Vec::new(),
            terminal: None,
            step_pending: None,
        }
    }

    pub fn pushed(&self) -> usize {
        self.pushed
    }

    /// Tokens before this index will not change span.
    pub fn stable_len(&self) -> usize {
        self.step_pending.unwrap_or(self.pushed)
    }

    fn close_at(&mut self, end: usize, out: &mut Vec<Span>) {
        if end <= self.start {
            return;
        }
        let label: String = self.texts.drain(..end - self.start).collect();
        out.push(Span::labeled(self.start, end, label.trim()));
        self.start = end;
    }

    pub fn push(&mut self, text: &str) -> Vec<Span> {
        let j = self.pushed;
        self.pushed += 1;
        self.texts.push(String::from(text));
        let mut out = Vec::new();

        if let Some(p) = self.step_pending {
            let buf: String = self.texts[p - self.start..].concat();
            match step_marker(buf.trim_start()) {
                Marker::Pending => return out,
                Marker::Match => {
                    self.step_pending = None;
                    self.close_at(p, &mut out);
                    self.after_rules(text);
                    return out;
                }
                Marker::Fail => self.step_pending = None,
            }
        }

        if let Some(term) = self.terminal {
            if is_blank(text) {
                if !text.is_empty() {
                    self.terminal = Some(Terminal::Hard);
                }
                return out;
            }
            self.terminal = None;
            if term == Terminal::Hard || text.starts_with(char::is_whitespace) {
                self.close_at(j, &mut out);
            }
        }

        let trimmed = text.trim_start();
        if self.config.open_delimiters.iter().any(|d| trimmed.starts_with(d.as_str())) {
            self.close_at(j, &mut out);
        }
        if self.config.step_markers && j > self.start && trimmed.starts_with('S') {
            match step_marker(trimmed) {
                Marker::Match => self.close_at(j, &mut out),
                Marker::Pending => {
                    self.step_pending = Some(j);
                    return out;
                }
                Marker::Fail => {}
            }
        }
        self.after_rules(text);
        out
    }

    fn after_rules(&mut self, text: &str) {
        let core = text.trim_end();
        let trailing_ws = core.len() < text.len();
        if text.contains('\n') || self.config.close_delimiters.iter().any(|d| core.ends_with(d.as_str())) {
            self.terminal = Some(Terminal::Hard);
        } else if core.ends_with(['.', '?', '!']) && !(core.ends_with('.') && is_list_number(core)) {
            self.terminal = Some(if trailing_ws { Terminal::Hard } else { Terminal::Sentence });
        }
    }

    /// Ends the stream and returns the last open span, if any.
    pub fn finish(&mut self) -> Option<Span> {
        self.step_pending = None;
        self.terminal = None;
        let mut out = Vec::new();
        self.close_at(self.pushed, &mut out);
        out.pop()
    }
}

/// Segments a complete token sequence.
pub fn segment_spans<S: AsRef<str>>(tokens: &[S]) -> Vec<Span> {
    segment_with(tokens, SegmenterConfig::default())
}

pub fn segment_with<S: AsRef<str>>(tokens: &[S], config: SegmenterConfig) -> Vec<Span> {
    let mut seg = SpanSegmenter::new(config);
    let mut spans = Vec::new();
    for t in tokens {
        spans.extend(seg.push(t.as_ref()));
    }
    spans.extend(seg.finish());
    spans
}
