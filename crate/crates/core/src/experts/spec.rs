//! Declarative expert configuration: text grammar and header encoding.
//!
//! Text form is `kind(:key=value)*`; `,` is accepted in place of `:` between pairs.
//!
//! | kind | keys |
//! |------|------|
//! | `nb` | `alpha` (default 1), `window` (count window, default unbounded) |
//! | `ctx` | `order` (0..=8, default 2), `alpha` (default 0.5) |
//! | `ext` | `endpoint`, `context` (cap on context tokens) |
//! | `uniform` | none |
//!
//! An `endpoint` value runs to the next `,` so it may itself contain colons
//! (`ext:endpoint=tcp:127.0.0.1:7070`).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::ExpertError;

pub const MAX_CONTEXT_ORDER: usize = 8;
/// Smoothing values below this are raised to it so no symbol gets zero probability.
pub const MIN_ALPHA: f64 = 1e-6;
pub const DEFAULT_NB_ALPHA: f64 = 1.0;
pub const DEFAULT_CTX_ALPHA: f64 = 0.5;
pub const DEFAULT_CTX_ORDER: u32 = 2;

const TAG_UNIFORM: u8 = 0;
const TAG_NAIVE_BAYES: u8 = 1;
const TAG_CONTEXT: u8 = 2;
const TAG_EXTERNAL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    Uniform,
    NaiveBayes,
    Context,
    External,
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Uniform => "uniform",
            ExpertKind::NaiveBayes => "nb",
            ExpertKind::Context => "ctx",
            ExpertKind::External => "ext",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSpec {
    Uniform,
    NaiveBayes { alpha: f64, window: Option<u32> },
    Context { order: u32, alpha: f64 },
    /// `max_context` caps the context tokens sent per prediction; the server's own
    /// limit applies on top. The endpoint is local configuration and never stored.
    External { endpoint: Option<String>, max_context: Option<u32> },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("expert spec {text:?}, offset {position}: {message}")]
pub struct SpecParseError {
    pub text: String,
    pub position: usize,
    pub message: String,
}

impl ExpertSpec {
    pub fn kind(&self) -> ExpertKind {
        match self {
            ExpertSpec::Uniform => ExpertKind::Uniform,
            ExpertSpec::NaiveBayes { .. } => ExpertKind::NaiveBayes,
            ExpertSpec::Context { .. } => ExpertKind::Context,
            ExpertSpec::External { .. } => ExpertKind::External,
        }
    }

    pub fn naive_bayes(alpha: f64, window: Option<u32>) -> Self {
        ExpertSpec::NaiveBayes { alpha, window }
    }

    pub fn context(order: u32) -> Self {
        ExpertSpec::Context {
            order,
            alpha: DEFAULT_CTX_ALPHA,
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, ExpertSpec::External { .. })
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        let alpha = match *self {
            ExpertSpec::NaiveBayes { alpha, window } => {
                if window == Some(0) {
                    return Err(ExpertError::Config("count window must be at least 1".into()));
                }
                alpha
            }
            ExpertSpec::Context { order, alpha } => {
                if order as usize > MAX_CONTEXT_ORDER {
                    return Err(ExpertError::Config(format!(
                        "context order {order} exceeds the cap of {MAX_CONTEXT_ORDER}"
                    )));
                }
                alpha
            }
            ExpertSpec::External { max_context, .. } => {
                if max_context == Some(0) {
                    return Err(ExpertError::Config("context cap must be at least 1".into()));
                }
                return Ok(());
            }
            ExpertSpec::Uniform => return Ok(()),
        };
        if alpha.is_finite() && alpha > 0.0 {
            Ok(())
        } else {
            Err(ExpertError::Config(format!("lidstone alpha must be positive, got {alpha}")))
        }
    }

    /// Appends the header encoding: kind tag, then fields as little-endian integers,
    /// smoothing values as raw binary64 bits.
    pub fn write_header(&self, out: &mut Vec<u8>) {
        match *self {
            ExpertSpec::Uniform => out.push(TAG_UNIFORM),
            ExpertSpec::NaiveBayes { alpha, window } => {
                out.push(TAG_NAIVE_BAYES);
                out.extend_from_slice(&alpha.to_bits().to_le_bytes());
                out.extend_from_slice(&window.unwrap_or(0).to_le_bytes());
            }
            ExpertSpec::Context { order, alpha } => {
                out.push(TAG_CONTEXT);
                out.extend_from_slice(&order.to_le_bytes());
                out.extend_from_slice(&alpha.to_bits().to_le_bytes());
            }
            ExpertSpec::External { max_context, .. } => {
                out.push(TAG_EXTERNAL);
                out.extend_from_slice(&max_context.unwrap_or(0).to_le_bytes());
            }
        }
    }

    /// Reads one header-encoded spec from the front of `buf`, advancing it.
    pub fn read_header(buf: &mut &[u8]) -> Result<Self, ExpertError> {
        let spec = match take::<1>(buf)?[0] {
            TAG_UNIFORM => ExpertSpec::Uniform,
            TAG_NAIVE_BAYES => {
                let alpha = f64::from_bits(u64::from_le_bytes(take(buf)?));
                let window = u32::from_le_bytes(take(buf)?);
                ExpertSpec::NaiveBayes {
                    alpha,
                    window: (window > 0).then_some(window),
                }
            }
            TAG_CONTEXT => {
                let order = u32::from_le_bytes(take(buf)?);
                let alpha = f64::from_bits(u64::from_le_bytes(take(buf)?));
                ExpertSpec::Context { order, alpha }
            }
            TAG_EXTERNAL => {
                let cap = u32::from_le_bytes(take(buf)?);
                ExpertSpec::External {
                    endpoint: None,
                    max_context: (cap > 0).then_some(cap),
                }
            }
            tag => return Err(ExpertError::Config(format!("unknown expert tag {tag}"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a comma-separated list of specs. A piece with `=` but no `:` continues
    /// the previous spec, so `nb:alpha=0.5,window=64,ctx:order=2` is two specs.
    pub fn parse_list(text: &str) -> Result<Vec<Self>, SpecParseError> {
        let mut groups: Vec<String> = Vec::new();
        for piece in text.split(',') {
            let continues = piece.contains('=') && !piece.contains(':');
            match groups.last_mut() {
                Some(last) if continues => {
                    last.push(',');
                    last.push_str(piece);
                }
                _ => groups.push(piece.to_string()),
            }
        }
        groups.iter().map(|g| g.parse()).collect()
    }
}

fn take<const N: usize>(buf: &mut &[u8]) -> Result<[u8; N], ExpertError> {
    if buf.len() < N {
        return Err(ExpertError::Config("expert spec truncated".into()));
    }
    let (head, rest) = buf.split_at(N);
    *buf = rest;
    Ok(head.try_into().expect("length checked"))
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn error(&self, position: usize, message: impl Into<String>) -> SpecParseError {
        SpecParseError {
            text: self.text.to_string(),
            position,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> (usize, &'a str) {
        let start = self.pos;
        let len = self.rest().find(|c| !f(c)).unwrap_or(self.rest().len());
        self.pos += len;
        (start, &self.text[start..self.pos])
    }
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

impl FromStr for ExpertSpec {
    type Err = SpecParseError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cur = Cursor { text, pos: 0 };
        let (kind_at, kind) = cur.take_while(is_ident);
        let kind = match kind {
            "nb" | "naive_bayes" => ExpertKind::NaiveBayes,
            "ctx" | "context" => ExpertKind::Context,
            "ext" | "external" => ExpertKind::External,
            "uniform" => ExpertKind::Uniform,
            "" => return Err(cur.error(kind_at, "expected an expert kind")),
            other => return Err(cur.error(kind_at, format!("unknown expert kind {other:?}"))),
        };

        let mut alpha = None;
        let mut window = None;
        let mut order = None;
        let mut endpoint = None;
        let mut max_context = None;

        while !cur.rest().is_empty() {
            let sep_at = cur.pos;
            if !cur.rest().starts_with([':', ',']) {
                return Err(cur.error(sep_at, "expected ':' or ',' before the next key"));
            }
            cur.pos += 1;
            let (key_at, key) = cur.take_while(is_ident);
            if key.is_empty() {
                return Err(cur.error(key_at, "expected a key"));
            }
            if !cur.rest().starts_with('=') {
                return Err(cur.error(cur.pos, format!("expected '=' after {key:?}")));
            }
            cur.pos += 1;
            let (value_at, value) = if key == "endpoint" {
                cur.take_while(|c| c != ',')
            } else {
                cur.take_while(|c| c != ',' && c != ':')
            };
            if value.is_empty() {
                return Err(cur.error(value_at, format!("empty value for {key:?}")));
            }
            let bad = |what: &str| cur.error(value_at, format!("{key}: {what}, got {value:?}"));
            match (kind, key) {
                (ExpertKind::NaiveBayes | ExpertKind::Context, "alpha") => {
                    let a: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                    if !(a.is_finite() && a > 0.0) {
                        return Err(bad("must be a positive finite number"));
                    }
                    set_once(&mut alpha, a, || cur.error(key_at, "duplicate key alpha"))?;
                }
                (ExpertKind::NaiveBayes, "window") => {
                    let w = match value {
                        "none" | "inf" | "unbounded" => None,
                        v => {
                            let w: u32 = v.parse().map_err(|_| bad("expected a positive integer"))?;
                            if w == 0 {
                                return Err(bad("must be at least 1"));
                            }
                            Some(w)
                        }
                    };
                    set_once(&mut window, w, || cur.error(key_at, "duplicate key window"))?;
                }
                (ExpertKind::Context, "order") => {
                    let o: u32 = value.parse().map_err(|_| bad("expected an integer"))?;
                    if o as usize > MAX_CONTEXT_ORDER {
                        return Err(bad(&format!("exceeds the cap of {MAX_CONTEXT_ORDER}")));
                    }
                    set_once(&mut order, o, || cur.error(key_at, "duplicate key order"))?;
                }
                (ExpertKind::External, "endpoint") => {
                    set_once(&mut endpoint, value.to_string(), || {
                        cur.error(key_at, "duplicate key endpoint")
                    })?;
                }
                (ExpertKind::External, "context") => {
                    let c: u32 = value.parse().map_err(|_| bad("expected a positive integer"))?;
                    if c == 0 {
                        return Err(bad("must be at least 1"));
                    }
                    set_once(&mut max_context, c, || cur.error(key_at, "duplicate key context"))?;
                }
                _ => return Err(cur.error(key_at, format!("unknown key {key:?} for kind {kind}"))),
            }
        }

        Ok(match kind {
            ExpertKind::Uniform => ExpertSpec::Uniform,
            ExpertKind::NaiveBayes => ExpertSpec::NaiveBayes {
                alpha: alpha.unwrap_or(DEFAULT_NB_ALPHA),
                window: window.flatten(),
            },
            ExpertKind::Context => ExpertSpec::Context {
                order: order.unwrap_or(DEFAULT_CTX_ORDER),
                alpha: alpha.unwrap_or(DEFAULT_CTX_ALPHA),
            },
            ExpertKind::External => ExpertSpec::External { endpoint, max_context },
        })
    }
}

fn set_once<T>(slot: &mut Option<T>, value: T, dup: impl FnOnce() -> SpecParseError) -> Result<(), SpecParseError> {
    if slot.is_some() {
        return Err(dup());
    }
    *slot = Some(value);
    Ok(())
}

impl fmt::Display for ExpertSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertSpec::Uniform => f.write_str("uniform"),
            ExpertSpec::NaiveBayes { alpha, window } => {
                write!(f, "nb:alpha={alpha:?}")?;
                if let Some(w) = window {
                    write!(f, ",window={w}")?;
                }
                Ok(())
            }
            ExpertSpec::Context { order, alpha } => write!(f, "ctx:order={order},alpha={alpha:?}"),
            ExpertSpec::External { endpoint, max_context } => {
                f.write_str("ext")?;
                let mut sep = ':';
                if let Some(c) = max_context {
                    write!(f, "{sep}context={c}")?;
                    sep = ',';
                }
                if let Some(e) = endpoint {
                    write!(f, "{sep}endpoint={e}")?;
                }
                Ok(())
            }
        }
    }
}
