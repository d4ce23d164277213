//! Plain-text architecture files.
//!
//! ```text
//! # comment
//! input_len = 784
//! n_classes = 11
//!
//! [block]
//! filters = 110
//! kernel = 4
//! stride = 2
//! padding = valid        # valid | same
//! pool_kind = avg        # none | max | avg
//! pool_size = 3          # required unless pool_kind = none
//! pool_stride = 2        # optional, defaults to pool_size
//! pool_padding = same    # optional, defaults to same
//! dropout = 0            # optional, 0 disables
//! ```
//!
//! Top-level keys must precede the first `[block]`. Blocks appear in network order.

use std::fmt::Write as _;

use thiserror::Error;

use super::{Architecture, BlockSpec, Padding, PoolKind, PoolSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {field}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

fn err(line: usize, field: &str, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

pub fn serialize_arch(arch: &Architecture) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "input_len = {}", arch.input_len);
    if arch.input_channels != 1 {
        let _ = writeln!(s, "input_channels = {}", arch.input_channels);
    }
    let _ = writeln!(s, "n_classes = {}", arch.n_classes);
    for b in &arch.blocks {
        let _ = writeln!(s, "\n[block]");
        let _ = writeln!(s, "filters = {}", b.filters);
        let _ = writeln!(s, "kernel = {}", b.kernel);
        let _ = writeln!(s, "stride = {}", b.stride);
        let _ = writeln!(s, "padding = {}", b.padding.as_str());
        match &b.pool {
            None => {
                let _ = writeln!(s, "pool_kind = none");
            }
            Some(p) => {
                let _ = writeln!(s, "pool_kind = {}", p.kind.as_str());
                let _ = writeln!(s, "pool_size = {}", p.size);
                let _ = writeln!(s, "pool_stride = {}", p.stride);
                let _ = writeln!(s, "pool_padding = {}", p.padding.as_str());
            }
        }
        let _ = writeln!(s, "dropout = {}", b.dropout);
    }
    s
}

#[derive(Default)]
struct PendingBlock {
    line: usize,
    filters: Option<u32>,
    kernel: Option<u32>,
    stride: Option<u32>,
    padding: Option<Padding>,
    pool_kind: Option<Option<PoolKind>>,
    pool_size: Option<u32>,
    pool_stride: Option<u32>,
    pool_padding: Option<Padding>,
    dropout: Option<f64>,
}

impl PendingBlock {
    fn finish(self, strict: bool) -> Result<BlockSpec, ParseError> {
        let line = self.line;
        let need = |v: Option<u32>, f: &str| v.ok_or_else(|| err(line, f, "missing in block"));
        let pool = match self.pool_kind.unwrap_or(None) {
            None => None,
            Some(kind) => {
                let size = need(self.pool_size, "pool_size")?;
                Some(PoolSpec {
                    kind,
                    size,
                    stride: self.pool_stride.unwrap_or(size),
                    padding: self.pool_padding.unwrap_or(Padding::Same),
                })
            }
        };
        let block = BlockSpec {
            filters: need(self.filters, "filters")?,
            kernel: need(self.kernel, "kernel")?,
            stride: need(self.stride, "stride")?,
            padding: self.padding.ok_or_else(|| err(line, "padding", "missing in block"))?,
            pool,
            dropout: self.dropout.unwrap_or(0.0),
        };
        let check = if strict {
            block.validate()
        } else {
            block.validate_structural()
        };
        check.map_err(|m| err(line, "block", m))?;
        Ok(block)
    }
}

fn parse_padding(line: usize, field: &str, v: &str) -> Result<Padding, ParseError> {
    match v {
        "valid" => Ok(Padding::Valid),
        "same" => Ok(Padding::Same),
        _ => Err(err(line, field, format!("expected valid|same, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, field: &str, v: &str) -> Result<T, ParseError> {
    v.parse()
        .map_err(|_| err(line, field, format!("not a valid number: {v:?}")))
}

/// Parses an architecture file. With `strict`, every block must respect the
/// search-space ranges; otherwise only positivity is required.
pub fn parse_arch(text: &str, strict: bool) -> Result<Architecture, ParseError> {
    let mut input_len = None;
    let mut input_channels = None;
    let mut n_classes = None;
    let mut blocks = Vec::new();
    let mut current: Option<PendingBlock> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content != "[block]" {
                return Err(err(line, content, "unknown section"));
            }
            if let Some(b) = current.take() {
                blocks.push(b.finish(strict)?);
            }
            current = Some(PendingBlock {
                line,
                ..Default::default()
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, content, "expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        match current.as_mut() {
            None => match key {
                "input_len" => input_len = Some(parse_num::<usize>(line, key, value)?),
                "input_channels" => input_channels = Some(parse_num::<usize>(line, key, value)?),
                "n_classes" => n_classes = Some(parse_num::<usize>(line, key, value)?),
                _ => return Err(err(line, key, "unknown top-level key")),
            },
            Some(b) => match key {
                "filters" => b.filters = Some(parse_num(line, key, value)?),
                "kernel" => b.kernel = Some(parse_num(line, key, value)?),
                "stride" => b.stride = Some(parse_num(line, key, value)?),
                "padding" => b.padding = Some(parse_padding(line, key, value)?),
                "pool_kind" => {
                    b.pool_kind = Some(match value {
                        "none" => None,
                        "max" => Some(PoolKind::Max),
                        "avg" => Some(PoolKind::Avg),
                        _ => return Err(err(line, key, format!("expected none|max|avg, got {value:?}"))),
                    })
                }
                "pool_size" => b.pool_size = Some(parse_num(line, key, value)?),
                "pool_stride" => b.pool_stride = Some(parse_num(line, key, value)?),
                "pool_padding" => b.pool_padding = Some(parse_padding(line, key, value)?),
                "dropout" => b.dropout = Some(parse_num(line, key, value)?),
                _ => return Err(err(line, key, "unknown block key")),
            },
        }
    }
    if let Some(b) = current.take() {
        blocks.push(b.finish(strict)?);
    }
    let last = text.lines().count();
    let input_len = input_len.ok_or_else(|| err(last, "input_len", "missing"))?;
    let n_classes = n_classes.ok_or_else(|| err(last, "n_classes", "missing"))?;
    if input_len == 0 || n_classes == 0 {
        return Err(err(last, "input_len/n_classes", "must be positive"));
    }
    if strict && blocks.len() > super::MAX_DEPTH {
        return Err(err(last, "block", format!("more than {} blocks", super::MAX_DEPTH)));
    }
    Ok(Architecture {
        input_len,
        input_channels: input_channels.unwrap_or(1),
        blocks,
        n_classes,
    })
}
