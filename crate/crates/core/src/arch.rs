//! Compact architecture strings.
//!
//! ```text
//! arch     := item ( '-' item )*
//! item     := group | layer
//! group    := '{' arch '}' '*' N
//! layer    := conv | 'BN' | neuron | block | pool | fc | 'DP'
//! conv     := 'c' N 'k' N 's' N                 channels, kernel, stride
//! neuron   := 'IF' | 'LIF' | 'PLIF'
//! block    := ('SEW' | 'Basic' | 'Plain') ' Block' [ '(' arg ( ',' arg )* ')' ]
//! arg      := 'c' N | 'f' N | 's' N | 'ADD' | 'AND' | 'IAND'
//! pool     := ('MP' | 'AP') 'k' N 's' N
//! fc       := 'FC' N
//! ```
//!
//! Whitespace around tokens is ignored. An architecture starts with a conv or
//! FC stem and ends with an FC classifier. A block inherits the current width
//! unless `cN` (conv form) or `fN` (dense form) is given; changing width or
//! striding requires an explicit `sN`, which makes it a downsample block.
//! Blocks use the most recent neuron token's model.
//!
//! Example: `c32k3s1-BN-PLIF-{SEW Block (c32)-MPk2s2}*7-FC11`.

use std::fmt;

use crate::block::ElementWise;
use crate::neuron::NeuronKind;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("architecture error at position {position}: {message}")]
pub struct ArchError {
    pub position: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockToken {
    Sew,
    Basic,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Width {
    Channels(usize),
    Features(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchToken {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm,
    Neuron(NeuronKind),
    Block {
        kind: BlockToken,
        width: Option<Width>,
        stride: Option<usize>,
        g: Option<ElementWise>,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Fc(usize),
    Dropout,
}

#[derive(Clone, Debug)]
pub enum ArchItem {
    Layer {
        token: ArchToken,
        pos: usize,
    },
    Group {
        items: Vec<ArchItem>,
        repeat: usize,
        pos: usize,
    },
}

// Positions are ignored so that a canonical re-parse compares equal.
impl PartialEq for ArchItem {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ArchItem::Layer { token: a, .. }, ArchItem::Layer { token: b, .. }) => a == b,
            (
                ArchItem::Group {
                    items: a,
                    repeat: ra,
                    ..
                },
                ArchItem::Group {
                    items: b,
                    repeat: rb,
                    ..
                },
            ) => ra == rb && a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub items: Vec<ArchItem>,
}

impl Architecture {
    /// Tokens with repeat groups expanded, paired with their source position.
    pub fn expanded(&self) -> Vec<(ArchToken, usize)> {
        fn walk(items: &[ArchItem], out: &mut Vec<(ArchToken, usize)>) {
            for item in items {
                match item {
                    ArchItem::Layer { token, pos } => out.push((*token, *pos)),
                    ArchItem::Group { items, repeat, .. } => {
                        for _ in 0..*repeat {
                            walk(items, out);
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.items, &mut out);
        out
    }

    pub fn tokens(&self) -> Vec<ArchToken> {
        self.expanded().into_iter().map(|(t, _)| t).collect()
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ArchToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchToken::Conv {
                channels,
                kernel,
                stride,
            } => write!(f, "c{channels}k{kernel}s{stride}"),
            ArchToken::BatchNorm => f.write_str("BN"),
            ArchToken::Neuron(k) => write!(f, "{k}"),
            ArchToken::Block {
                kind,
                width,
                stride,
                g,
            } => {
                f.write_str(match kind {
                    BlockToken::Sew => "SEW Block",
                    BlockToken::Basic => "Basic Block",
                    BlockToken::Plain => "Plain Block",
                })?;
                let mut args = Vec::new();
                match width {
                    Some(Width::Channels(c)) => args.push(format!("c{c}")),
                    Some(Width::Features(n)) => args.push(format!("f{n}")),
                    None => {}
                }
                if let Some(s) = stride {
                    args.push(format!("s{s}"));
                }
                if let Some(g) = g {
                    args.push(g.to_string());
                }
                if !args.is_empty() {
                    write!(f, " ({})", args.join(", "))?;
                }
                Ok(())
            }
            ArchToken::MaxPool { kernel, stride } => write!(f, "MPk{kernel}s{stride}"),
            ArchToken::AvgPool { kernel, stride } => write!(f, "APk{kernel}s{stride}"),
            ArchToken::Fc(n) => write!(f, "FC{n}"),
            ArchToken::Dropout => f.write_str("DP"),
        }
    }
}

fn write_items(items: &[ArchItem], f: &mut fmt::Formatter<'_>) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str("-")?;
        }
        match item {
            ArchItem::Layer { token, .. } => write!(f, "{token}")?,
            ArchItem::Group { items, repeat, .. } => {
                f.write_str("{")?;
                write_items(items, f)?;
                write!(f, "}}*{repeat}")?;
            }
        }
    }
    Ok(())
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_items(&self.items, f)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, position: usize, message: impl Into<String>) -> Result<T, ArchError> {
        Err(ArchError {
            position,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> (String, usize) {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() {
                self.pos += 1;
            } else {
                break;
            }
        }
        (self.src[start..self.pos].to_string(), start)
    }

    fn number(&mut self) -> Result<usize, ArchError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits = &self.src[start..self.pos];
        match digits.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            Ok(_) => self.err(start, "count must be at least 1"),
            Err(_) => self.err(start, "expected a number"),
        }
    }

    fn sequence(&mut self, in_group: bool) -> Result<Vec<ArchItem>, ArchError> {
        let mut items = vec![self.item()?];
        loop {
            self.skip_ws();
            match self.peek() {
                Some('-') => {
                    self.pos += 1;
                    items.push(self.item()?);
                }
                Some('}') if in_group => return Ok(items),
                None if !in_group => return Ok(items),
                None => return self.err(self.pos, "unclosed `{`"),
                Some(c) => return self.err(self.pos, format!("unexpected `{c}`")),
            }
        }
    }

    fn item(&mut self) -> Result<ArchItem, ArchError> {
        self.skip_ws();
        let pos = self.pos;
        if self.eat('{') {
            let items = self.sequence(true)?;
            if !self.eat('}') {
                return self.err(self.pos, "expected `}`");
            }
            if !self.eat('*') {
                return self.err(self.pos, "expected `*` and a repeat count after `}`");
            }
            let repeat = self.number()?;
            return Ok(ArchItem::Group { items, repeat, pos });
        }
        let token = self.token()?;
        Ok(ArchItem::Layer { token, pos })
    }

    fn token(&mut self) -> Result<ArchToken, ArchError> {
        let (word, start) = self.ident();
        if word.is_empty() {
            return match self.peek() {
                Some(c) => self.err(start, format!("unexpected `{c}`")),
                None => self.err(start, "unexpected end of input"),
            };
        }
        match word.as_str() {
            "BN" => return Ok(ArchToken::BatchNorm),
            "DP" => return Ok(ArchToken::Dropout),
            "IF" => return Ok(ArchToken::Neuron(NeuronKind::IF)),
            "LIF" => return Ok(ArchToken::Neuron(NeuronKind::LIF)),
            "PLIF" => return Ok(ArchToken::Neuron(NeuronKind::PLIF)),
            "SEW" => return self.block(BlockToken::Sew),
            "Basic" => return self.block(BlockToken::Basic),
            "Plain" => return self.block(BlockToken::Plain),
            _ => {}
        }
        let fields = |prefix: &str, keys: &[char]| -> Option<Vec<usize>> {
            let mut rest = word.strip_prefix(prefix)?;
            if keys.is_empty() {
                return rest.parse().ok().map(|n| vec![n]);
            }
            let mut out = Vec::new();
            for key in keys {
                rest = rest.strip_prefix(*key)?;
                let end = rest
                    .find(|c: char| !c.is_ascii_digit())
                    .unwrap_or(rest.len());
                out.push(rest[..end].parse().ok()?);
                rest = &rest[end..];
            }
            rest.is_empty().then_some(out)
        };
        let token = if let Some(v) = fields("FC", &[]) {
            Some(ArchToken::Fc(v[0]))
        } else if let Some(v) = fields("MP", &['k', 's']) {
            Some(ArchToken::MaxPool {
                kernel: v[0],
                stride: v[1],
            })
        } else if let Some(v) = fields("AP", &['k', 's']) {
            Some(ArchToken::AvgPool {
                kernel: v[0],
                stride: v[1],
            })
        } else { fields("", &['c', 'k', 's']).map(|v| ArchToken::Conv {
                channels: v[0],
                kernel: v[1],
                stride: v[2],
            }) };
        match token {
            Some(t) if token_sizes(&t).iter().all(|&n| n >= 1) => Ok(t),
            Some(_) => self.err(start, format!("`{word}` has a zero size")),
            None => self.err(start, format!("unknown token `{word}`")),
        }
    }

    fn block(&mut self, kind: BlockToken) -> Result<ArchToken, ArchError> {
        let (word, at) = self.ident();
        if word != "Block" {
            return self.err(at, "expected `Block`");
        }
        let (mut width, mut stride, mut g) = (None, None, None);
        if self.eat('(') {
            loop {
                let (arg, at) = self.ident();
                let num = |p: char| {
                    arg.strip_prefix(p)
                        .and_then(|r| r.parse::<usize>().ok())
                        .filter(|&n| n >= 1)
                };
                if let Ok(e) = arg.parse::<ElementWise>() {
                    if kind != BlockToken::Sew {
                        return self.err(at, "only SEW blocks take an element-wise function");
                    }
                    g = Some(e);
                } else if let Some(c) = num('c') {
                    width = Some(Width::Channels(c));
                } else if let Some(n) = num('f') {
                    width = Some(Width::Features(n));
                } else if let Some(s) = num('s') {
                    stride = Some(s);
                } else {
                    return self.err(at, format!("unknown block argument `{arg}`"));
                }
                if self.eat(')') {
                    break;
                }
                if !self.eat(',') {
                    return self.err(self.pos, "expected `,` or `)` in block arguments");
                }
            }
        }
        Ok(ArchToken::Block {
            kind,
            width,
            stride,
            g,
        })
    }
}

fn token_sizes(t: &ArchToken) -> Vec<usize> {
    match *t {
        ArchToken::Conv {
            channels,
            kernel,
            stride,
        } => vec![channels, kernel, stride],
        ArchToken::MaxPool { kernel, stride } | ArchToken::AvgPool { kernel, stride } => {
            vec![kernel, stride]
        }
        ArchToken::Fc(n) => vec![n],
        _ => vec![],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WidthState {
    Unknown,
    Channels(usize),
    Features(usize),
}

/// Checks width bookkeeping across the expanded token stream.
fn check_consistency(arch: &Architecture) -> Result<(), ArchError> {
    let tokens = arch.expanded();
    let err = |position: usize, message: String| Err(ArchError { position, message });
    let Some((first, pos)) = tokens.first() else {
        return err(0, "empty architecture".into());
    };
    if !matches!(first, ArchToken::Conv { .. } | ArchToken::Fc(_)) {
        return err(
            *pos,
            format!("architecture must start with a conv or FC stem, found `{first}`"),
        );
    }
    let mut state = WidthState::Unknown;
    for (token, pos) in &tokens {
        match *token {
            ArchToken::Conv { channels, .. } => {
                if let WidthState::Features(_) = state {
                    return err(*pos, "convolution after a fully-connected layer".into());
                }
                state = WidthState::Channels(channels);
            }
            ArchToken::Fc(n) => state = WidthState::Features(n),
            ArchToken::MaxPool { .. } | ArchToken::AvgPool { .. } => {
                if !matches!(state, WidthState::Channels(_)) {
                    return err(*pos, format!("`{token}` needs a spatial input"));
                }
            }
            ArchToken::Block { width, stride, .. } => {
                let current = match state {
                    WidthState::Channels(c) => Width::Channels(c),
                    WidthState::Features(n) => Width::Features(n),
                    WidthState::Unknown => unreachable!("stem checked above"),
                };
                let target = width.unwrap_or(current);
                let (cur, tgt) = match (current, target) {
                    (Width::Channels(a), Width::Channels(b)) => (a, b),
                    (Width::Features(a), Width::Features(b)) => (a, b),
                    (Width::Channels(_), Width::Features(_)) => {
                        return err(
                            *pos,
                            "dense block after a spatial layer; insert an FC layer first".into(),
                        )
                    }
                    (Width::Features(_), Width::Channels(_)) => {
                        return err(*pos, "conv block after a fully-connected layer".into())
                    }
                };
                if cur != tgt && stride.is_none() {
                    return err(
                        *pos,
                        format!("block width {tgt} does not match its input width {cur}; add `s1`/`s2` to make it a downsample block"),
                    );
                }
                if matches!(target, Width::Features(_)) && stride.is_some_and(|s| s > 1) {
                    return err(*pos, "dense blocks cannot be strided".into());
                }
                state = match target {
                    Width::Channels(c) => WidthState::Channels(c),
                    Width::Features(n) => WidthState::Features(n),
                };
            }
            ArchToken::BatchNorm | ArchToken::Neuron(_) | ArchToken::Dropout => {}
        }
    }
    let (last, pos) = tokens.last().expect("non-empty");
    if !matches!(last, ArchToken::Fc(_)) {
        return err(
            *pos,
            format!("architecture must end with an FC classifier, found `{last}`"),
        );
    }
    Ok(())
}

pub fn parse_arch(s: &str) -> Result<Architecture, ArchError> {
    let mut p = Parser { src: s, pos: 0 };
    p.skip_ws();
    if p.peek().is_none() {
        return p.err(0, "empty architecture");
    }
    let items = p.sequence(false)?;
    let arch = Architecture { items };
    check_consistency(&arch)?;
    Ok(arch)
}
