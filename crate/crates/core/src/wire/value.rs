//! Marshaled argument and result values.

use std::fmt;

use crate::error::{ComError, Result};
use crate::guid::Guid;

/// Deepest allowed list nesting; a top-level list counts as depth 1.
pub const MAX_DEPTH: usize = 8;
/// Largest string or byte blob carried in one value.
pub const MAX_BLOB: usize = 1 << 20;

const TAG_NULL: u8 = 0;
const TAG_BOOL: u8 = 1;
const TAG_I64: u8 = 2;
const TAG_F64: u8 = 3;
const TAG_STR: u8 = 4;
const TAG_BYTES: u8 = 5;
const TAG_GUID: u8 = 6;
const TAG_LIST: u8 = 7;

#[derive(Debug, Clone)]
pub enum WireValue {
    Null,
    Bool(bool),
    I64(i64),
    F64(f64),
    Str(String),
    Bytes(Vec<u8>),
    Guid(Guid),
    List(Vec<WireValue>),
}

/// Floats compare by bit pattern so that NaN payloads round-trip as equal.
impl PartialEq for WireValue {
    fn eq(&self, other: &Self) -> bool {
        use WireValue::*;
        match (self, other) {
            (Null, Null) => true,
            (Bool(a), Bool(b)) => a == b,
            (I64(a), I64(b)) => a == b,
            (F64(a), F64(b)) => a.to_bits() == b.to_bits(),
            (Str(a), Str(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (Guid(a), Guid(b)) => a == b,
            (List(a), List(b)) => a == b,
            _ => false,
        }
    }
}

impl WireValue {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            WireValue::I64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_guid(&self) -> Option<Guid> {
        match self {
            WireValue::Guid(g) => Some(*g),
            _ => None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        self.encode_at(out, 0)
    }

    fn encode_at(&self, out: &mut Vec<u8>, depth: usize) -> Result<()> {
        match self {
            WireValue::Null => out.push(TAG_NULL),
            WireValue::Bool(b) => {
                out.push(TAG_BOOL);
                out.push(*b as u8);
            }
            WireValue::I64(v) => {
                out.push(TAG_I64);
                out.extend_from_slice(&v.to_be_bytes());
            }
            WireValue::F64(v) => {
                out.push(TAG_F64);
                out.extend_from_slice(&v.to_bits().to_be_bytes());
            }
            WireValue::Str(s) => encode_blob(out, TAG_STR, s.as_bytes())?,
            WireValue::Bytes(b) => encode_blob(out, TAG_BYTES, b)?,
            WireValue::Guid(g) => {
                out.push(TAG_GUID);
                out.extend_from_slice(g.as_bytes());
            }
            WireValue::List(items) => {
                if depth + 1 > MAX_DEPTH {
                    return Err(ComError::ProtocolError("list nesting too deep".into()));
                }
                let count = u16::try_from(items.len())
                    .map_err(|_| ComError::ProtocolError("list too long".into()))?;
                out.push(TAG_LIST);
                out.extend_from_slice(&count.to_be_bytes());
                for item in items {
                    item.encode_at(out, depth + 1)?;
                }
            }
        }
        Ok(())
    }

    /// Decodes exactly one value occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<WireValue> {
        let mut reader = Reader::new(bytes);
        let v = reader.value()?;
        reader.finish()?;
        Ok(v)
    }
}

fn encode_blob(out: &mut Vec<u8>, tag: u8, raw: &[u8]) -> Result<()> {
    if raw.len() > MAX_BLOB {
        return Err(ComError::ProtocolError(format!(
            "blob of {} bytes exceeds limit",
            raw.len()
        )));
    }
    out.push(tag);
    out.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    out.extend_from_slice(raw);
    Ok(())
}

/// Big-endian cursor over a payload.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ComError::ProtocolError("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn guid(&mut self) -> Result<Guid> {
        Ok(Guid::from_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub(crate) fn value(&mut self) -> Result<WireValue> {
        self.value_at(0)
    }

    fn value_at(&mut self, depth: usize) -> Result<WireValue> {
        Ok(match self.u8()? {
            TAG_NULL => WireValue::Null,
            TAG_BOOL => match self.u8()? {
                0 => WireValue::Bool(false),
                1 => WireValue::Bool(true),
                b => return Err(ComError::ProtocolError(format!("bad bool byte {b}"))),
            },
            TAG_I64 => WireValue::I64(self.u64()? as i64),
            TAG_F64 => WireValue::F64(f64::from_bits(self.u64()?)),
            TAG_STR => {
                let raw = self.blob()?;
                let s = std::str::from_utf8(raw)
                    .map_err(|_| ComError::ProtocolError("string is not UTF-8".into()))?;
                WireValue::Str(s.to_owned())
            }
            TAG_BYTES => WireValue::Bytes(self.blob()?.to_vec()),
            TAG_GUID => WireValue::Guid(self.guid()?),
            TAG_LIST => {
                if depth + 1 > MAX_DEPTH {
                    return Err(ComError::ProtocolError("list nesting too deep".into()));
                }
                let count = self.u16()? as usize;
                let mut items = Vec::with_capacity(count.min(64));
                for _ in 0..count {
                    items.push(self.value_at(depth + 1)?);
                }
                WireValue::List(items)
            }
            tag => return Err(ComError::ProtocolError(format!("unknown value tag {tag}"))),
        })
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        if len > MAX_BLOB {
            return Err(ComError::ProtocolError(format!(
                "blob of {len} bytes exceeds limit"
            )));
        }
        self.take(len)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(ComError::ProtocolError(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Canonical text rendering: `null`, `bool:true`, `i64:N`, `f64:X`,
/// `str:"..."`, `bytes:<hex>`, `guid:{...}`, `list:[a,b]`.
impl fmt::Display for WireValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireValue::Null => f.write_str("null"),
            WireValue::Bool(b) => write!(f, "bool:{b}"),
            WireValue::I64(v) => write!(f, "i64:{v}"),
            // Debug formatting is the shortest representation that round-trips.
            WireValue::F64(v) => write!(f, "f64:{v:?}"),
            WireValue::Str(s) => write!(f, "str:{s:?}"),
            WireValue::Bytes(b) => {
                f.write_str("bytes:")?;
                b.iter().try_for_each(|x| write!(f, "{x:02x}"))
            }
            WireValue::Guid(g) => write!(f, "guid:{g}"),
            WireValue::List(items) => {
                f.write_str("list:[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

/// Parses a comma-separated sequence of values in canonical text form. Bare
/// integers are accepted as `i64`, bare `true`/`false` as booleans.
pub fn parse_value_list(text: &str) -> Result<Vec<WireValue>> {
    let mut p = TextParser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    if p.at_end() {
        return Ok(Vec::new());
    }
    let items = p.sequence(None, 0)?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.error("trailing input"));
    }
    Ok(items)
}

pub fn parse_value(text: &str) -> Result<WireValue> {
    let mut items = parse_value_list(text)?;
    if items.len() != 1 {
        return Err(ComError::ComponentError(format!(
            "expected exactly one value in {text:?}"
        )));
    }
    Ok(items.remove(0))
}

struct TextParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl TextParser<'_> {
    fn error(&self, what: &str) -> ComError {
        ComError::ComponentError(format!("bad value text at offset {}: {what}", self.pos))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, prefix: &str) -> bool {
        if self.src[self.pos..].starts_with(prefix.as_bytes()) {
            self.pos += prefix.len();
            true
        } else {
            false
        }
    }

    fn sequence(&mut self, close: Option<u8>, depth: usize) -> Result<Vec<WireValue>> {
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if close.is_some() && self.peek() == close && items.is_empty() {
                break;
            }
            items.push(self.value(depth)?);
            self.skip_ws();
            if self.peek() == Some(b',') {
                self.pos += 1;
                continue;
            }
            break;
        }
        if let Some(c) = close {
            if self.peek() != Some(c) {
                return Err(self.error("unterminated list"));
            }
            self.pos += 1;
        }
        Ok(items)
    }

    /// Consumes up to the next separator at this nesting level.
    fn token(&mut self) -> &str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == b',' || c == b']' || c == b' ' || c == b'\t' {
                break;
            }
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("")
    }

    fn value(&mut self, depth: usize) -> Result<WireValue> {
        if self.eat("null") {
            return Ok(WireValue::Null);
        }
        if self.eat("list:[") {
            if depth + 1 > MAX_DEPTH {
                return Err(self.error("list nesting too deep"));
            }
            return Ok(WireValue::List(self.sequence(Some(b']'), depth + 1)?));
        }
        if self.eat("str:") {
            return self.quoted().map(WireValue::Str);
        }
        if self.eat("bool:") {
            return match self.token() {
                "true" => Ok(WireValue::Bool(true)),
                "false" => Ok(WireValue::Bool(false)),
                _ => Err(self.error("bad bool")),
            };
        }
        if self.eat("i64:") {
            let t = self.token().to_owned();
            return t
                .parse()
                .map(WireValue::I64)
                .map_err(|_| self.error("bad i64"));
        }
        if self.eat("f64:") {
            let t = self.token().to_owned();
            return t
                .parse()
                .map(WireValue::F64)
                .map_err(|_| self.error("bad f64"));
        }
        if self.eat("bytes:") {
            let t = self.token().to_owned();
            if !t.len().is_multiple_of(2) {
                return Err(self.error("odd hex length"));
            }
            let bytes = (0..t.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&t[i..i + 2], 16))
                .collect::<std::result::Result<Vec<u8>, _>>()
                .map_err(|_| self.error("bad hex"))?;
            return Ok(WireValue::Bytes(bytes));
        }
        if self.eat("guid:") {
            let t = self.token().to_owned();
            return Guid::parse(&t).map(WireValue::Guid);
        }
        let t = self.token().to_owned();
        match t.as_str() {
            "true" => Ok(WireValue::Bool(true)),
            "false" => Ok(WireValue::Bool(false)),
            _ => t
                .parse()
                .map(WireValue::I64)
                .map_err(|_| self.error("unrecognized value")),
        }
    }

    /// A double-quoted string using Rust debug escapes.
    fn quoted(&mut self) -> Result<String> {
        if self.peek() != Some(b'"') {
            return Err(self.error("expected '\"'"));
        }
        self.pos += 1;
        let mut out = Vec::new();
        loop {
            let c = self
                .peek()
                .ok_or_else(|| self.error("unterminated string"))?;
            self.pos += 1;
            match c {
                b'"' => break,
                b'\\' => {
                    let e = self.peek().ok_or_else(|| self.error("dangling escape"))?;
                    self.pos += 1;
                    match e {
                        b'n' => out.push(b'\n'),
                        b'r' => out.push(b'\r'),
                        b't' => out.push(b'\t'),
                        b'0' => out.push(0),
                        b'\\' | b'"' | b'\'' => out.push(e),
                        b'u' => {
                            if !self.eat("{") {
                                return Err(self.error("bad unicode escape"));
                            }
                            let start = self.pos;
                            while self.peek().is_some_and(|c| c != b'}') {
                                self.pos += 1;
                            }
                            let hex = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                            self.pos += 1;
                            let ch = u32::from_str_radix(hex, 16)
                                .ok()
                                .and_then(char::from_u32)
                                .ok_or_else(|| self.error("bad unicode escape"))?;
                            let mut buf = [0u8; 4];
                            out.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                        }
                        _ => return Err(self.error("unknown escape")),
                    }
                }
                _ => out.push(c),
            }
        }
        String::from_utf8(out).map_err(|_| self.error("string is not UTF-8"))
    }
}

#[cfg(test)]
pub(crate) mod strategies {
    use super::*;
    use proptest::prelude::*;

    pub fn leaf() -> impl Strategy<Value = WireValue> {
        prop_oneof![
            Just(WireValue::Null),
            any::<bool>().prop_map(WireValue::Bool),
            any::<i64>().prop_map(WireValue::I64),
            any::<f64>().prop_map(WireValue::F64),
            ".{0,12}".prop_map(WireValue::Str),
            proptest::collection::vec(any::<u8>(), 0..16).prop_map(WireValue::Bytes),
            any::<[u8; 16]>().prop_map(|b| WireValue::Guid(Guid::from_bytes(b))),
        ]
    }

    /// Values whose list nesting never exceeds the limit.
    pub fn value() -> impl Strategy<Value = WireValue> {
        leaf().prop_recursive(MAX_DEPTH as u32, 64, 6, |inner| {
            proptest::collection::vec(inner, 0..6).prop_map(WireValue::List)
        })
    }
}
