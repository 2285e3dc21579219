//! Bag tables as text: a header line
//! `#bingo-bags v1 strategy=<s> param=<v> n=<N>` followed by one line per
//! anchor, `anchor<TAB>m1,m2,...`, members ascending.

use std::fmt::Write as _;
use std::path::Path;

use super::{write_atomic, FormatError};
use crate::bagging::{BagStrategy, BagTable};
use crate::error::{Error, Result};

pub const BAG_HEADER: &str = "#bingo-bags v1";

pub fn encode_bags(bags: &BagTable) -> String {
    let s = bags.strategy();
    let mut out = format!(
        "{BAG_HEADER} strategy={} param={} n={}\n",
        s.name(),
        s.param(),
        bags.len()
    );
    for (a, m) in bags.iter().enumerate() {
        let _ = write!(out, "{a}\t");
        for (j, i) in m.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{i}");
        }
        out.push('\n');
    }
    out
}

/// Strict decimal: no sign, no leading zeros except `0` itself.
fn number(s: &str) -> Option<usize> {
    let ok = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if ok {
        s.parse().ok()
    } else {
        None
    }
}

fn field<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str, FormatError> {
    tok.and_then(|t| t.strip_prefix(key)?.strip_prefix('='))
        .ok_or_else(|| FormatError::Header(format!("expected {key}=<value>")))
}

pub fn decode_bags(text: &str) -> Result<BagTable> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let rest = header
        .strip_prefix(BAG_HEADER)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| FormatError::Header(format!("missing `{BAG_HEADER}` prefix")))?;
    let mut toks = rest.split(' ');
    let name = field(toks.next(), "strategy")?;
    let param = number(field(toks.next(), "param")?).ok_or_else(|| FormatError::Header("bad param".into()))?;
    let n = number(field(toks.next(), "n")?).ok_or_else(|| FormatError::Header("bad n".into()))?;
    if toks.next().is_some() {
        return Err(FormatError::Header("unexpected trailing fields".into()).into());
    }
    let strategy = BagStrategy::from_parts(name, param)
        .ok_or_else(|| FormatError::Header(format!("unknown strategy `{name}`")))?;

    let body: Vec<&str> = lines.collect();
    // A well-formed file ends with a newline, leaving one empty tail element.
    if body.last() != Some(&"") {
        return Err(FormatError::Invalid("missing final newline".into()).into());
    }
    let body = &body[..body.len() - 1];
    if body.len() != n {
        return Err(FormatError::Invalid(format!("header says n={n}, found {} bag lines", body.len())).into());
    }
    let mut members = Vec::with_capacity(n);
    for (a, line) in body.iter().enumerate() {
        let bad = |reason: &str| FormatError::Line {
            line: a + 2,
            reason: reason.to_string(),
        };
        let (anchor, list) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        if number(anchor) != Some(a) {
            return Err(bad(&format!("expected anchor {a}")).into());
        }
        let m = list
            .split(',')
            .map(|t| number(t).ok_or_else(|| bad(&format!("bad member `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        members.push(m);
    }
    BagTable::new(strategy, members)
}

pub fn save_bags(bags: &BagTable, path: &Path) -> Result<()> {
    write_atomic(path, encode_bags(bags).as_bytes()).map_err(|e| match e {
        FormatError::Io(io) => Error::io(path, io),
        other => other.into(),
    })
}

pub fn load_bags(path: &Path) -> Result<BagTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| FormatError::Invalid("bag file is not UTF-8".into()))?;
    decode_bags(&text)
}
