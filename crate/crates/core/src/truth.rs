//! Rule-based annotation of real CLF / ELF access logs.
//!
//! The parser walks the line once from left to right. Every span is bounded
//! by a fixed delimiter (space, bracket or quote), except the user agent,
//! which runs to the last double quote of the record so that it may contain
//! quotes of its own.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field_forge::{AnnotatedRecord, FieldKind, SEPARATOR_SYMBOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnownFormat {
    Clf,
    Elf,
    QuotedElf,
}

impl FromStr for KnownFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clf" => Ok(KnownFormat::Clf),
            "elf" => Ok(KnownFormat::Elf),
            "quoted-elf" | "quotedelf" => Ok(KnownFormat::QuotedElf),
            _ => Err(format!("unknown format `{s}` (expected clf, elf or quoted-elf)")),
        }
    }
}

impl fmt::Display for KnownFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnownFormat::Clf => "clf",
            KnownFormat::Elf => "elf",
            KnownFormat::QuotedElf => "quoted-elf",
        })
    }
}

/// Structural mismatch at character `index` (0-based, in characters).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at character {index}: {reason}")]
pub struct ParseError {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum TruthError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("writing rejects report: {0}")]
    Csv(#[from] csv::Error),
}

struct Cursor<'a> {
    chars: &'a [char],
    pos: usize,
    /// offset of `chars[0]` in the original line, for error positions
    base: usize,
    ann: String,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, at: usize, reason: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { index: self.base + at, reason: reason.into() })
    }

    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn separator(&mut self, next: FieldKind) -> Result<(), ParseError> {
        match self.chars.get(self.pos) {
            Some(' ') => {
                self.ann.push(SEPARATOR_SYMBOL);
                self.pos += 1;
                Ok(())
            }
            Some(_) => self.err(self.pos, format!("expected a space before field `{next}`")),
            None => self.err(self.pos, format!("line ends before field `{next}`")),
        }
    }

    fn fill(&mut self, kind: FieldKind, n: usize) {
        self.ann.extend(std::iter::repeat_n(kind.symbol(), n));
        self.pos += n;
    }

    /// A space-delimited token; returns its text.
    fn token(&mut self, kind: FieldKind) -> Result<String, ParseError> {
        let start = self.pos;
        let len = self.chars[start..].iter().take_while(|&&c| c != ' ').count();
        if len == 0 {
            return self.err(start, format!("empty `{kind}` token"));
        }
        self.fill(kind, len);
        Ok(self.chars[start..start + len].iter().collect())
    }

    fn literal(&mut self, c: char) -> Result<(), ParseError> {
        if self.chars.get(self.pos) == Some(&c) {
            self.ann.push(c);
            self.pos += 1;
            Ok(())
        } else {
            self.err(self.pos, format!("expected `{c}`"))
        }
    }

    /// `open` content `close`, where content runs to the first `close`.
    fn delimited(&mut self, kind: FieldKind, open: char, close: char) -> Result<(), ParseError> {
        let start = self.pos;
        self.literal(open)?;
        match self.chars[self.pos..].iter().position(|&c| c == close) {
            Some(len) => {
                self.fill(kind, len);
                self.literal(close)
            }
            None => self.err(start, format!("unterminated `{kind}` field opened here")),
        }
    }

    /// A quoted span closed by the last `"` of the input.
    fn quoted_tail(&mut self, kind: FieldKind) -> Result<(), ParseError> {
        let start = self.pos;
        self.literal('"')?;
        let last = self.chars.iter().rposition(|&c| c == '"').filter(|&i| i >= self.pos);
        match last {
            Some(end) => {
                self.fill(kind, end - self.pos);
                self.literal('"')?;
                if !self.at_end() {
                    return self.err(self.pos, "unexpected characters after the user agent");
                }
                Ok(())
            }
            None => self.err(start, format!("unterminated `{kind}` field opened here")),
        }
    }
}

fn parse_common(chars: &[char], base: usize, combined: bool) -> Result<String, ParseError> {
    use FieldKind::*;
    let mut cur = Cursor { chars, pos: 0, base, ann: String::with_capacity(chars.len()) };
    cur.token(Host)?;
    cur.separator(LogName)?;
    cur.token(LogName)?;
    cur.separator(User)?;
    cur.token(User)?;
    cur.separator(Time)?;
    cur.delimited(Time, '[', ']')?;
    cur.separator(Request)?;
    cur.delimited(Request, '"', '"')?;
    cur.separator(Status)?;
    let start = cur.pos;
    let status = cur.token(Status)?;
    if status.chars().count() != 3 || !status.chars().all(|c| c.is_ascii_digit()) {
        return cur.err(start, format!("status `{status}` is not three digits"));
    }
    cur.separator(Bytes)?;
    let start = cur.pos;
    let bytes = cur.token(Bytes)?;
    if bytes != "-" && !bytes.chars().all(|c| c.is_ascii_digit()) {
        return cur.err(start, format!("byte count `{bytes}` is neither digits nor `-`"));
    }
    if combined {
        cur.separator(Referrer)?;
        cur.delimited(Referrer, '"', '"')?;
        cur.separator(UserAgent)?;
        cur.quoted_tail(UserAgent)?;
    } else if !cur.at_end() {
        return cur.err(cur.pos, "unexpected characters after the byte count");
    }
    Ok(cur.ann)
}

/// Annotates one log line of a known format.
pub fn annotate_line(line: &str, format: KnownFormat) -> Result<AnnotatedRecord, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    if let Some(i) = chars.iter().position(|&c| c == '\n' || c == '\r') {
        return Err(ParseError { index: i, reason: "line break inside the record".into() });
    }
    let ann = match format {
        KnownFormat::Clf => parse_common(&chars, 0, false)?,
        KnownFormat::Elf => parse_common(&chars, 0, true)?,
        KnownFormat::QuotedElf => {
            if chars.first() != Some(&'"') {
                return Err(ParseError { index: 0, reason: "expected an opening `\"`".into() });
            }
            if chars.len() < 2 || chars.last() != Some(&'"') {
                return Err(ParseError {
                    index: chars.len().saturating_sub(1),
                    reason: "expected a closing `\"`".into(),
                });
            }
            let inner = parse_common(&chars[1..chars.len() - 1], 1, true)?;
            format!("\"{inner}\"")
        }
    };
    Ok(AnnotatedRecord { raw: line.to_string(), ann })
}

/// A line that could not be annotated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the input file.
    pub line_number: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Annotated {
    pub records: Vec<AnnotatedRecord>,
    pub rejects: Vec<Reject>,
}

/// Annotates every line of `text`. Lines that fail to parse become rejects.
pub fn annotate_bytes(bytes: &[u8], format: KnownFormat) -> Annotated {
    let mut out = Annotated::default();
    if bytes.is_empty() {
        return out;
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    for (i, line) in body.split(|&b| b == b'\n').enumerate() {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let result = std::str::from_utf8(line)
            .map_err(|e| format!("invalid UTF-8 at byte {}", e.valid_up_to()))
            .and_then(|s| annotate_line(s, format).map_err(|e| e.to_string()));
        match result {
            Ok(record) => out.records.push(record),
            Err(reason) => out.rejects.push(Reject { line_number: i + 1, reason }),
        }
    }
    out
}

pub fn annotate_file(path: &Path, format: KnownFormat) -> Result<Annotated, TruthError> {
    let bytes = fs::read(path).map_err(|source| TruthError::Io { path: path.to_path_buf(), source })?;
    Ok(annotate_bytes(&bytes, format))
}

/// Writes the rejects report as CSV with a `line_number,reason` header.
pub fn write_rejects(rejects: &[Reject], path: &Path) -> Result<(), TruthError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["line_number", "reason"])?;
    for r in rejects {
        w.write_record([r.line_number.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|source| TruthError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG3_RAW: &str = "192.168.4.25 - - [22/Dec/2016:16:11:41 +0300] \"POST /DVWA/login.php HTTP/1.1\" 200 1532 \"-\" \"Mozilla/4.0 (compatible; MSIE 8.0; Windows NT 6.1; Trident/4.0; w3af.sf.net\"";
    const FIG3_ANN_PREFIX: &str =
        "hhhhhhhhhhhh_l_u_[tttttttttttttttttttttttttt]_\"rrrrrrrrrrrrrrrrrrrrrrrrrrrrr\"_sss_bbbb_\"R\"_\"";

    #[test]
    fn example_elf_line() {
        let rec = annotate_line(FIG3_RAW, KnownFormat::Elf).unwrap();
        assert!(rec.ann.starts_with(FIG3_ANN_PREFIX));
        let tail = &rec.ann[FIG3_ANN_PREFIX.len()..];
        assert_eq!(tail, format!("{}\"", "i".repeat(75)));
        assert_eq!(rec.ann.chars().count(), FIG3_RAW.chars().count());
    }

    #[test]
    fn malformed_line_is_rejected() {
        let err = annotate_line("hello world", KnownFormat::Clf).unwrap_err();
        assert_eq!(err.index, 11);
        let err = annotate_line("1.2.3.4 - - 10/Jul/2020 \"GET / HTTP/1.0\" 200 5", KnownFormat::Clf).unwrap_err();
        assert_eq!(err.index, 12);
        assert!(err.reason.contains('['));
    }

    #[test]
    fn clf_line_and_trailing_garbage() {
        let line = "1.2.3.4 - bob [10/Jul/2020:01:02:03 +0000] \"GET / HTTP/1.0\" 404 -";
        let rec = annotate_line(line, KnownFormat::Clf).unwrap();
        assert_eq!(
            rec.ann,
            "hhhhhhh_l_uuu_[tttttttttttttttttttttttttt]_\"rrrrrrrrrrrrrr\"_sss_b"
        );
        let err = annotate_line(&format!("{line} x"), KnownFormat::Clf).unwrap_err();
        assert_eq!(err.index, line.len());
    }

    #[test]
    fn status_must_be_three_digits() {
        let line = "1.2.3.4 - - [10/Jul/2020:01:02:03 +0000] \"GET / HTTP/1.0\" 20x 5";
        let err = annotate_line(line, KnownFormat::Clf).unwrap_err();
        assert_eq!(err.index, line.find("20x").unwrap());
    }

    #[test]
    fn user_agent_may_hold_quotes() {
        let line = "::1 - - [10/Jul/2020:01:02:03 +0000] \"GET / HTTP/1.0\" 200 5 \"-\" \"a \"b\" c\"";
        let rec = annotate_line(line, KnownFormat::Elf).unwrap();
        assert!(rec.ann.ends_with("_\"iiiiiii\""));
    }

    #[test]
    fn quoted_elf() {
        let inner = FIG3_RAW;
        let rec = annotate_line(&format!("\"{inner}\""), KnownFormat::QuotedElf).unwrap();
        assert!(rec.ann.starts_with("\"hhh") && rec.ann.ends_with("i\"\""));
        let err = annotate_line(inner, KnownFormat::QuotedElf).unwrap_err();
        assert_eq!(err.index, 0);
        // index offsets account for the outer quote
        let err = annotate_line("\"1.2.3.4\"", KnownFormat::QuotedElf).unwrap_err();
        assert_eq!(err.index, 8);
    }

    #[test]
    fn annotate_bytes_collects_rejects() {
        let good = "1.2.3.4 - - [10/Jul/2020:01:02:03 +0000] \"GET / HTTP/1.0\" 200 5";
        let text = format!("{good}\r\ngarbage\n{good}\n");
        let out = annotate_bytes(text.as_bytes(), KnownFormat::Clf);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line_number, 2);
        let out = annotate_bytes(&[0xff, 0xfe, b'\n', 0x00], KnownFormat::Elf);
        assert_eq!(out.records.len(), 0);
        assert_eq!(out.rejects.len(), 2);
    }
}
