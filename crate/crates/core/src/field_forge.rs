//! Field value generators for the fifteen supported Apache log fields and
//! rendering of a [`FormatSpec`] plus values into an annotated record.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FormatSpec, Wrapper};

/// Annotation symbol used for inter-field separator spaces.
pub const SEPARATOR_SYMBOL: char = '_';

/// Every symbol that may appear in an annotation string: the fifteen field
/// symbols, the separator and the three literal wrapper characters.
pub const ANNOTATION_ALPHABET: [char; 19] = [
    'h', 'l', 'u', 't', 'r', 's', 'b', 'm', 'U', 'H', 'q', 'v', 'V', 'i', 'R', '_', '"', '[', ']',
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ForgeError {
    #[error("separator has no value grammar")]
    SeparatorValue,
    #[error("format has {fields} fields but {values} values were supplied")]
    Arity { fields: usize, values: usize },
    #[error("value for field `{0}` does not match its slot")]
    KindMismatch(char),
    #[error("value for field `{0}` contains a line break")]
    Newline(char),
    #[error("value for field `{0}` is empty")]
    Empty(char),
    #[error("raw and annotation lengths differ ({raw} vs {ann})")]
    LengthMismatch { raw: usize, ann: usize },
    #[error("annotation symbol {0:?} is not in the annotation alphabet")]
    BadSymbol(char),
}

/// One of the fifteen log fields, or the separator between fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FieldKind {
    Host,
    LogName,
    User,
    Time,
    Request,
    Status,
    Bytes,
    Method,
    UrlPath,
    Protocol,
    Query,
    CanonicalServer,
    Server,
    UserAgent,
    Referrer,
    Separator,
}

impl FieldKind {
    /// The fifteen value-bearing fields, in the order of the field table.
    pub const FIELDS: [FieldKind; 15] = [
        FieldKind::Host,
        FieldKind::LogName,
        FieldKind::User,
        FieldKind::Time,
        FieldKind::Request,
        FieldKind::Status,
        FieldKind::Bytes,
        FieldKind::Method,
        FieldKind::UrlPath,
        FieldKind::Protocol,
        FieldKind::Query,
        FieldKind::CanonicalServer,
        FieldKind::Server,
        FieldKind::UserAgent,
        FieldKind::Referrer,
    ];

    pub const ALL: [FieldKind; 16] = [
        FieldKind::Host,
        FieldKind::LogName,
        FieldKind::User,
        FieldKind::Time,
        FieldKind::Request,
        FieldKind::Status,
        FieldKind::Bytes,
        FieldKind::Method,
        FieldKind::UrlPath,
        FieldKind::Protocol,
        FieldKind::Query,
        FieldKind::CanonicalServer,
        FieldKind::Server,
        FieldKind::UserAgent,
        FieldKind::Referrer,
        FieldKind::Separator,
    ];

    /// Annotation character for this kind.
    pub fn symbol(self) -> char {
        match self {
            FieldKind::Host => 'h',
            FieldKind::LogName => 'l',
            FieldKind::User => 'u',
            FieldKind::Time => 't',
            FieldKind::Request => 'r',
            FieldKind::Status => 's',
            FieldKind::Bytes => 'b',
            FieldKind::Method => 'm',
            FieldKind::UrlPath => 'U',
            FieldKind::Protocol => 'H',
            FieldKind::Query => 'q',
            FieldKind::CanonicalServer => 'v',
            FieldKind::Server => 'V',
            FieldKind::UserAgent => 'i',
            FieldKind::Referrer => 'R',
            FieldKind::Separator => SEPARATOR_SYMBOL,
        }
    }

    pub fn from_symbol(c: char) -> Option<FieldKind> {
        FieldKind::ALL.iter().copied().find(|k| k.symbol() == c)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// A raw log line and its character-aligned annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    pub raw: String,
    pub ann: String,
}

impl AnnotatedRecord {
    /// Builds a record, checking equal character length and the annotation
    /// alphabet.
    pub fn new(raw: impl Into<String>, ann: impl Into<String>) -> Result<Self, ForgeError> {
        let record = AnnotatedRecord {
            raw: raw.into(),
            ann: ann.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        let raw = self.raw.chars().count();
        let ann = self.ann.chars().count();
        if raw != ann {
            return Err(ForgeError::LengthMismatch { raw, ann });
        }
        if self.raw.contains(['\n', '\r']) {
            return Err(ForgeError::Newline('?'));
        }
        if let Some(c) = self.ann.chars().find(|c| !ANNOTATION_ALPHABET.contains(c)) {
            return Err(ForgeError::BadSymbol(c));
        }
        Ok(())
    }

    /// Length in characters (identical for `raw` and `ann`).
    pub fn len(&self) -> usize {
        self.raw.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldValue {
    pub kind: FieldKind,
    pub text: String,
}

impl FieldValue {
    pub fn new(kind: FieldKind, text: impl Into<String>) -> Self {
        FieldValue {
            kind,
            text: text.into(),
        }
    }
}

/// Tunable probabilities for the value grammars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueGrammar {
    /// Chance that the remote user is `-`.
    pub user_empty: f64,
    /// Chance that the byte count is `-`.
    pub bytes_empty: f64,
    /// Chance that the query string is `-`.
    pub query_empty: f64,
    /// Chance that the referrer is `-`.
    pub referrer_empty: f64,
    /// Share of hosts rendered as IPv6.
    pub ipv6_share: f64,
}

impl Default for ValueGrammar {
    fn default() -> Self {
        ValueGrammar {
            user_empty: 0.3,
            bytes_empty: 0.1,
            query_empty: 0.4,
            referrer_empty: 0.3,
            ipv6_share: 0.5,
        }
    }
}

pub const STATUS_CODES: [&str; 13] = [
    "200", "201", "204", "301", "302", "304", "400", "401", "403", "404", "500", "502", "503",
];
pub const METHODS: [&str; 7] = ["GET", "POST", "PUT", "DELETE", "HEAD", "OPTIONS", "PATCH"];
pub const PROTOCOLS: [&str; 3] = ["HTTP/1.0", "HTTP/1.1", "HTTP/2"];
pub const TLDS: [&str; 4] = ["com", "net", "org", "io"];
pub const MONTHS: [&str; 12] = [
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];
const EXTENSIONS: [&str; 3] = [".html", ".php", ".png"];
const UA_PRODUCTS: [&str; 7] = [
    "Mozilla",
    "Opera",
    "curl",
    "Wget",
    "python-requests",
    "Googlebot",
    "Dalvik",
];
const UA_TOKENS: [&str; 18] = [
    "compatible",
    "MSIE 8.0",
    "MSIE 10.0",
    "Windows NT 6.1",
    "Windows NT 10.0",
    "Win64",
    "x64",
    "X11",
    "Linux x86_64",
    "Macintosh",
    "Intel Mac OS X 10_15_7",
    "Trident/4.0",
    "rv:91.0",
    "U",
    "en-US",
    "Android 11",
    "iPhone",
    "CPU iPhone OS 14_6 like Mac OS X",
];

/// Generates a value for `kind` with the default grammar.
pub fn gen_field_value<R: Rng + ?Sized>(
    kind: FieldKind,
    rng: &mut R,
) -> Result<FieldValue, ForgeError> {
    ValueGrammar::default().gen(kind, rng)
}

impl ValueGrammar {
    pub fn gen<R: Rng + ?Sized>(&self, kind: FieldKind, rng: &mut R) -> Result<FieldValue, ForgeError> {
        let text = match kind {
            FieldKind::Separator => return Err(ForgeError::SeparatorValue),
            FieldKind::Host => {
                if rng.gen_bool(self.ipv6_share) {
                    ipv6(rng)
                } else {
                    ipv4(rng)
                }
            }
            FieldKind::LogName => "-".to_string(),
            FieldKind::User => {
                if rng.gen_bool(self.user_empty) {
                    "-".to_string()
                } else {
                    lowercase(rng, 3, 12)
                }
            }
            FieldKind::Time => timestamp(rng),
            FieldKind::Request => self.request(rng),
            FieldKind::Status => pick(rng, &STATUS_CODES).to_string(),
            FieldKind::Bytes => {
                if rng.gen_bool(self.bytes_empty) {
                    "-".to_string()
                } else {
                    let digits = rng.gen_range(1..=7u32);
                    let lo = if digits == 1 { 0 } else { 10u64.pow(digits - 1) };
                    rng.gen_range(lo..10u64.pow(digits)).to_string()
                }
            }
            FieldKind::Method => pick(rng, &METHODS).to_string(),
            FieldKind::UrlPath => url_path(rng),
            FieldKind::Protocol => pick(rng, &PROTOCOLS).to_string(),
            FieldKind::Query => {
                if rng.gen_bool(self.query_empty) {
                    "-".to_string()
                } else {
                    query(rng)
                }
            }
            FieldKind::CanonicalServer | FieldKind::Server => domain(rng),
            FieldKind::UserAgent => user_agent(rng),
            FieldKind::Referrer => {
                if rng.gen_bool(self.referrer_empty) {
                    "-".to_string()
                } else {
                    let scheme = if rng.gen_bool(0.5) { "http://" } else { "https://" };
                    let path = url_path(rng);
                    let sep = if path.starts_with('/') { "" } else { "/" };
                    format!("{scheme}{}{sep}{path}", domain(rng))
                }
            }
        };
        Ok(FieldValue { kind, text })
    }

    fn request<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let method = pick(rng, &METHODS);
        let path = url_path(rng);
        let q = if rng.gen_bool(self.query_empty) {
            String::new()
        } else {
            query(rng)
        };
        let proto = pick(rng, &PROTOCOLS);
        format!("{method} {path}{q} {proto}")
    }

    /// Generates one value per field of `spec` (with `V` mirroring `v`) and
    /// renders the record.
    pub fn generate_record<R: Rng + ?Sized>(
        &self,
        spec: &FormatSpec,
        rng: &mut R,
    ) -> Result<AnnotatedRecord, ForgeError> {
        let mut values = Vec::with_capacity(spec.tokens.len());
        for token in &spec.tokens {
            values.push(self.gen(token.field, rng)?);
        }
        let canonical = values
            .iter()
            .find(|v| v.kind == FieldKind::CanonicalServer)
            .map(|v| v.text.clone());
        if let Some(name) = canonical {
            for v in values.iter_mut().filter(|v| v.kind == FieldKind::Server) {
                v.text = name.clone();
            }
        }
        render_record(spec, &values)
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty table")
}

fn lowercase<R: Rng + ?Sized>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn alnum<R: Rng + ?Sized>(rng: &mut R, min: usize, max: usize) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char)
        .collect()
}

fn ipv4<R: Rng + ?Sized>(rng: &mut R) -> String {
    let o: [u8; 4] = rng.gen();
    format!("{}.{}.{}.{}", o[0], o[1], o[2], o[3])
}

fn ipv6<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..8)
        .map(|_| format!("{:x}", rng.gen::<u16>()))
        .collect::<Vec<_>>()
        .join(":")
}

fn is_leap(year: u32) -> bool {
    (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400)
}

fn timestamp<R: Rng + ?Sized>(rng: &mut R) -> String {
    let year = rng.gen_range(1970..=9999u32);
    let month = rng.gen_range(0..12usize);
    let days = match month {
        1 if is_leap(year) => 29,
        1 => 28,
        3 | 5 | 8 | 10 => 30,
        _ => 31,
    };
    let day = rng.gen_range(1..=days);
    let (hh, mm, ss) = (
        rng.gen_range(0..24u32),
        rng.gen_range(0..60u32),
        rng.gen_range(0..60u32),
    );
    let sign = if rng.gen_bool(0.5) { '+' } else { '-' };
    let zone_h = rng.gen_range(0..=14u32);
    let zone_m = if zone_h == 14 {
        0
    } else {
        [0u32, 30, 45][rng.gen_range(0..3)]
    };
    format!(
        "{day:02}/{}/{year:04}:{hh:02}:{mm:02}:{ss:02} {sign}{zone_h:02}{zone_m:02}",
        MONTHS[month]
    )
}

fn path_segment<R: Rng + ?Sized>(rng: &mut R) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzabcdefghijklmnopqrstuvwxyz0123456789~.";
    let n = rng.gen_range(1..=10);
    (0..n)
        .map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char)
        .collect()
}

fn url_path<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=4);
    let mut segments: Vec<String> = (0..n).map(|_| path_segment(rng)).collect();
    if rng.gen_bool(0.5) {
        let ext = pick(rng, &EXTENSIONS);
        segments.last_mut().expect("at least one segment").push_str(ext);
    }
    let body = segments.join("/");
    if rng.gen_bool(0.5) {
        format!("/{body}")
    } else {
        body
    }
}

fn query<R: Rng + ?Sized>(rng: &mut R) -> String {
    let pairs = rng.gen_range(1..=3);
    let body = (0..pairs)
        .map(|_| format!("{}={}", alnum(rng, 1, 8), alnum(rng, 1, 8)))
        .collect::<Vec<_>>()
        .join("&");
    format!("?{body}")
}

fn domain<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("{}.{}", lowercase(rng, 3, 12), pick(rng, &TLDS))
}

fn user_agent<R: Rng + ?Sized>(rng: &mut R) -> String {
    let product = pick(rng, &UA_PRODUCTS);
    let version = format!("{}.{}", rng.gen_range(1..=12), rng.gen_range(0..=9));
    let n = rng.gen_range(1..=4);
    let tokens: Vec<&str> = UA_TOKENS.choose_multiple(rng, n).copied().collect();
    let detail = match rng.gen_range(0..4) {
        0 => format!(
            "Gecko/20{:02}0101 Firefox/{}.0",
            rng.gen_range(0..=22),
            rng.gen_range(3..=120)
        ),
        1 => format!(
            "AppleWebKit/537.36 (KHTML, like Gecko) Chrome/{}.0.{}.{} Safari/537.36",
            rng.gen_range(40..=120),
            rng.gen_range(1000..=5999),
            rng.gen_range(10..=199)
        ),
        2 => format!("Version/{}.{} Mobile", rng.gen_range(4..=17), rng.gen_range(0..=9)),
        _ => format!("like Gecko/{}", alnum(rng, 3, 8)),
    };
    format!("{product}/{version} ({}) {detail}", tokens.join("; "))
}

/// Renders `values` in the layout described by `spec`.
///
/// Content characters, including spaces inside a value, are annotated with
/// the field's symbol; wrapper characters are copied literally and the
/// single space between fields becomes `_`.
pub fn render_record(spec: &FormatSpec, values: &[FieldValue]) -> Result<AnnotatedRecord, ForgeError> {
    if spec.tokens.len() != values.len() {
        return Err(ForgeError::Arity {
            fields: spec.tokens.len(),
            values: values.len(),
        });
    }
    let mut raw = String::new();
    let mut ann = String::new();
    for (i, (token, value)) in spec.tokens.iter().zip(values).enumerate() {
        let symbol = token.field.symbol();
        if value.kind != token.field {
            return Err(ForgeError::KindMismatch(symbol));
        }
        if value.text.contains(['\n', '\r']) {
            return Err(ForgeError::Newline(symbol));
        }
        if value.text.is_empty() {
            return Err(ForgeError::Empty(symbol));
        }
        if i > 0 {
            raw.push(' ');
            ann.push(SEPARATOR_SYMBOL);
        }
        let (open, close) = match token.wrapper {
            Wrapper::None => (None, None),
            Wrapper::Quotes => (Some('"'), Some('"')),
            Wrapper::Brackets => (Some('['), Some(']')),
        };
        if let Some(c) = open {
            raw.push(c);
            ann.push(c);
        }
        raw.push_str(&value.text);
        ann.extend(std::iter::repeat_n(symbol, value.text.chars().count()));
        if let Some(c) = close {
            raw.push(c);
            ann.push(c);
        }
    }
    Ok(AnnotatedRecord { raw, ann })
}
