//! Log formats, dataset profiles and the paired `.raw` / `.ann` corpus files.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field_forge::{AnnotatedRecord, FieldKind, ForgeError, ValueGrammar};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("field count bounds must satisfy 2 <= min <= max <= 15, got {min}..={max}")]
    FieldBounds { min: usize, max: usize },
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error(".raw has {raw} lines but .ann has {ann}")]
    Misaligned { raw: usize, ann: usize },
    #[error("record {index}: {source}")]
    Record { index: usize, source: ForgeError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Decoration around a field value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wrapper {
    None,
    Quotes,
    Brackets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldToken {
    pub field: FieldKind,
    pub wrapper: Wrapper,
}

impl FieldToken {
    pub fn bare(field: FieldKind) -> Self {
        FieldToken { field, wrapper: Wrapper::None }
    }

    pub fn quoted(field: FieldKind) -> Self {
        FieldToken { field, wrapper: Wrapper::Quotes }
    }

    pub fn bracketed(field: FieldKind) -> Self {
        FieldToken { field, wrapper: Wrapper::Brackets }
    }
}

/// Ordered field layout of one log format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub tokens: Vec<FieldToken>,
}

impl FormatSpec {
    pub fn new(tokens: Vec<FieldToken>) -> Self {
        FormatSpec { tokens }
    }

    /// Common Log Format: `h l u [t] "r" s b`.
    pub fn clf() -> Self {
        use FieldKind::*;
        FormatSpec::new(vec![
            FieldToken::bare(Host),
            FieldToken::bare(LogName),
            FieldToken::bare(User),
            FieldToken::bracketed(Time),
            FieldToken::quoted(Request),
            FieldToken::bare(Status),
            FieldToken::bare(Bytes),
        ])
    }

    /// Combined Log Format: CLF followed by `"R" "i"`.
    pub fn elf() -> Self {
        let mut spec = FormatSpec::clf();
        spec.tokens.push(FieldToken::quoted(FieldKind::Referrer));
        spec.tokens.push(FieldToken::quoted(FieldKind::UserAgent));
        spec
    }

    pub fn fields(&self) -> impl Iterator<Item = FieldKind> + '_ {
        self.tokens.iter().map(|t| t.field)
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| match t.wrapper {
                Wrapper::None => t.field.symbol().to_string(),
                Wrapper::Quotes => format!("\"{}\"", t.field.symbol()),
                Wrapper::Brackets => format!("[{}]", t.field.symbol()),
            })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Draws a random bare format of `min_fields..=max_fields` distinct fields
/// in shuffled order.
pub fn sample_format<R: Rng + ?Sized>(
    rng: &mut R,
    min_fields: usize,
    max_fields: usize,
) -> Result<FormatSpec, CorpusError> {
    if !(2 <= min_fields && min_fields <= max_fields && max_fields <= FieldKind::FIELDS.len()) {
        return Err(CorpusError::FieldBounds { min: min_fields, max: max_fields });
    }
    let k = rng.gen_range(min_fields..=max_fields);
    let mut fields: Vec<FieldKind> = FieldKind::FIELDS.choose_multiple(rng, k).copied().collect();
    fields.shuffle(rng);
    Ok(FormatSpec::new(fields.into_iter().map(FieldToken::bare).collect()))
}

/// Where the layout of a record comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatSource {
    Clf,
    Elf,
    /// An ELF line wrapped in one extra pair of double quotes.
    QuotedElf,
    Random { min_fields: usize, max_fields: usize },
}

impl fmt::Display for FormatSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatSource::Clf => write!(f, "CLF"),
            FormatSource::Elf => write!(f, "ELF"),
            FormatSource::QuotedElf => write!(f, "QuotedELF"),
            FormatSource::Random { min_fields, max_fields } => {
                write!(f, "Random({min_fields},{max_fields})")
            }
        }
    }
}

/// Named preset datasets. Counts default to desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Trivial: ELF only.
    Tt,
    /// Easy: ELF, CLF and random layouts.
    Te,
    /// Moderate: CLF and random layouts.
    Tm,
    /// Moderate, smaller.
    Tmp,
    /// Hard: random layouts only.
    Th,
}

impl FromStr for Preset {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TT" => Ok(Preset::Tt),
            "TE" => Ok(Preset::Te),
            "TM" => Ok(Preset::Tm),
            "TMP" | "TM'" => Ok(Preset::Tmp),
            "TH" => Ok(Preset::Th),
            _ => Err(CorpusError::UnknownProfile(s.to_string())),
        }
    }
}

pub const DEFAULT_COUNT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub count: usize,
    pub mix: Vec<(FormatSource, f64)>,
    pub seed: u64,
    #[serde(default)]
    pub grammar: ValueGrammar,
}

impl DatasetProfile {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        use FormatSource::*;
        let random14 = Random { min_fields: 2, max_fields: 14 };
        let (name, count, mix) = match preset {
            Preset::Tt => ("TT", DEFAULT_COUNT, vec![(Elf, 1.0)]),
            Preset::Te => ("TE", DEFAULT_COUNT, vec![(Elf, 0.40), (Clf, 0.24), (random14, 0.36)]),
            Preset::Tm => ("TM", DEFAULT_COUNT, vec![(Clf, 0.5), (random14, 0.5)]),
            Preset::Tmp => ("TMp", DEFAULT_COUNT / 5, vec![(Clf, 0.5), (random14, 0.5)]),
            Preset::Th => ("TH", DEFAULT_COUNT, vec![(Random { min_fields: 2, max_fields: 15 }, 1.0)]),
        };
        DatasetProfile {
            name: name.to_string(),
            count,
            mix,
            seed,
            grammar: ValueGrammar::default(),
        }
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = count;
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.count == 0 {
            return Err(CorpusError::Profile("count must be at least 1".into()));
        }
        if self.mix.is_empty() {
            return Err(CorpusError::Profile("empty format mix".into()));
        }
        let mut total = 0.0;
        for (source, p) in &self.mix {
            if !(0.0..=1.0).contains(p) {
                return Err(CorpusError::Profile(format!("proportion {p} for {source} outside [0,1]")));
            }
            if let FormatSource::Random { min_fields, max_fields } = *source {
                if !(2 <= min_fields && min_fields <= max_fields && max_fields <= 15) {
                    return Err(CorpusError::FieldBounds { min: min_fields, max: max_fields });
                }
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Profile(format!("proportions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Number of records assigned to each mix entry (largest remainder).
    pub fn allocation(&self) -> Vec<usize> {
        let quotas: Vec<f64> = self.mix.iter().map(|(_, p)| p * self.count as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        // stable sort keeps earlier entries first on equal remainders
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
        });
        for &i in order.iter().cycle().take(self.count.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }

    /// Format source of every record, in record order.
    pub fn assignment(&self) -> Vec<FormatSource> {
        let mut sources: Vec<FormatSource> = self
            .mix
            .iter()
            .zip(self.allocation())
            .flat_map(|((source, _), n)| std::iter::repeat_n(*source, n))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        sources.shuffle(&mut rng);
        sources
    }
}

/// Seed of record `index` in a dataset seeded with `seed`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

/// Generates one record of the given source with its own random stream.
pub fn generate_record(
    source: FormatSource,
    grammar: &ValueGrammar,
    seed: u64,
) -> Result<AnnotatedRecord, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = match source {
        FormatSource::Clf => FormatSpec::clf(),
        FormatSource::Elf | FormatSource::QuotedElf => FormatSpec::elf(),
        FormatSource::Random { min_fields, max_fields } => sample_format(&mut rng, min_fields, max_fields)?,
    };
    let record = grammar
        .generate_record(&spec, &mut rng)
        .map_err(|source| CorpusError::Record { index: 0, source })?;
    Ok(match source {
        FormatSource::QuotedElf => AnnotatedRecord {
            raw: format!("\"{}\"", record.raw),
            ann: format!("\"{}\"", record.ann),
        },
        _ => record,
    })
}

/// Materializes a dataset profile.
pub fn generate_dataset(profile: &DatasetProfile) -> Result<Vec<AnnotatedRecord>, CorpusError> {
    Ok(generate_labelled(profile)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`generate_dataset`], also returning each record's format source.
pub fn generate_labelled(
    profile: &DatasetProfile,
) -> Result<Vec<(FormatSource, AnnotatedRecord)>, CorpusError> {
    profile.validate()?;
    profile
        .assignment()
        .into_iter()
        .enumerate()
        .map(|(i, source)| {
            generate_record(source, &profile.grammar, record_seed(profile.seed, i as u64))
                .map(|r| (source, r))
                .map_err(|e| match e {
                    CorpusError::Record { source, .. } => CorpusError::Record { index: i, source },
                    other => other,
                })
        })
        .collect()
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut s: OsString = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Paths of the `.raw` and `.ann` files for `stem`.
pub fn corpus_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_extension(stem, "raw"), with_extension(stem, "ann"))
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for line in lines {
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes `<stem>.raw` and `<stem>.ann`, one record per line.
pub fn write_corpus(records: &[AnnotatedRecord], stem: &Path) -> Result<(), CorpusError> {
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|source| CorpusError::Record { index, source })?;
        if r.ann.contains(['\n', '\r']) {
            return Err(CorpusError::Record { index, source: ForgeError::Newline('?') });
        }
    }
    let (raw, ann) = corpus_paths(stem);
    write_lines(&raw, records.iter().map(|r| r.raw.as_str()))?;
    write_lines(&ann, records.iter().map(|r| r.ann.as_str()))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.split_terminator('\n').map(str::to_string).collect())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(stem: &Path) -> Result<Vec<AnnotatedRecord>, CorpusError> {
    let (raw_path, ann_path) = corpus_paths(stem);
    let raw = read_lines(&raw_path)?;
    let ann = read_lines(&ann_path)?;
    if raw.len() != ann.len() {
        return Err(CorpusError::Misaligned { raw: raw.len(), ann: ann.len() });
    }
    raw.into_iter()
        .zip(ann)
        .enumerate()
        .map(|(index, (raw, ann))| {
            AnnotatedRecord::new(raw, ann).map_err(|source| CorpusError::Record { index, source })
        })
        .collect()
}

/// Minimum, median and maximum record length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthStats {
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

pub fn length_stats(records: &[AnnotatedRecord]) -> Option<LengthStats> {
    let mut lens: Vec<usize> = records.iter().map(AnnotatedRecord::len).collect();
    if lens.is_empty() {
        return None;
    }
    lens.sort_unstable();
    let n = lens.len();
    let median = if n % 2 == 1 {
        lens[n / 2] as f64
    } else {
        (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
    };
    Some(LengthStats { min: lens[0], median, max: lens[n - 1] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn presets_render_expected_layouts() {
        assert_eq!(FormatSpec::clf().to_string(), "h l u [t] \"r\" s b");
        assert_eq!(FormatSpec::elf().to_string(), "h l u [t] \"r\" s b \"R\" \"i\"");
    }

    #[test]
    fn forced_size_format() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let spec = sample_format(&mut rng, 2, 2).unwrap();
            assert_eq!(spec.tokens.len(), 2);
            assert_ne!(spec.tokens[0].field, spec.tokens[1].field);
        }
    }

    #[test]
    fn sampled_formats_never_repeat_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sizes = HashSet::new();
        for _ in 0..10_000 {
            let spec = sample_format(&mut rng, 2, 15).unwrap();
            let distinct: HashSet<FieldKind> = spec.fields().collect();
            assert_eq!(distinct.len(), spec.tokens.len());
            assert!(spec.tokens.iter().all(|t| t.wrapper == Wrapper::None));
            assert!(!distinct.contains(&FieldKind::Separator));
            sizes.insert(spec.tokens.len());
        }
        assert_eq!(sizes.len(), 14);
    }

    #[test]
    fn sample_bounds_are_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (lo, hi) in [(1, 5), (5, 4), (2, 16), (0, 0)] {
            assert!(matches!(
                sample_format(&mut rng, lo, hi),
                Err(CorpusError::FieldBounds { .. })
            ));
        }
    }

    #[test]
    fn largest_remainder_allocation() {
        let te = DatasetProfile::preset(Preset::Te, 0);
        assert_eq!(te.clone().with_count(1000).allocation(), vec![400, 240, 360]);
        assert_eq!(te.clone().with_count(7).allocation().iter().sum::<usize>(), 7);
        assert_eq!(te.with_count(1).allocation().iter().sum::<usize>(), 1);
    }

    #[test]
    fn profile_validation() {
        let mut p = DatasetProfile::preset(Preset::Tm, 0);
        p.mix[0].1 = 0.6;
        assert!(matches!(p.validate(), Err(CorpusError::Profile(_))));
        assert!(matches!(
            DatasetProfile::preset(Preset::Tt, 0).with_count(0).validate(),
            Err(CorpusError::Profile(_))
        ));
        assert!("tmp".parse::<Preset>().is_ok());
        assert!("XX".parse::<Preset>().is_err());
    }

    #[test]
    fn single_record_dataset() {
        for preset in [Preset::Tt, Preset::Te, Preset::Tm, Preset::Tmp, Preset::Th] {
            let records = generate_dataset(&DatasetProfile::preset(preset, 9).with_count(1)).unwrap();
            assert_eq!(records.len(), 1);
            assert_eq!(records[0].raw.chars().count(), records[0].ann.chars().count());
        }
    }

    #[test]
    fn quoted_elf_wraps_whole_line() {
        let r = generate_record(FormatSource::QuotedElf, &ValueGrammar::default(), 5).unwrap();
        let plain = generate_record(FormatSource::Elf, &ValueGrammar::default(), 5).unwrap();
        assert_eq!(r.raw, format!("\"{}\"", plain.raw));
        assert!(r.ann.starts_with("\"h") && r.ann.ends_with("\"\""));
    }

    #[test]
    fn empty_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("empty");
        write_corpus(&[], &stem).unwrap();
        let (raw, ann) = corpus_paths(&stem);
        assert_eq!(fs::read(&raw).unwrap(), b"");
        assert_eq!(fs::read(&ann).unwrap(), b"");
        assert!(read_corpus(&stem).unwrap().is_empty());
    }

    #[test]
    fn misaligned_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        let (raw, ann) = corpus_paths(&stem);
        fs::write(&raw, "a\nb\nc\nd\ne\n").unwrap();
        fs::write(&ann, "h\nh\nh\nh\n").unwrap();
        assert!(matches!(
            read_corpus(&stem),
            Err(CorpusError::Misaligned { raw: 5, ann: 4 })
        ));
    }

    #[test]
    fn newline_in_record_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let rec = AnnotatedRecord { raw: "a\nb".into(), ann: "hhh".into() };
        assert!(matches!(
            write_corpus(&[rec], &dir.path().join("x")),
            Err(CorpusError::Record { index: 0, .. })
        ));
    }

    #[test]
    fn length_stats_median() {
        let rec = |n: usize| AnnotatedRecord { raw: "a".repeat(n), ann: "h".repeat(n) };
        let s = length_stats(&[rec(4), rec(1), rec(10), rec(2)]).unwrap();
        assert_eq!((s.min, s.median, s.max), (1, 3.0, 10));
        assert!(length_stats(&[]).is_none());
    }
}
