use logtrans::corpus::{generate_record, FormatSource};
use logtrans::field_forge::ValueGrammar;
use logtrans::truth::{annotate_bytes, annotate_file, annotate_line, write_rejects, KnownFormat};
use proptest::prelude::*;

fn fmt_of(source: FormatSource) -> KnownFormat {
    match source {
        FormatSource::Clf => KnownFormat::Clf,
        FormatSource::Elf => KnownFormat::Elf,
        FormatSource::QuotedElf => KnownFormat::QuotedElf,
        FormatSource::Random { .. } => unreachable!(),
    }
}

#[test]
fn reproduces_generated_annotations() {
    let grammar = ValueGrammar::default();
    let sources = [FormatSource::Clf, FormatSource::Elf, FormatSource::QuotedElf];
    for i in 0..10_000u64 {
        let source = sources[(i % 3) as usize];
        let r = generate_record(source, &grammar, i.wrapping_mul(0x9E37_79B9)).unwrap();
        let parsed = annotate_line(&r.raw, fmt_of(source)).unwrap_or_else(|e| panic!("{e}: {}", r.raw));
        assert_eq!(parsed.ann, r.ann, "{}", r.raw);
    }
}

#[test]
fn elf_fields_appear_in_order() {
    let grammar = ValueGrammar::default();
    for seed in 0..500 {
        let r = generate_record(FormatSource::Elf, &grammar, seed).unwrap();
        let ann = annotate_line(&r.raw, KnownFormat::Elf).unwrap().ann;
        let firsts: Vec<usize> = "hlutrsbRi".chars().map(|c| ann.find(c).unwrap()).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]), "{ann}");
    }
}

#[test]
fn file_with_one_corrupted_line() {
    let grammar = ValueGrammar::default();
    let mut lines: Vec<String> =
        (0..100).map(|s| generate_record(FormatSource::Elf, &grammar, s).unwrap().raw).collect();
    lines[41] = "this is not a log line".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("access.log");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = annotate_file(&path, KnownFormat::Elf).unwrap();
    assert_eq!(out.records.len(), 99);
    assert_eq!(out.rejects.len(), 1);
    assert_eq!(out.rejects[0].line_number, 42);

    let report = dir.path().join("rejects.csv");
    write_rejects(&out.rejects, &report).unwrap();
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.starts_with("line_number,reason\n42,"));
}

#[test]
fn quoted_file_keeps_literal_outer_quotes() {
    let grammar = ValueGrammar::default();
    let text: String = (0..50)
        .map(|s| format!("\"{}\"\n", generate_record(FormatSource::Elf, &grammar, s).unwrap().raw))
        .collect();
    let out = annotate_bytes(text.as_bytes(), KnownFormat::QuotedElf);
    assert_eq!(out.records.len(), 50);
    for r in out.records {
        assert!(r.ann.starts_with("\"h") && r.ann.ends_with("i\"\""));
    }
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(annotate_file(std::path::Path::new("/nonexistent/access.log"), KnownFormat::Clf).is_err());
}

proptest! {
    #[test]
    fn successful_parses_preserve_length(line in "[ -~]{0,80}", fmt in prop_oneof![
        Just(KnownFormat::Clf), Just(KnownFormat::Elf), Just(KnownFormat::QuotedElf)
    ]) {
        if let Ok(r) = annotate_line(&line, fmt) {
            prop_assert_eq!(r.raw.chars().count(), r.ann.chars().count());
        }
    }

    #[test]
    fn clf_round_trip(seed in any::<u64>()) {
        let r = generate_record(FormatSource::Clf, &ValueGrammar::default(), seed).unwrap();
        prop_assert_eq!(annotate_line(&r.raw, KnownFormat::Clf).unwrap(), r);
    }
}
