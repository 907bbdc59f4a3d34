use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::NeuralError;
use crate::field_forge::AnnotatedRecord;

pub const PAD: usize = 0;
/// Source vocabulary: unknown character.
pub const UNK: usize = 1;
/// Target vocabulary: decoder start symbol.
pub const START: usize = 1;
/// Target vocabulary: end of output.
pub const END: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabKind {
    /// Specials `PAD, UNK`.
    Source,
    /// Specials `PAD, START, END`.
    Target,
}

impl VocabKind {
    pub fn specials(self) -> usize {
        match self {
            VocabKind::Source => 2,
            VocabKind::Target => 3,
        }
    }
}

/// Character ↔ index map. Special symbols take the lowest indices, `PAD`
/// first; characters follow in code-point order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct CharVocab {
    kind: VocabKind,
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    kind: VocabKind,
    chars: String,
}

impl From<VocabRepr> for CharVocab {
    fn from(r: VocabRepr) -> Self {
        CharVocab::new(r.kind, r.chars.chars())
    }
}

impl From<CharVocab> for VocabRepr {
    fn from(v: CharVocab) -> Self {
        VocabRepr { kind: v.kind, chars: v.chars.into_iter().collect() }
    }
}

impl CharVocab {
    pub fn new(kind: VocabKind, chars: impl IntoIterator<Item = char>) -> Self {
        let chars: Vec<char> = chars.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + kind.specials()))
            .collect();
        CharVocab { kind, chars, index }
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        self.chars.len() + self.kind.specials()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// The character behind index `i`, `None` for specials.
    pub fn char_at(&self, i: usize) -> Option<char> {
        i.checked_sub(self.kind.specials()).and_then(|j| self.chars.get(j).copied())
    }

    /// Source encoding: unknown characters map to `UNK`.
    pub fn encode_lossy(&self, s: &str) -> Vec<usize> {
        s.chars().map(|c| self.index_of(c).unwrap_or(UNK)).collect()
    }

    /// Strict encoding; fails on the first unknown character.
    pub fn encode(&self, s: &str) -> Result<Vec<usize>, NeuralError> {
        s.chars()
            .map(|c| self.index_of(c).ok_or(NeuralError::UnknownSymbol(c)))
            .collect()
    }

    /// Decodes indices, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_at(i)).collect()
    }

    pub fn count_unknown(&self, s: &str) -> usize {
        s.chars().filter(|c| !self.index.contains_key(c)).count()
    }
}

/// Builds the source vocabulary from every raw line and the target
/// vocabulary from every annotation.
pub fn build_vocab(records: &[AnnotatedRecord]) -> Result<(CharVocab, CharVocab), NeuralError> {
    if records.is_empty() {
        return Err(NeuralError::EmptyCorpus);
    }
    let source = CharVocab::new(VocabKind::Source, records.iter().flat_map(|r| r.raw.chars()));
    let target = CharVocab::new(VocabKind::Target, records.iter().flat_map(|r| r.ann.chars()));
    Ok((source, target))
}
