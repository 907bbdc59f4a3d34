//! Greedy and beam-search translation of single records.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::cell::CellState;
use super::config::ModelConfig;
use super::model::{self, Encoded, Tables};
use super::real::Real;
use super::vocab::{CharVocab, END, PAD, START};
use super::weights::Weights;

/// Extra output symbols allowed beyond the source length.
pub const DECODE_SLACK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

impl Decoding {
    /// Width 1 means greedy.
    pub fn from_width(width: usize) -> Self {
        if width <= 1 {
            Decoding::Greedy
        } else {
            Decoding::Beam(width)
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoding::Greedy => write!(f, "greedy"),
            Decoding::Beam(w) => write!(f, "beam({w})"),
        }
    }
}

impl FromStr for Decoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Decoding::Greedy),
            _ => s
                .strip_prefix("beam")
                .map(|w| w.trim_matches(|c| c == '(' || c == ')' || c == ':' || c == '='))
                .and_then(|w| w.parse::<usize>().ok())
                .filter(|&w| w > 0)
                .map(Decoding::from_width)
                .ok_or_else(|| format!("unknown decoding {s:?}; use greedy or beam:<width>")),
        }
    }
}

/// A decoded output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Target indices, without the end symbol.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of every emitted symbol, end included.
    pub log_prob: f64,
    /// Whether the end symbol was produced before the length cap.
    pub finished: bool,
}

impl Hypothesis {
    /// Symbols scored, counting the end symbol when present.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Log-probability per scored symbol.
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.scored_len().max(1) as f64
    }
}

/// Inference view over a trained model.
pub struct Translator<'a, F> {
    cfg: &'a ModelConfig,
    weights: &'a Weights<F>,
    source: &'a CharVocab,
    target: &'a CharVocab,
    tables: Tables<F>,
}

struct Live<F> {
    tokens: Vec<usize>,
    log_prob: f64,
    states: Vec<CellState<F>>,
}

impl<'a, F: Real> Translator<'a, F> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a Weights<F>, source: &'a CharVocab, target: &'a CharVocab) -> Self {
        Translator { cfg, weights, source, target, tables: Tables::new(weights) }
    }

    pub fn translate(&self, raw: &str, decoding: Decoding) -> String {
        let hyp = match decoding {
            Decoding::Greedy => self.greedy(raw),
            Decoding::Beam(w) => self.beam(raw, w),
        };
        self.target.decode(&hyp.tokens)
    }

    /// Longest output allowed for `raw`.
    pub fn length_cap(raw: &str) -> usize {
        raw.chars().count() + DECODE_SLACK
    }

    fn encode(&self, raw: &str) -> Encoded<F> {
        let mut ids = self.source.encode_lossy(raw);
        if self.cfg.reverse_source {
            ids.reverse();
        }
        let n = ids.len();
        let mask = Array2::from_elem((n, 1), F::one());
        model::encode(self.weights, self.cfg, &self.tables, &ids, &mask).expect("weights match their own layout")
    }

    /// Advances `states` by feeding `token`; returns log-probabilities of the
    /// next symbol, renormalized over the symbols a decoder may emit.
    fn step(&self, enc: &Encoded<F>, states: &mut [CellState<F>], token: usize) -> Vec<f64> {
        let out = model::decoder_step(self.weights, self.cfg, &self.tables, enc, states, &[token], None, None, false)
            .expect("weights match their own layout");
        let (features, _) = model::head_features(self.weights, &out.top, out.context.as_ref(), enc);
        let scores = model::logits(self.weights, &features);
        let row: Vec<f64> = scores
            .row(0)
            .iter()
            .enumerate()
            .map(|(i, v)| if i == PAD || i == START { f64::NEG_INFINITY } else { v.to_f64_lossless() })
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logz = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.into_iter().map(|v| v - logz).collect()
    }

    /// Full next-symbol distribution after forcing `prefix` (target indices).
    pub fn next_distribution(&self, raw: &str, prefix: &[usize]) -> Vec<f64> {
        let enc = self.encode(raw);
        let mut states = enc.finals.clone();
        let mut logp = self.step(&enc, &mut states, START);
        for &t in prefix {
            logp = self.step(&enc, &mut states, t);
        }
        logp.into_iter().map(f64::exp).collect()
    }

    /// Log-probability of emitting `tokens` followed by the end symbol.
    pub fn sequence_log_prob(&self, raw: &str, tokens: &[usize]) -> f64 {
        let enc = self.encode(raw);
        let mut states = enc.finals.clone();
        let mut prev = START;
        let mut total = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&END)) {
            total += self.step(&enc, &mut states, prev)[t];
            prev = t;
        }
        total
    }

    pub fn greedy(&self, raw: &str) -> Hypothesis {
        let enc = self.encode(raw);
        let cap = Self::length_cap(raw);
        let mut states = enc.finals.clone();
        let mut prev = START;
        let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
        while hyp.tokens.len() < cap {
            let logp = self.step(&enc, &mut states, prev);
            let best = argmax(&logp);
            hyp.log_prob += logp[best];
            if best == END {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(best);
            prev = best;
        }
        hyp
    }

    /// Best hypothesis under length-normalized log-probability.
    pub fn beam(&self, raw: &str, width: usize) -> Hypothesis {
        let mut all = self.beam_all(raw, width);
        all.swap_remove(0)
    }

    /// Every completed hypothesis, best normalized score first.
    pub fn beam_all(&self, raw: &str, width: usize) -> Vec<Hypothesis> {
        let width = width.max(1);
        let enc = self.encode(raw);
        let cap = Self::length_cap(raw);
        let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, states: enc.finals.clone() }];
        let mut done: Vec<Hypothesis> = Vec::new();
        while !live.is_empty() && done.len() < width {
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            let mut next_states = Vec::with_capacity(live.len());
            for (k, h) in live.iter().enumerate() {
                let mut states = h.states.clone();
                let prev = h.tokens.last().copied().unwrap_or(START);
                let logp = self.step(&enc, &mut states, prev);
                for tok in top_k(&logp, width) {
                    candidates.push((h.log_prob + logp[tok], k, tok));
                }
                next_states.push(states);
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::with_capacity(width);
            for (score, k, tok) in candidates {
                if next.len() + done.len() >= width {
                    break;
                }
                let mut tokens = live[k].tokens.clone();
                if tok == END {
                    done.push(Hypothesis { tokens, log_prob: score, finished: true });
                    continue;
                }
                tokens.push(tok);
                if tokens.len() >= cap {
                    done.push(Hypothesis { tokens, log_prob: score, finished: false });
                } else {
                    next.push(Live { tokens, log_prob: score, states: next_states[k].clone() });
                }
            }
            live = next;
        }
        done.extend(live.into_iter().map(|h| Hypothesis { tokens: h.tokens, log_prob: h.log_prob, finished: false }));
        done.sort_by(|a, b| b.normalized_score().total_cmp(&a.normalized_score()));
        done
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest finite values, best first, ties by index.
fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_finite()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
