use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NeuralError;

/// Translator architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Plain encoder-decoder; the decoder starts from the final encoder state.
    Mc,
    /// Encoder-decoder with additive (Bahdanau) attention fed into the
    /// decoder input.
    Ml,
    /// Encoder-decoder with multiplicative "general" (Luong) attention over
    /// the decoder output.
    Ms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    /// Number of gate blocks stacked in the cell's weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mc" => Ok(Arch::Mc),
            "ml" => Ok(Arch::Ml),
            "ms" => Ok(Arch::Ms),
            _ => Err(format!("unknown architecture `{s}` (expected mc, ml or ms)")),
        }
    }
}

impl FromStr for CellKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            _ => Err(format!("unknown cell kind `{s}` (expected lstm or gru)")),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mc => "mc",
            Arch::Ml => "ml",
            Arch::Ms => "ms",
        })
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

pub const PAPER_CELL_GRID: [usize; 3] = [256, 512, 1024];
pub const PAPER_DROPOUT_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub cell: CellKind,
    /// Hidden width of every recurrent layer.
    pub cells: usize,
    /// Recurrent layers in the encoder and in the decoder.
    pub layers: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    /// Longest record used for training; longer records are truncated.
    pub max_len: usize,
    pub beam_width: usize,
    /// Feed the source to the encoder back to front.
    pub reverse_source: bool,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Mc,
            cell: CellKind::Lstm,
            cells: 128,
            layers: 1,
            dropout: 0.2,
            embedding_dim: 64,
            max_len: 512,
            beam_width: 1,
            reverse_source: true,
            init_scale: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Config(m.to_string()));
        if self.cells == 0 {
            return bad("cells must be at least 1");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1");
        }
        if self.init_scale.is_nan() || self.init_scale <= 0.0 {
            return bad("init_scale must be positive");
        }
        Ok(())
    }

    /// True when both width and dropout lie on the grids explored in the
    /// original experiments.
    pub fn on_paper_grid(&self) -> bool {
        PAPER_CELL_GRID.contains(&self.cells) && PAPER_DROPOUT_GRID.iter().any(|d| (d - self.dropout).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    /// Share of the corpus held out for validation. Zero validates on the
    /// training records themselves.
    pub validation_fraction: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            batch_size: 64,
            max_epochs: 30,
            patience: 10,
            validation_fraction: 0.1,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, epochs and patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad("clip norm must be positive");
            }
        }
        Ok(())
    }
}
