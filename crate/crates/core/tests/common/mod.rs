#![allow(dead_code)]

use logtrans::neural::{batch_gradients, batch_loss, Arch, CellKind, Example, Layout, ModelConfig, PreparedBatch, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for gradients that vanish.
pub const FD_FLOOR: f64 = 1e-7;

pub fn tiny_config(arch: Arch, cell: CellKind, layers: usize, dropout: f64) -> ModelConfig {
    ModelConfig { arch, cell, cells: 8, embedding_dim: 8, layers, dropout, ..Default::default() }
}

/// Three pairs of different lengths (at most 12) so padding is exercised.
pub fn tiny_examples(seed: u64, src_vocab: usize, tgt_vocab: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [(12, 11), (7, 9), (3, 1)]
        .iter()
        .map(|&(s, t)| Example {
            source: (0..s).map(|_| rng.gen_range(1..src_vocab)).collect(),
            target: (0..t).map(|_| rng.gen_range(3..tgt_vocab)).collect(),
        })
        .collect()
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compares analytic gradients of the mean token loss with central
/// differences over every parameter. Dropout masks are replayed from the
/// same seed on each evaluation.
pub fn gradient_check(cfg: &ModelConfig, seed: u64) -> GradCheck {
    let (vs, vt) = (6, 7);
    let layout = Layout::new(cfg, vs, vt);
    let mut w: Weights<f64> = Weights::uniform(layout, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
    let examples = tiny_examples(seed + 1, vs, vt);
    let refs: Vec<&Example> = examples.iter().collect();
    let batch: PreparedBatch<f64> = PreparedBatch::new(&refs, cfg.reverse_source);
    let drop_rng = || ChaCha8Rng::seed_from_u64(seed + 2);
    let (_, grads) = batch_gradients(&w, cfg, &batch, Some(&mut drop_rng())).unwrap();
    let names: Vec<String> = layout.shapes().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut out = GradCheck { checked: 0, max_rel: 0.0, worst: String::new() };
    for (t, name) in names.iter().enumerate() {
        for (i, &a) in analytic[t].iter().enumerate() {
            let orig = w.slices()[t][i];
            w.slices_mut()[t][i] = orig + FD_STEP;
            let up = batch_loss(&w, cfg, &batch, Some(&mut drop_rng())).unwrap().mean();
            w.slices_mut()[t][i] = orig - FD_STEP;
            let down = batch_loss(&w, cfg, &batch, Some(&mut drop_rng())).unwrap().mean();
            w.slices_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    out
}
