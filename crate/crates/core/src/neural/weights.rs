//! Parameter tensors of a translator and their canonical ordering.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::config::{Arch, CellKind, ModelConfig};
use super::real::Real;

/// Weights of one recurrent layer. Gate blocks are stacked along columns:
/// LSTM `[input, forget, candidate, output]`, GRU `[update, reset, candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<F> {
    pub w_x: Array2<F>,
    pub w_h: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams<F> {
    /// score = v · tanh(query W_query + key W_key)
    Additive {
        w_query: Array2<F>,
        w_key: Array2<F>,
        v: Array1<F>,
    },
    /// score = query W keyᵀ; output = tanh([context, query] W_c)
    General { w: Array2<F>, w_c: Array2<F> },
}

/// Sizes that fix every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub arch: Arch,
    pub cell: CellKind,
    pub hidden: usize,
    pub layers: usize,
    pub embed: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        Layout {
            arch: cfg.arch,
            cell: cfg.cell,
            hidden: cfg.cells,
            layers: cfg.layers,
            embed: cfg.embedding_dim,
            src_vocab,
            tgt_vocab,
        }
    }

    fn decoder_input(&self) -> usize {
        match self.arch {
            Arch::Ml => self.embed + self.hidden,
            Arch::Mc | Arch::Ms => self.embed,
        }
    }

    fn head_width(&self) -> usize {
        match self.arch {
            Arch::Ml => 2 * self.hidden,
            Arch::Mc | Arch::Ms => self.hidden,
        }
    }

    /// Every tensor as `(name, shape)`, in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let gh = self.cell.gates() * h;
        let mut out = vec![
            ("src_embed".to_string(), vec![self.src_vocab, self.embed]),
            ("tgt_embed".to_string(), vec![self.tgt_vocab, self.embed]),
        ];
        for (side, first) in [("encoder", self.embed), ("decoder", self.decoder_input())] {
            for l in 0..self.layers {
                let input = if l == 0 { first } else { h };
                out.push((format!("{side}.{l}.w_x"), vec![input, gh]));
                out.push((format!("{side}.{l}.w_h"), vec![h, gh]));
                out.push((format!("{side}.{l}.b"), vec![gh]));
            }
        }
        match self.arch {
            Arch::Mc => {}
            Arch::Ml => {
                out.push(("attention.w_query".into(), vec![h, h]));
                out.push(("attention.w_key".into(), vec![h, h]));
                out.push(("attention.v".into(), vec![h]));
            }
            Arch::Ms => {
                out.push(("attention.w".into(), vec![h, h]));
                out.push(("attention.w_c".into(), vec![2 * h, h]));
            }
        }
        out.push(("out.w".into(), vec![self.head_width(), self.tgt_vocab]));
        out.push(("out.b".into(), vec![self.tgt_vocab]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub layout: Layout,
    pub src_embed: Array2<F>,
    pub tgt_embed: Array2<F>,
    pub encoder: Vec<CellParams<F>>,
    pub decoder: Vec<CellParams<F>>,
    pub attention: Option<AttentionParams<F>>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

impl<F: Real> Weights<F> {
    /// Builds weights from flat row-major data supplied per tensor, in the
    /// order of [`Layout::shapes`].
    pub fn build(layout: Layout, mut make: impl FnMut(&str, &[usize]) -> Vec<F>) -> Self {
        let mut tensors = layout.shapes().into_iter().map(|(name, shape)| {
            let data = make(&name, &shape);
            assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor {name} size");
            (shape, data)
        });
        let t = &mut tensors;
        let src_embed = next_mat(t);
        let tgt_embed = next_mat(t);
        let encoder = (0..layout.layers).map(|_| next_cell(t)).collect();
        let decoder = (0..layout.layers).map(|_| next_cell(t)).collect();
        let attention = match layout.arch {
            Arch::Mc => None,
            Arch::Ml => Some(AttentionParams::Additive { w_query: next_mat(t), w_key: next_mat(t), v: next_vec(t) }),
            Arch::Ms => Some(AttentionParams::General { w: next_mat(t), w_c: next_mat(t) }),
        };
        let out_w = next_mat(t);
        let out_b = next_vec(t);
        Weights { layout, src_embed, tgt_embed, encoder, decoder, attention, out_w, out_b }
    }

    pub fn zeros(layout: Layout) -> Self {
        Weights::build(layout, |_, shape| vec![F::zero(); shape.iter().product()])
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(layout: Layout, scale: f64, rng: &mut R) -> Self {
        Weights::build(layout, |_, shape| {
            (0..shape.iter().product::<usize>())
                .map(|_| F::lit(rng.gen_range(-scale..=scale)))
                .collect()
        })
    }

    /// Flat views of every tensor, in canonical order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![slice(&self.src_embed), slice(&self.tgt_embed)];
        for c in self.encoder.iter().chain(&self.decoder) {
            out.extend([slice(&c.w_x), slice(&c.w_h), c.b.as_slice().expect("contiguous")]);
        }
        match &self.attention {
            None => {}
            Some(AttentionParams::Additive { w_query, w_key, v }) => {
                out.extend([slice(w_query), slice(w_key), v.as_slice().expect("contiguous")])
            }
            Some(AttentionParams::General { w, w_c }) => out.extend([slice(w), slice(w_c)]),
        }
        out.extend([slice(&self.out_w), self.out_b.as_slice().expect("contiguous")]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![slice_mut(&mut self.src_embed), slice_mut(&mut self.tgt_embed)];
        for c in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(slice_mut(&mut c.w_x));
            out.push(slice_mut(&mut c.w_h));
            out.push(c.b.as_slice_mut().expect("contiguous"));
        }
        match &mut self.attention {
            None => {}
            Some(AttentionParams::Additive { w_query, w_key, v }) => {
                out.push(slice_mut(w_query));
                out.push(slice_mut(w_key));
                out.push(v.as_slice_mut().expect("contiguous"));
            }
            Some(AttentionParams::General { w, w_c }) => {
                out.push(slice_mut(w));
                out.push(slice_mut(w_c));
            }
        }
        out.push(slice_mut(&mut self.out_w));
        out.push(self.out_b.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn convert<G: Real>(&self) -> Weights<G> {
        let flat = self.slices();
        let mut i = 0;
        Weights::build(self.layout, |_, _| {
            let v = flat[i].iter().map(|x| G::lit(x.to_f64_lossless())).collect();
            i += 1;
            v
        })
    }
}

type Tensor<F> = (Vec<usize>, Vec<F>);

fn next_mat<F>(t: &mut impl Iterator<Item = Tensor<F>>) -> Array2<F> {
    let (s, d) = t.next().expect("layout exhausted");
    Array2::from_shape_vec((s[0], s[1]), d).expect("tensor size")
}

fn next_vec<F>(t: &mut impl Iterator<Item = Tensor<F>>) -> Array1<F> {
    Array1::from_vec(t.next().expect("layout exhausted").1)
}

fn next_cell<F>(t: &mut impl Iterator<Item = Tensor<F>>) -> CellParams<F> {
    CellParams { w_x: next_mat(t), w_h: next_mat(t), b: next_vec(t) }
}

fn slice<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<F>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slices_follow_layout_order() {
        for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
            for cell in [CellKind::Lstm, CellKind::Gru] {
                let cfg = ModelConfig { arch, cell, cells: 5, layers: 2, embedding_dim: 3, ..Default::default() };
                let layout = Layout::new(&cfg, 7, 6);
                let w: Weights<f64> = Weights::uniform(layout, 0.08, &mut ChaCha8Rng::seed_from_u64(1));
                let shapes = layout.shapes();
                let slices = w.slices();
                assert_eq!(shapes.len(), slices.len());
                for ((_, shape), s) in shapes.iter().zip(&slices) {
                    assert_eq!(shape.iter().product::<usize>(), s.len());
                }
                assert!(slices.iter().flat_map(|s| s.iter()).all(|x| x.abs() <= 0.08));
            }
        }
    }
}
