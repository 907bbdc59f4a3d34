//! Batched teacher-forced forward pass, loss and backpropagation through
//! time for the three architectures.
//!
//! Sequences are time-major: row `t * rows + b` holds step `t` of batch row
//! `b`. The first layer of the encoder and of the decoder read symbols, so
//! their input projections come from per-symbol tables.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AdditiveCache, GeneralCache};
use super::cell::{self, CellState, StepCache};
use super::config::{Arch, CellKind, ModelConfig};
use super::real::Real;
use super::vocab::{END, PAD, START};
use super::weights::{AttentionParams, CellParams, Weights};
use super::NeuralError;

/// One encoded training pair. `target` holds annotation indices without the
/// start and end symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Right-padded, time-major batch.
#[derive(Debug, Clone)]
pub struct PreparedBatch<F> {
    pub rows: usize,
    pub src_len: usize,
    pub dec_len: usize,
    /// `[src_len * rows]`
    pub src_ids: Vec<usize>,
    /// `[src_len, rows]`
    pub src_mask: Array2<F>,
    /// `[rows, src_len]`
    pub src_mask_rows: Array2<F>,
    /// Decoder inputs (START then the gold target), `[dec_len * rows]`.
    pub dec_in: Vec<usize>,
    /// Decoder targets (gold target then END), `[dec_len * rows]`.
    pub dec_out: Vec<usize>,
    /// `[dec_len, rows]`
    pub dec_mask: Array2<F>,
    /// Number of non-padding target positions.
    pub tokens: usize,
}

impl<F: Real> PreparedBatch<F> {
    pub fn new(examples: &[&Example], reverse_source: bool) -> Self {
        let rows = examples.len();
        let src_len = examples.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let dec_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let mut src_ids = vec![PAD; src_len * rows];
        let mut src_mask = Array2::zeros((src_len, rows));
        for (b, e) in examples.iter().enumerate() {
            let n = e.source.len();
            for t in 0..n {
                let id = if reverse_source { e.source[n - 1 - t] } else { e.source[t] };
                src_ids[t * rows + b] = id;
                src_mask[[t, b]] = F::one();
            }
        }
        let mut dec_in = vec![PAD; dec_len * rows];
        let mut dec_out = vec![PAD; dec_len * rows];
        let mut dec_mask = Array2::zeros((dec_len, rows));
        let mut tokens = 0;
        for (b, e) in examples.iter().enumerate() {
            let n = e.target.len();
            for t in 0..=n {
                dec_in[t * rows + b] = if t == 0 { START } else { e.target[t - 1] };
                dec_out[t * rows + b] = if t < n { e.target[t] } else { END };
                dec_mask[[t, b]] = F::one();
                tokens += 1;
            }
        }
        PreparedBatch {
            rows,
            src_len,
            dec_len,
            src_ids,
            src_mask_rows: src_mask.t().to_owned(),
            src_mask,
            dec_in,
            dec_out,
            dec_mask,
            tokens,
        }
    }
}

pub(crate) fn gather<F: Real>(table: &Array2<F>, ids: &[usize]) -> Array2<F> {
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).assign(&table.row(id));
    }
    out
}

fn scatter_add<F: Real>(table: &mut Array2<F>, ids: &[usize], grads: ArrayView2<F>) {
    for (r, &id) in ids.iter().enumerate() {
        table.row_mut(id).zip_mut_with(&grads.row(r), |a, &b| *a += b);
    }
}

fn dropout_mask<F: Real, R: Rng + ?Sized>(rng: &mut R, rate: f64, rows: usize, cols: usize) -> Array2<F> {
    let keep = F::lit(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < rate { F::zero() } else { keep })
}

fn rows_of<F>(a: &Array2<F>, t: usize, rows: usize) -> ArrayView2<'_, F> {
    a.slice(s![t * rows..(t + 1) * rows, ..])
}

/// Per-symbol input projections (`embedding · w_x + b`) of the first
/// encoder and decoder layers. For additive attention only the embedding
/// columns of the decoder input take part; the context part is projected
/// per step.
pub(crate) struct Tables<F> {
    pub src: Array2<F>,
    pub tgt: Array2<F>,
}

impl<F: Real> Tables<F> {
    pub fn new(w: &Weights<F>) -> Self {
        let embed = w.layout.embed;
        let enc = &w.encoder[0];
        let dec = &w.decoder[0];
        let project = |emb: &Array2<F>, w_x: ArrayView2<F>, b: &ndarray::Array1<F>| {
            let mut out = Array2::from_shape_fn((emb.nrows(), b.len()), |(_, j)| b[j]);
            general_mat_mul(F::one(), emb, &w_x, F::one(), &mut out);
            out
        };
        Tables {
            src: project(&w.src_embed, enc.w_x.view(), &enc.b),
            tgt: project(&w.tgt_embed, dec.w_x.slice(s![0..embed, ..]), &dec.b),
        }
    }
}

/// Accumulates table gradients into the embedding, `w_x` and bias
/// gradients.
fn tables_backward<F: Real>(w: &Weights<F>, g: &mut Weights<F>, d_src: &Array2<F>, d_tgt: &Array2<F>) {
    let embed = w.layout.embed;
    let enc = &w.encoder[0];
    general_mat_mul(F::one(), &w.src_embed.t(), d_src, F::one(), &mut g.encoder[0].w_x);
    g.encoder[0].b += &d_src.sum_axis(Axis(0));
    general_mat_mul(F::one(), d_src, &enc.w_x.t(), F::one(), &mut g.src_embed);
    let dec_wx = w.decoder[0].w_x.slice(s![0..embed, ..]);
    {
        let mut gw = g.decoder[0].w_x.slice_mut(s![0..embed, ..]);
        general_mat_mul(F::one(), &w.tgt_embed.t(), d_tgt, F::one(), &mut gw);
    }
    g.decoder[0].b += &d_tgt.sum_axis(Axis(0));
    general_mat_mul(F::one(), d_tgt, &dec_wx.t(), F::one(), &mut g.tgt_embed);
}

struct LayerTape<F> {
    caches: Vec<StepCache<F>>,
    /// Dropout mask applied to this layer's outputs.
    drop: Option<Array2<F>>,
    /// Input of layers above the first (the dropped outputs below).
    input: Option<Array2<F>>,
}

/// A stack of recurrent layers run layer by layer over a whole sequence.
struct Stack<F> {
    /// Top-layer outputs after dropout, `[steps * rows, hidden]`.
    outputs: Array2<F>,
    finals: Vec<CellState<F>>,
    tapes: Vec<LayerTape<F>>,
}

#[allow(clippy::too_many_arguments)]
fn run_stack<F: Real>(
    kind: CellKind,
    layers: &[CellParams<F>],
    table: &Array2<F>,
    ids: &[usize],
    mask: &Array2<F>,
    init: Option<&[CellState<F>]>,
    rate: f64,
    mut dropout: Option<&mut ChaCha8Rng>,
    drop_top: bool,
    keep: bool,
) -> Result<Stack<F>, NeuralError> {
    let (steps, rows) = mask.dim();
    let hidden = layers[0].w_h.nrows();
    let mut finals = Vec::with_capacity(layers.len());
    let mut tapes = Vec::with_capacity(layers.len());
    let mut below: Option<Array2<F>> = None;
    for (l, p) in layers.iter().enumerate() {
        let xw = match &below {
            None => gather(table, ids),
            Some(x) => cell::input_projection(p, x.view())?,
        };
        let mut state = init.map_or_else(|| CellState::zeros(kind, rows, hidden), |s| s[l].clone());
        let mut out = Array2::zeros((steps * rows, hidden));
        let mut caches = Vec::with_capacity(if keep { steps } else { 0 });
        for t in 0..steps {
            let (next, cache) = cell::forward_step(kind, p, rows_of(&xw, t, rows), &state, Some(mask.row(t)), keep)?;
            out.slice_mut(s![t * rows..(t + 1) * rows, ..]).assign(&next.h);
            caches.extend(cache);
            state = next;
        }
        finals.push(state);
        let is_top = l + 1 == layers.len();
        let drop = match dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 && (drop_top || !is_top) => {
                let m = dropout_mask(rng, rate, steps * rows, hidden);
                out *= &m;
                Some(m)
            }
            _ => None,
        };
        let input = if keep { below.take() } else { None };
        tapes.push(LayerTape { caches, drop, input });
        below = Some(out);
    }
    Ok(Stack { outputs: below.expect("at least one layer"), finals, tapes })
}

/// Backward through [`run_stack`]. `d_out` is the gradient of the dropped
/// top outputs and `d_final` that of each layer's final state. Parameter
/// gradients go to `grads`, first-layer input gradients to `d_table`.
/// Returns the gradient of each layer's initial state.
#[allow(clippy::too_many_arguments)]
fn backprop_stack<F: Real>(
    kind: CellKind,
    layers: &[CellParams<F>],
    grads: &mut [CellParams<F>],
    stack: &Stack<F>,
    d_table: &mut Array2<F>,
    ids: &[usize],
    mask: &Array2<F>,
    mut d_out: Array2<F>,
    d_final: Vec<(Array2<F>, Option<Array2<F>>)>,
) -> Vec<(Array2<F>, Option<Array2<F>>)> {
    let (steps, rows) = mask.dim();
    let gh = layers[0].w_h.ncols();
    let mut d_init: Vec<(Array2<F>, Option<Array2<F>>)> = Vec::with_capacity(layers.len());
    for ((l, p), (mut dh, mut dc)) in layers.iter().enumerate().zip(d_final).rev() {
        let tape = &stack.tapes[l];
        if let Some(m) = &tape.drop {
            d_out *= m;
        }
        let mut dpre_all = Array2::zeros((steps * rows, gh));
        for t in (0..steps).rev() {
            dh += &rows_of(&d_out, t, rows);
            let g = cell::backward_step(kind, p, &tape.caches[t], Some(mask.row(t)), &dh, dc.as_ref(), &mut grads[l].w_h);
            dpre_all.slice_mut(s![t * rows..(t + 1) * rows, ..]).assign(&g.dpre);
            dh = g.dh_prev;
            dc = g.dc_prev;
        }
        d_init.push((dh, dc));
        match &tape.input {
            None => scatter_add(d_table, ids, dpre_all.view()),
            Some(x) => d_out = cell::input_backward(p, x.view(), dpre_all.view(), &mut grads[l]),
        }
    }
    d_init.reverse();
    d_init
}

fn zero_state_grads<F: Real>(states: &[CellState<F>]) -> Vec<(Array2<F>, Option<Array2<F>>)> {
    states
        .iter()
        .map(|s| (Array2::zeros(s.h.dim()), s.c.as_ref().map(|c| Array2::zeros(c.dim()))))
        .collect()
}

/// Encoder outputs consumed by the decoder.
pub(crate) struct Encoded<F> {
    /// Top-layer outputs `[rows, src_len, hidden]` (empty for MC).
    pub keys: Array3<F>,
    /// `keys · w_key` for additive attention.
    pub key_proj: Option<Array3<F>>,
    pub mask_rows: Array2<F>,
    pub finals: Vec<CellState<F>>,
}

fn to_batch_major<F: Real>(a: &Array2<F>, steps: usize, rows: usize) -> Array3<F> {
    let hidden = a.ncols();
    let v = a.view().into_shape_with_order((steps, rows, hidden)).expect("time-major block");
    v.permuted_axes([1, 0, 2]).as_standard_layout().into_owned()
}

fn to_time_major<F: Real>(a: &Array3<F>) -> Array2<F> {
    let (rows, steps, hidden) = a.dim();
    let v = a.view().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
    v.into_shape_with_order((steps * rows, hidden)).expect("standard layout")
}

#[allow(clippy::too_many_arguments)]
fn encode_with_tape<F: Real>(
    w: &Weights<F>,
    cfg: &ModelConfig,
    tables: &Tables<F>,
    src_ids: &[usize],
    src_mask: &Array2<F>,
    mask_rows: Array2<F>,
    dropout: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<(Encoded<F>, Stack<F>), NeuralError> {
    let (src_len, rows) = src_mask.dim();
    let attends = cfg.arch != Arch::Mc;
    let stack = run_stack(cfg.cell, &w.encoder, &tables.src, src_ids, src_mask, None, cfg.dropout, dropout, attends, keep)?;
    let hidden = cfg.cells;
    let (keys, key_proj) = if attends {
        let keys = to_batch_major(&stack.outputs, src_len, rows);
        let key_proj = match &w.attention {
            Some(AttentionParams::Additive { w_key, .. }) => {
                let flat = keys.view().into_shape_with_order((rows * src_len, hidden)).expect("standard layout");
                Some(flat.dot(w_key).into_shape_with_order((rows, src_len, w_key.ncols())).expect("shape"))
            }
            _ => None,
        };
        (keys, key_proj)
    } else {
        (Array3::zeros((rows, 0, hidden)), None)
    };
    let encoded = Encoded { keys, key_proj, mask_rows, finals: stack.finals.clone() };
    Ok((encoded, stack))
}

/// Encodes a time-major batch of source symbols for inference.
pub(crate) fn encode<F: Real>(
    w: &Weights<F>,
    cfg: &ModelConfig,
    tables: &Tables<F>,
    src_ids: &[usize],
    src_mask: &Array2<F>,
) -> Result<Encoded<F>, NeuralError> {
    let mask_rows = src_mask.t().to_owned();
    Ok(encode_with_tape(w, cfg, tables, src_ids, src_mask, mask_rows, None, false)?.0)
}

/// Result of one decoder step for all rows.
pub(crate) struct DecoderStep<F> {
    /// Top-layer output after dropout.
    pub top: Array2<F>,
    /// Attention context fed into this step (ML only).
    pub context: Option<Array2<F>>,
    caches: Vec<StepCache<F>>,
    /// Inputs of layers above the first.
    inputs: Vec<Array2<F>>,
    drops: Vec<Option<Array2<F>>>,
    additive: Option<AdditiveCache<F>>,
}

/// One decoder step over all rows, feeding `tokens`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_step<F: Real>(
    w: &Weights<F>,
    cfg: &ModelConfig,
    tables: &Tables<F>,
    enc: &Encoded<F>,
    states: &mut [CellState<F>],
    tokens: &[usize],
    mask: Option<ArrayView1<F>>,
    mut dropout: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<DecoderStep<F>, NeuralError> {
    let rows = tokens.len();
    let mut xw = gather(&tables.tgt, tokens);
    let (context, additive) = match &w.attention {
        Some(AttentionParams::Additive { w_query, v, .. }) => {
            let query = &states[cfg.layers - 1].h;
            let key_proj = enc.key_proj.as_ref().expect("additive attention has key projection");
            let (ctx, cache) = attention::additive_forward(w_query, v, query, &enc.keys, key_proj, &enc.mask_rows);
            let w_ctx = w.decoder[0].w_x.slice(s![cfg.embedding_dim.., ..]);
            general_mat_mul(F::one(), &ctx, &w_ctx, F::one(), &mut xw);
            (Some(ctx), Some(cache))
        }
        _ => (None, None),
    };
    let mut caches = Vec::with_capacity(cfg.layers);
    let mut inputs = Vec::new();
    let mut drops = Vec::with_capacity(cfg.layers);
    let mut x: Option<Array2<F>> = None;
    for (l, (p, state)) in w.decoder.iter().zip(states.iter_mut()).enumerate() {
        let proj = match x.take() {
            None => std::mem::replace(&mut xw, Array2::zeros((0, 0))),
            Some(input) => {
                let proj = cell::input_projection(p, input.view())?;
                if keep {
                    inputs.push(input);
                }
                proj
            }
        };
        let (next, cache) = cell::forward_step(cfg.cell, p, proj.view(), state, mask, keep)?;
        caches.extend(cache);
        let mut out = next.h.clone();
        *state = next;
        match dropout.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let m = dropout_mask(rng, cfg.dropout, rows, cfg.cells);
                out *= &m;
                drops.push(Some(m));
            }
            _ => drops.push(None),
        }
        debug_assert!(l < cfg.layers);
        x = Some(out);
    }
    Ok(DecoderStep { top: x.expect("at least one layer"), context, caches, inputs, drops, additive })
}

/// Output features for time-major decoder outputs `tops` (`[steps * rows,
/// hidden]`).
pub(crate) fn head_features<F: Real>(
    w: &Weights<F>,
    tops: &Array2<F>,
    contexts: Option<&Array2<F>>,
    enc: &Encoded<F>,
) -> (Array2<F>, Option<GeneralCache<F>>) {
    match &w.attention {
        None => (tops.clone(), None),
        Some(AttentionParams::Additive { .. }) => {
            let ctx = contexts.expect("additive attention supplies contexts");
            (ndarray::concatenate(Axis(1), &[tops.view(), ctx.view()]).expect("same rows"), None)
        }
        Some(AttentionParams::General { w: wa, w_c }) => {
            let (out, cache) = attention::general_forward(wa, w_c, tops, &enc.keys, &enc.mask_rows);
            (out, Some(cache))
        }
    }
}

pub(crate) fn logits<F: Real>(w: &Weights<F>, features: &Array2<F>) -> Array2<F> {
    let mut out = Array2::from_shape_fn((features.nrows(), w.out_b.len()), |(_, j)| w.out_b[j]);
    general_mat_mul(F::one(), features, &w.out_w, F::one(), &mut out);
    out
}

/// Row-wise softmax in place; returns the per-row log normalizers.
pub(crate) fn softmax_rows<F: Real>(scores: &mut Array2<F>) -> Vec<F> {
    let mut logz = Vec::with_capacity(scores.nrows());
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
        logz.push(max + sum.ln());
    }
    logz
}

/// Summed cross-entropy over non-padding positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub loss_sum: f64,
    pub tokens: usize,
}

impl BatchLoss {
    pub fn mean(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }
}

enum DecoderTape<F> {
    Stack(Stack<F>),
    Steps(Vec<DecoderStep<F>>),
}

struct Tape<F> {
    tables: Tables<F>,
    encoder: Stack<F>,
    encoded: Encoded<F>,
    decoder: DecoderTape<F>,
    general: Option<GeneralCache<F>>,
    features: Array2<F>,
    probs: Array2<F>,
}

fn run<F: Real>(
    w: &Weights<F>,
    cfg: &ModelConfig,
    batch: &PreparedBatch<F>,
    mut dropout: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<(BatchLoss, Option<Tape<F>>), NeuralError> {
    let rows = batch.rows;
    let tables = Tables::new(w);
    let (enc, enc_stack) = encode_with_tape(
        w,
        cfg,
        &tables,
        &batch.src_ids,
        &batch.src_mask,
        batch.src_mask_rows.clone(),
        dropout.as_deref_mut(),
        keep,
    )?;
    let (tops, contexts, decoder) = if cfg.arch == Arch::Ml {
        let mut states = enc.finals.clone();
        let mut steps = Vec::with_capacity(batch.dec_len);
        let mut tops = Array2::zeros((batch.dec_len * rows, cfg.cells));
        let mut contexts = Array2::zeros((batch.dec_len * rows, cfg.cells));
        for t in 0..batch.dec_len {
            let step = decoder_step(
                w,
                cfg,
                &tables,
                &enc,
                &mut states,
                &batch.dec_in[t * rows..(t + 1) * rows],
                Some(batch.dec_mask.row(t)),
                dropout.as_deref_mut(),
                keep,
            )?;
            tops.slice_mut(s![t * rows..(t + 1) * rows, ..]).assign(&step.top);
            contexts.slice_mut(s![t * rows..(t + 1) * rows, ..]).assign(step.context.as_ref().expect("additive context"));
            if keep {
                steps.push(step);
            }
        }
        (tops, Some(contexts), DecoderTape::Steps(steps))
    } else {
        let stack = run_stack(
            cfg.cell,
            &w.decoder,
            &tables.tgt,
            &batch.dec_in,
            &batch.dec_mask,
            Some(&enc.finals),
            cfg.dropout,
            dropout,
            true,
            keep,
        )?;
        (stack.outputs.clone(), None, DecoderTape::Stack(stack))
    };
    let (features, general) = head_features(w, &tops, contexts.as_ref(), &enc);
    let mut probs = logits(w, &features);
    let scores = probs.clone();
    let logz = softmax_rows(&mut probs);
    let mut loss_sum = 0.0;
    for t in 0..batch.dec_len {
        for b in 0..rows {
            if batch.dec_mask[[t, b]] > F::zero() {
                let r = t * rows + b;
                loss_sum += (logz[r] - scores[[r, batch.dec_out[r]]]).to_f64_lossless();
            }
        }
    }
    let loss = BatchLoss { loss_sum, tokens: batch.tokens };
    let tape = keep.then(|| Tape { tables, encoder: enc_stack, encoded: enc, decoder, general, features, probs });
    Ok((loss, tape))
}

/// Teacher-forced loss without gradients.
pub fn batch_loss<F: Real>(
    w: &Weights<F>,
    cfg: &ModelConfig,
    batch: &PreparedBatch<F>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss, NeuralError> {
    Ok(run(w, cfg, batch, dropout, false)?.0)
}

/// Loss and gradients of the mean per-token loss.
pub fn batch_gradients<F: Real>(
    w: &Weights<F>,
    cfg: &ModelConfig,
    batch: &PreparedBatch<F>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(BatchLoss, Weights<F>), NeuralError> {
    let (loss, tape) = run(w, cfg, batch, dropout, true)?;
    let grads = backprop(w, cfg, batch, tape.expect("kept"));
    Ok((loss, grads))
}

fn backprop<F: Real>(w: &Weights<F>, cfg: &ModelConfig, batch: &PreparedBatch<F>, tape: Tape<F>) -> Weights<F> {
    let rows = batch.rows;
    let hidden = cfg.cells;
    let embed = cfg.embedding_dim;
    let layers = cfg.layers;
    let mut g = Weights::zeros(w.layout);
    let mut d_src_table = Array2::zeros(tape.tables.src.dim());
    let mut d_tgt_table = Array2::zeros(tape.tables.tgt.dim());
    let scale = F::lit(1.0 / batch.tokens.max(1) as f64);

    let mut dlogits = tape.probs;
    for t in 0..batch.dec_len {
        for b in 0..rows {
            let r = t * rows + b;
            let mut row = dlogits.row_mut(r);
            if batch.dec_mask[[t, b]] > F::zero() {
                row[batch.dec_out[r]] -= F::one();
                row *= scale;
            } else {
                row.fill(F::zero());
            }
        }
    }
    general_mat_mul(F::one(), &tape.features.t(), &dlogits, F::zero(), &mut g.out_w);
    g.out_b = dlogits.sum_axis(Axis(0));
    let dfeatures = dlogits.dot(&w.out_w.t());

    let enc = &tape.encoded;
    let mut dkeys: Array3<F> = Array3::zeros(enc.keys.dim());
    let (dtops, dcontexts) = match (&w.attention, &mut g.attention) {
        (None, _) => (dfeatures, None),
        (Some(AttentionParams::Additive { .. }), _) => (
            dfeatures.slice(s![.., 0..hidden]).to_owned(),
            Some(dfeatures.slice(s![.., hidden..]).to_owned()),
        ),
        (Some(AttentionParams::General { w: wa, w_c }), Some(AttentionParams::General { w: dwa, w_c: dw_c })) => {
            let cache = tape.general.as_ref().expect("general attention cache");
            let dq = attention::general_backward(wa, w_c, &enc.keys, cache, &dfeatures, dwa, dw_c, &mut dkeys);
            (dq, None)
        }
        _ => unreachable!("gradient layout mirrors weights"),
    };

    let d_dec_init = match &tape.decoder {
        DecoderTape::Stack(stack) => backprop_stack(
            cfg.cell,
            &w.decoder,
            &mut g.decoder,
            stack,
            &mut d_tgt_table,
            &batch.dec_in,
            &batch.dec_mask,
            dtops,
            zero_state_grads(&enc.finals),
        ),
        DecoderTape::Steps(steps) => {
            let mut dkey_proj = Array3::zeros(enc.key_proj.as_ref().expect("key projection").dim());
            let mut state_grads = zero_state_grads(&enc.finals);
            let w_ctx = w.decoder[0].w_x.slice(s![embed.., ..]);
            for t in (0..batch.dec_len).rev() {
                let step = &steps[t];
                let mask = Some(batch.dec_mask.row(t));
                let mut gtop = rows_of(&dtops, t, rows).to_owned();
                if let Some(m) = &step.drops[layers - 1] {
                    gtop *= m;
                }
                state_grads[layers - 1].0 += &gtop;
                let mut dctx = rows_of(dcontexts.as_ref().expect("additive"), t, rows).to_owned();
                for l in (0..layers).rev() {
                    let (dh, dc) = &state_grads[l];
                    let sg = cell::backward_step(cfg.cell, &w.decoder[l], &step.caches[l], mask, dh, dc.as_ref(), &mut g.decoder[l].w_h);
                    state_grads[l] = (sg.dh_prev, sg.dc_prev);
                    if l > 0 {
                        let mut dx = cell::input_backward(&w.decoder[l], step.inputs[l - 1].view(), sg.dpre.view(), &mut g.decoder[l]);
                        if let Some(m) = &step.drops[l - 1] {
                            dx *= m;
                        }
                        state_grads[l - 1].0 += &dx;
                    } else {
                        scatter_add(&mut d_tgt_table, &batch.dec_in[t * rows..(t + 1) * rows], sg.dpre.view());
                        let ctx = step.context.as_ref().expect("additive context");
                        let mut gw_ctx = g.decoder[0].w_x.slice_mut(s![embed.., ..]);
                        general_mat_mul(F::one(), &ctx.t(), &sg.dpre, F::one(), &mut gw_ctx);
                        general_mat_mul(F::one(), &sg.dpre, &w_ctx.t(), F::one(), &mut dctx);
                    }
                }
                if let (
                    Some(AttentionParams::Additive { w_query, v, .. }),
                    Some(AttentionParams::Additive { w_query: dwq, v: dv, .. }),
                ) = (&w.attention, &mut g.attention)
                {
                    let dquery = attention::additive_backward(
                        w_query,
                        v,
                        &enc.keys,
                        enc.key_proj.as_ref().expect("key projection"),
                        step.additive.as_ref().expect("additive cache"),
                        &dctx,
                        dwq,
                        dv,
                        &mut dkeys,
                        &mut dkey_proj,
                    );
                    state_grads[layers - 1].0 += &dquery;
                }
            }
            if let (Some(AttentionParams::Additive { w_key, .. }), Some(AttentionParams::Additive { w_key: dw_key, .. })) =
                (&w.attention, &mut g.attention)
            {
                let src_len = batch.src_len;
                let att = w_key.ncols();
                let keys = enc.keys.view().into_shape_with_order((rows * src_len, hidden)).expect("standard layout");
                let dkp = dkey_proj.view().into_shape_with_order((rows * src_len, att)).expect("standard layout");
                general_mat_mul(F::one(), &keys.t(), &dkp, F::one(), dw_key);
                let extra = dkp.dot(&w_key.t()).into_shape_with_order((rows, src_len, hidden)).expect("shape");
                dkeys += &extra;
            }
            state_grads
        }
    };

    let d_enc_out = if enc.keys.len_of(Axis(1)) > 0 {
        to_time_major(&dkeys)
    } else {
        Array2::zeros((batch.src_len * rows, hidden))
    };
    backprop_stack(
        cfg.cell,
        &w.encoder,
        &mut g.encoder,
        &tape.encoder,
        &mut d_src_table,
        &batch.src_ids,
        &batch.src_mask,
        d_enc_out,
        d_dec_init,
    );
    tables_backward(w, &mut g, &d_src_table, &d_tgt_table);
    g
}
