//! Additive and multiplicative ("general") attention over encoder outputs.
//!
//! Keys are the encoder outputs laid out `[rows, source_len, hidden]`; the
//! source mask is `[rows, source_len]` with ones on real positions. A row
//! whose source is empty attends to nothing and gets a zero context.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayViewMut1};

use super::real::Real;

/// Softmax of `scores` over positions where `mask` is one; other positions
/// get weight zero.
pub fn masked_softmax<F: Real>(scores: ArrayView1<F>, mask: ArrayView1<F>, mut out: ArrayViewMut1<F>) {
    let mut max = F::neg_infinity();
    for (s, m) in scores.iter().zip(mask) {
        if *m > F::zero() && *s > max {
            max = *s;
        }
    }
    if max == F::neg_infinity() {
        out.fill(F::zero());
        return;
    }
    let mut sum = F::zero();
    for ((o, s), m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if *m > F::zero() { (*s - max).exp() } else { F::zero() };
        sum += *o;
    }
    out.mapv_inplace(|v| v / sum);
}

/// Softmax backward: given weights `a` and upstream `da`, returns the
/// gradient with respect to the scores.
fn softmax_backward<F: Real>(a: ArrayView1<F>, da: ArrayView1<F>) -> Array1<F> {
    let dot = a.iter().zip(da).fold(F::zero(), |acc, (x, y)| acc + *x * *y);
    Array1::from_shape_fn(a.len(), |j| a[j] * (da[j] - dot))
}

pub struct AdditiveCache<F> {
    query: Array2<F>,
    q1: Array2<F>,
    pub alpha: Array2<F>,
}

/// `key_proj` holds `keys · w_key`, computed once per source.
pub fn additive_forward<F: Real>(
    w_query: &Array2<F>,
    v: &Array1<F>,
    query: &Array2<F>,
    keys: &Array3<F>,
    key_proj: &Array3<F>,
    mask: &Array2<F>,
) -> (Array2<F>, AdditiveCache<F>) {
    let (rows, src_len, hidden) = keys.dim();
    let att = v.len();
    let q1 = query.dot(w_query);
    let mut alpha = Array2::zeros((rows, src_len));
    let mut ctx = Array2::zeros((rows, hidden));
    let mut scores = Array1::zeros(src_len);
    for b in 0..rows {
        for j in 0..src_len {
            if mask[[b, j]] > F::zero() {
                let mut e = F::zero();
                for a in 0..att {
                    e += v[a] * (q1[[b, a]] + key_proj[[b, j, a]]).tanh();
                }
                scores[j] = e;
            }
        }
        masked_softmax(scores.view(), mask.row(b), alpha.row_mut(b));
        let mut c = ctx.row_mut(b);
        for j in 0..src_len {
            let w = alpha[[b, j]];
            if w != F::zero() {
                c.scaled_add(w, &keys.slice(s![b, j, ..]));
            }
        }
    }
    (ctx, AdditiveCache { query: query.clone(), q1, alpha })
}

/// Backward of [`additive_forward`]. Accumulates into the parameter
/// gradients and into `dkeys` / `dkey_proj`; returns the query gradient.
#[allow(clippy::too_many_arguments)]
pub fn additive_backward<F: Real>(
    w_query: &Array2<F>,
    v: &Array1<F>,
    keys: &Array3<F>,
    key_proj: &Array3<F>,
    cache: &AdditiveCache<F>,
    dctx: &Array2<F>,
    dw_query: &mut Array2<F>,
    dv: &mut Array1<F>,
    dkeys: &mut Array3<F>,
    dkey_proj: &mut Array3<F>,
) -> Array2<F> {
    let (rows, src_len, _) = keys.dim();
    let att = v.len();
    let mut dq1 = Array2::zeros((rows, att));
    let mut dalpha = Array1::zeros(src_len);
    for b in 0..rows {
        let d = dctx.row(b);
        for j in 0..src_len {
            let w = cache.alpha[[b, j]];
            dalpha[j] = keys.slice(s![b, j, ..]).dot(&d);
            if w != F::zero() {
                dkeys.slice_mut(s![b, j, ..]).scaled_add(w, &d);
            }
        }
        let de = softmax_backward(cache.alpha.row(b), dalpha.view());
        for j in 0..src_len {
            if cache.alpha[[b, j]] == F::zero() && de[j] == F::zero() {
                continue;
            }
            for a in 0..att {
                let t = (cache.q1[[b, a]] + key_proj[[b, j, a]]).tanh();
                dv[a] += de[j] * t;
                let dp = de[j] * v[a] * (F::one() - t * t);
                dq1[[b, a]] += dp;
                dkey_proj[[b, j, a]] += dp;
            }
        }
    }
    general_mat_mul(F::one(), &cache.query.t(), &dq1, F::one(), dw_query);
    dq1.dot(&w_query.t())
}

pub struct GeneralCache<F> {
    queries: Array2<F>,
    qw: Array2<F>,
    /// `[rows, steps, source_len]`
    pub alpha: Array3<F>,
    concat: Array2<F>,
    out: Array2<F>,
}

/// Attention for `steps` time-major queries (`queries` is
/// `[steps * rows, hidden]`, row `t * rows + b`). Returns the attentional
/// hidden states `tanh([context, query] · w_c)`.
pub fn general_forward<F: Real>(
    w: &Array2<F>,
    w_c: &Array2<F>,
    queries: &Array2<F>,
    keys: &Array3<F>,
    mask: &Array2<F>,
) -> (Array2<F>, GeneralCache<F>) {
    let (rows, src_len, hidden) = keys.dim();
    let steps = queries.nrows() / rows;
    let qw = queries.dot(w);
    let qw3 = qw.view().into_shape_with_order((steps, rows, hidden)).expect("time-major queries");
    let mut alpha = Array3::zeros((rows, steps, src_len));
    let mut concat = Array2::zeros((steps * rows, 2 * hidden));
    for b in 0..rows {
        let k = keys.slice(s![b, .., ..]);
        let scores = qw3.slice(s![.., b, ..]).dot(&k.t());
        let mut a = alpha.slice_mut(s![b, .., ..]);
        for t in 0..steps {
            masked_softmax(scores.row(t), mask.row(b), a.row_mut(t));
        }
        let ctx = a.dot(&k);
        for t in 0..steps {
            concat.slice_mut(s![t * rows + b, 0..hidden]).assign(&ctx.row(t));
        }
    }
    concat.slice_mut(s![.., hidden..]).assign(queries);
    let out = concat.dot(w_c).mapv_into(|x| x.tanh());
    let cache = GeneralCache { queries: queries.clone(), qw, alpha, concat, out: out.clone() };
    (out, cache)
}

#[allow(clippy::too_many_arguments)]
pub fn general_backward<F: Real>(
    w: &Array2<F>,
    w_c: &Array2<F>,
    keys: &Array3<F>,
    cache: &GeneralCache<F>,
    dout: &Array2<F>,
    dw: &mut Array2<F>,
    dw_c: &mut Array2<F>,
    dkeys: &mut Array3<F>,
) -> Array2<F> {
    let (rows, _, hidden) = keys.dim();
    let steps = cache.queries.nrows() / rows;
    let mut dpre = dout.clone();
    dpre.zip_mut_with(&cache.out, |d, &o| *d *= F::one() - o * o);
    general_mat_mul(F::one(), &cache.concat.t(), &dpre, F::one(), dw_c);
    let dconcat = dpre.dot(&w_c.t());
    let mut dq = dconcat.slice(s![.., hidden..]).to_owned();
    let dctx = dconcat.slice(s![.., 0..hidden]).to_owned();
    let dctx3 = dctx.view().into_shape_with_order((steps, rows, hidden)).expect("time-major");
    let qw3 = cache.qw.view().into_shape_with_order((steps, rows, hidden)).expect("time-major");
    let mut dqw = Array2::zeros((steps * rows, hidden));
    for b in 0..rows {
        let k = keys.slice(s![b, .., ..]);
        let a = cache.alpha.slice(s![b, .., ..]);
        let dc = dctx3.slice(s![.., b, ..]);
        let da = dc.dot(&k.t());
        let mut dk = dkeys.slice_mut(s![b, .., ..]);
        general_mat_mul(F::one(), &a.t(), &dc, F::one(), &mut dk);
        let mut ds = Array2::zeros(da.dim());
        for t in 0..steps {
            ds.row_mut(t).assign(&softmax_backward(a.row(t), da.row(t)));
        }
        general_mat_mul(F::one(), &ds.t(), &qw3.slice(s![.., b, ..]), F::one(), &mut dk);
        let dqw_b = ds.dot(&k);
        for t in 0..steps {
            dqw.row_mut(t * rows + b).assign(&dqw_b.row(t));
        }
    }
    general_mat_mul(F::one(), &cache.queries.t(), &dqw, F::one(), dw);
    general_mat_mul(F::one(), &dqw, &w.t(), F::one(), &mut dq);
    dq
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_ignores_masked_positions() {
        let scores = Array1::from_vec(vec![1.0, 50.0, 2.0]);
        let mask = Array1::from_vec(vec![1.0, 0.0, 1.0]);
        let mut out = Array1::zeros(3);
        masked_softmax(scores.view(), mask.view(), out.view_mut());
        assert_eq!(out[1], 0.0);
        assert!((out.sum() - 1.0f64).abs() < 1e-12);
        masked_softmax(scores.view(), Array1::zeros(3).view(), out.view_mut());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_weights_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (rows, src_len, hidden) = (3, 7, 5);
        let mut r = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0f64));
        let w = r((hidden, hidden));
        let w_c = r((2 * hidden, hidden));
        let queries = r((4 * rows, hidden));
        let w_query = r((hidden, hidden));
        let query = r((rows, hidden));
        let keys = Array3::from_shape_fn((rows, src_len, hidden), |(b, j, h)| ((b + 2 * j + 3 * h) as f64).sin());
        let key_proj = Array3::from_shape_fn((rows, src_len, hidden), |(b, j, h)| ((b * j + h) as f64).cos());
        let v = Array1::from_shape_fn(hidden, |a| a as f64 / 5.0);
        let mask = Array2::from_shape_fn((rows, src_len), |(b, j)| if j < src_len - b { 1.0 } else { 0.0 });
        let (_, cache) = general_forward(&w, &w_c, &queries, &keys, &mask);
        for b in 0..rows {
            for t in 0..4 {
                let row = cache.alpha.slice(s![b, t, ..]);
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().skip(src_len - b).all(|&x| x == 0.0));
            }
        }
        let (_, cache) = additive_forward(&w_query, &v, &query, &keys, &key_proj, &mask);
        for b in 0..rows {
            assert!((cache.alpha.row(b).sum() - 1.0).abs() < 1e-6);
        }
    }
}
