//! Single time steps of LSTM and GRU layers over a batch of rows, with the
//! matching backward steps.
//!
//! A step consumes the input projection `x · w_x + b` rather than `x`, so the
//! caller can compute projections for many steps (or look them up per
//! symbol) in one product. Every step takes a per-row mask: where the mask is
//! zero the row's state is carried through unchanged, which lets
//! right-padded sequences of different lengths share one batch.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use super::config::CellKind;
use super::real::{sigmoid, tanh, Real};
use super::weights::CellParams;
use super::NeuralError;

/// Recurrent state of one layer. `c` is present for LSTM only.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<F> {
    pub h: Array2<F>,
    pub c: Option<Array2<F>>,
}

impl<F: Real> CellState<F> {
    pub fn zeros(kind: CellKind, rows: usize, hidden: usize) -> Self {
        CellState {
            h: Array2::zeros((rows, hidden)),
            c: match kind {
                CellKind::Lstm => Some(Array2::zeros((rows, hidden))),
                CellKind::Gru => None,
            },
        }
    }
}

/// Activations kept for the backward step.
#[derive(Debug, Clone)]
pub struct StepCache<F> {
    h_prev: Array2<F>,
    c_prev: Option<Array2<F>>,
    /// Post-activation gates, `[rows, gates * hidden]`.
    gates: Array2<F>,
    /// LSTM: tanh of the new cell state. GRU: `r ⊙ h_prev`.
    aux: Array2<F>,
}

/// `x · w_x + b` for a block of rows.
pub fn input_projection<F: Real>(p: &CellParams<F>, x: ArrayView2<F>) -> Result<Array2<F>, NeuralError> {
    if x.ncols() != p.w_x.nrows() {
        return Err(NeuralError::Dimension(format!(
            "input width {} does not match w_x {:?}",
            x.ncols(),
            p.w_x.dim()
        )));
    }
    let mut out = Array2::from_shape_fn((x.nrows(), p.b.len()), |(_, j)| p.b[j]);
    general_mat_mul(F::one(), &x, &p.w_x, F::one(), &mut out);
    Ok(out)
}

/// Input-side backward of [`input_projection`]: accumulates `w_x` and `b`
/// gradients and returns the gradient with respect to `x`.
pub fn input_backward<F: Real>(p: &CellParams<F>, x: ArrayView2<F>, dpre: ArrayView2<F>, grads: &mut CellParams<F>) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), &dpre, F::one(), &mut grads.w_x);
    grads.b += &dpre.sum_axis(Axis(0));
    dpre.dot(&p.w_x.t())
}

fn check_dims<F: Real>(p: &CellParams<F>, xw: &ArrayView2<F>, state: &CellState<F>, kind: CellKind) -> Result<(), NeuralError> {
    let h = p.w_h.nrows();
    let gh = kind.gates() * h;
    let ok = xw.ncols() == gh
        && p.w_h.ncols() == gh
        && p.b.len() == gh
        && state.h.dim() == (xw.nrows(), h)
        && state.c.as_ref().map_or(kind == CellKind::Gru, |c| c.dim() == (xw.nrows(), h));
    if ok {
        Ok(())
    } else {
        Err(NeuralError::Dimension(format!(
            "cell with w_h {:?} cannot take projected input {:?} and state {:?}",
            p.w_h.dim(),
            xw.dim(),
            state.h.dim()
        )))
    }
}

fn row_mask<F: Real>(mask: Option<ArrayView1<F>>, b: usize) -> bool {
    mask.is_none_or(|m| m[b] != F::zero())
}

/// Advances one layer by one step from the projected input `xw`. Returns
/// the new state and, when `keep` is set, the cache for [`backward_step`].
pub fn forward_step<F: Real>(
    kind: CellKind,
    p: &CellParams<F>,
    xw: ArrayView2<F>,
    state: &CellState<F>,
    mask: Option<ArrayView1<F>>,
    keep: bool,
) -> Result<(CellState<F>, Option<StepCache<F>>), NeuralError> {
    check_dims(p, &xw, state, kind)?;
    let (rows, hidden) = state.h.dim();
    let gh = kind.gates() * hidden;
    let mut pre = xw.to_owned();
    let mut h_new = state.h.clone();
    let h_prev = state.h.as_slice().expect("standard layout");
    let (gates, aux, c_new) = match kind {
        CellKind::Lstm => {
            general_mat_mul(F::one(), &state.h, &p.w_h, F::one(), &mut pre);
            let c_prev = state.c.as_ref().expect("lstm state has c");
            let mut c_new = c_prev.clone();
            let mut tanh_c = Array2::zeros((rows, hidden));
            {
                let g_all = pre.as_slice_mut().expect("standard layout");
                let c_out = c_new.as_slice_mut().expect("standard layout");
                let h_out = h_new.as_slice_mut().expect("standard layout");
                let tc_out = tanh_c.as_slice_mut().expect("standard layout");
                let c_in = c_prev.as_slice().expect("standard layout");
                for b in 0..rows {
                    let live = row_mask(mask, b);
                    let g = &mut g_all[b * gh..(b + 1) * gh];
                    let (gi, rest) = g.split_at_mut(hidden);
                    let (gf, rest) = rest.split_at_mut(hidden);
                    let (gg, go) = rest.split_at_mut(hidden);
                    let span = b * hidden..(b + 1) * hidden;
                    let (cp, co, ho, tco) = (&c_in[span.clone()], &mut c_out[span.clone()], &mut h_out[span.clone()], &mut tc_out[span]);
                    for j in 0..hidden {
                        let i = sigmoid(gi[j]);
                        let f = sigmoid(gf[j]);
                        let cand = tanh(gg[j]);
                        let o = sigmoid(go[j]);
                        gi[j] = i;
                        gf[j] = f;
                        gg[j] = cand;
                        go[j] = o;
                        let c = f * cp[j] + i * cand;
                        let tc = tanh(c);
                        tco[j] = tc;
                        if live {
                            co[j] = c;
                            ho[j] = o * tc;
                        }
                    }
                }
            }
            (pre, tanh_c, Some(c_new))
        }
        CellKind::Gru => {
            let w_zr = p.w_h.slice(s![.., 0..2 * hidden]);
            let w_n = p.w_h.slice(s![.., 2 * hidden..]);
            {
                let mut zr = pre.slice_mut(s![.., 0..2 * hidden]);
                general_mat_mul(F::one(), &state.h, &w_zr, F::one(), &mut zr);
            }
            let mut rh = Array2::zeros((rows, hidden));
            {
                let g_all = pre.as_slice_mut().expect("standard layout");
                let rh_out = rh.as_slice_mut().expect("standard layout");
                for b in 0..rows {
                    let g = &mut g_all[b * gh..(b + 1) * gh];
                    let (gz, rest) = g.split_at_mut(hidden);
                    let gr = &mut rest[..hidden];
                    let hp = &h_prev[b * hidden..(b + 1) * hidden];
                    let ro = &mut rh_out[b * hidden..(b + 1) * hidden];
                    for j in 0..hidden {
                        gz[j] = sigmoid(gz[j]);
                        let r = sigmoid(gr[j]);
                        gr[j] = r;
                        ro[j] = r * hp[j];
                    }
                }
            }
            {
                let mut n = pre.slice_mut(s![.., 2 * hidden..]);
                general_mat_mul(F::one(), &rh, &w_n, F::one(), &mut n);
            }
            {
                let g_all = pre.as_slice_mut().expect("standard layout");
                let h_out = h_new.as_slice_mut().expect("standard layout");
                for b in 0..rows {
                    let live = row_mask(mask, b);
                    let g = &mut g_all[b * gh..(b + 1) * gh];
                    let (gz, rest) = g.split_at_mut(hidden);
                    let gn = &mut rest[hidden..];
                    let hp = &h_prev[b * hidden..(b + 1) * hidden];
                    let ho = &mut h_out[b * hidden..(b + 1) * hidden];
                    for j in 0..hidden {
                        let n = tanh(gn[j]);
                        gn[j] = n;
                        if live {
                            let z = gz[j];
                            ho[j] = (F::one() - z) * n + z * hp[j];
                        }
                    }
                }
            }
            (pre, rh, None)
        }
    };
    let cache = keep.then(|| StepCache { h_prev: state.h.clone(), c_prev: state.c.clone(), gates, aux });
    Ok((CellState { h: h_new, c: c_new }, cache))
}

/// Gradients flowing out of one backward step.
pub struct StepGrads<F> {
    /// Gradient with respect to the projected input of the step; zero on
    /// masked rows.
    pub dpre: Array2<F>,
    pub dh_prev: Array2<F>,
    pub dc_prev: Option<Array2<F>>,
}

/// Backward through one step. `dh` / `dc` are the gradients of the loss with
/// respect to the state this step produced; the recurrent weight gradient is
/// added into `dw_h`. Input-side gradients follow from `dpre` through
/// [`input_backward`] or a symbol-table scatter.
pub fn backward_step<F: Real>(
    kind: CellKind,
    p: &CellParams<F>,
    cache: &StepCache<F>,
    mask: Option<ArrayView1<F>>,
    dh: &Array2<F>,
    dc: Option<&Array2<F>>,
    dw_h: &mut Array2<F>,
) -> StepGrads<F> {
    let (rows, hidden) = dh.dim();
    let gh = kind.gates() * hidden;
    let one = F::one();
    let mut dpre = Array2::zeros(cache.gates.dim());
    let mut dh_prev = Array2::zeros((rows, hidden));
    let dh_s = dh.as_slice().expect("standard layout");
    let gates = cache.gates.as_slice().expect("standard layout");
    let h_prev = cache.h_prev.as_slice().expect("standard layout");
    let mut dc_prev = None;
    match kind {
        CellKind::Lstm => {
            let dc = dc.expect("lstm backward needs dc").as_slice().expect("standard layout");
            let c_prev = cache.c_prev.as_ref().expect("lstm cache has c").as_slice().expect("standard layout");
            let aux = cache.aux.as_slice().expect("standard layout");
            let mut dcp = Array2::zeros((rows, hidden));
            {
                let dp_all = dpre.as_slice_mut().expect("standard layout");
                let dcp_s = dcp.as_slice_mut().expect("standard layout");
                let dhp_s = dh_prev.as_slice_mut().expect("standard layout");
                for b in 0..rows {
                    let span = b * hidden..(b + 1) * hidden;
                    if !row_mask(mask, b) {
                        dhp_s[span.clone()].copy_from_slice(&dh_s[span.clone()]);
                        dcp_s[span.clone()].copy_from_slice(&dc[span]);
                        continue;
                    }
                    let g = &gates[b * gh..(b + 1) * gh];
                    let dp = &mut dp_all[b * gh..(b + 1) * gh];
                    let (dpi, rest) = dp.split_at_mut(hidden);
                    let (dpf, rest) = rest.split_at_mut(hidden);
                    let (dpg, dpo) = rest.split_at_mut(hidden);
                    let (tc, dhb, dcb_in, cp, dcpo) =
                        (&aux[span.clone()], &dh_s[span.clone()], &dc[span.clone()], &c_prev[span.clone()], &mut dcp_s[span]);
                    for j in 0..hidden {
                        let (i, f, cand, o) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
                        let t = tc[j];
                        let dcb = dcb_in[j] + dhb[j] * o * (one - t * t);
                        dcpo[j] = dcb * f;
                        dpi[j] = dcb * cand * i * (one - i);
                        dpf[j] = dcb * cp[j] * f * (one - f);
                        dpg[j] = dcb * i * (one - cand * cand);
                        dpo[j] = dhb[j] * t * o * (one - o);
                    }
                }
            }
            general_mat_mul(one, &cache.h_prev.t(), &dpre, one, dw_h);
            general_mat_mul(one, &dpre, &p.w_h.t(), one, &mut dh_prev);
            dc_prev = Some(dcp);
        }
        CellKind::Gru => {
            let mut d_rh = Array2::zeros((rows, hidden));
            {
                // candidate block first: it feeds the reset gate's gradient
                let dp_all = dpre.as_slice_mut().expect("standard layout");
                let dhp_s = dh_prev.as_slice_mut().expect("standard layout");
                for b in 0..rows {
                    let span = b * hidden..(b + 1) * hidden;
                    if !row_mask(mask, b) {
                        dhp_s[span.clone()].copy_from_slice(&dh_s[span]);
                        continue;
                    }
                    let g = &gates[b * gh..(b + 1) * gh];
                    let dp = &mut dp_all[b * gh..(b + 1) * gh];
                    let (hp, dhb, dhpo) = (&h_prev[span.clone()], &dh_s[span.clone()], &mut dhp_s[span]);
                    for j in 0..hidden {
                        let z = g[j];
                        let n = g[2 * hidden + j];
                        dhpo[j] = dhb[j] * z;
                        dp[2 * hidden + j] = dhb[j] * (one - z) * (one - n * n);
                        dp[j] = dhb[j] * (hp[j] - n) * z * (one - z);
                    }
                }
            }
            {
                let dn = dpre.slice(s![.., 2 * hidden..]);
                let w_n = p.w_h.slice(s![.., 2 * hidden..]);
                general_mat_mul(one, &dn, &w_n.t(), F::zero(), &mut d_rh);
                let mut gw_n = dw_h.slice_mut(s![.., 2 * hidden..]);
                general_mat_mul(one, &cache.aux.t(), &dn, one, &mut gw_n);
            }
            {
                let dp_all = dpre.as_slice_mut().expect("standard layout");
                let dhp_s = dh_prev.as_slice_mut().expect("standard layout");
                let drh = d_rh.as_slice().expect("standard layout");
                for b in 0..rows {
                    if !row_mask(mask, b) {
                        continue;
                    }
                    for j in 0..hidden {
                        let k = b * hidden + j;
                        let r = gates[b * gh + hidden + j];
                        dhp_s[k] += drh[k] * r;
                        dp_all[b * gh + hidden + j] = drh[k] * h_prev[k] * r * (one - r);
                    }
                }
            }
            let dzr = dpre.slice(s![.., 0..2 * hidden]);
            let w_zr = p.w_h.slice(s![.., 0..2 * hidden]);
            let mut gw_zr = dw_h.slice_mut(s![.., 0..2 * hidden]);
            general_mat_mul(one, &cache.h_prev.t(), &dzr, one, &mut gw_zr);
            general_mat_mul(one, &dzr, &w_zr.t(), one, &mut dh_prev);
        }
    }
    StepGrads { dpre, dh_prev, dc_prev }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(kind: CellKind, input: usize, hidden: usize, scale: f64, seed: u64) -> CellParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gh = kind.gates() * hidden;
        let mut r = |n, m| Array2::from_shape_fn((n, m), |_| rng.gen_range(-scale..=scale));
        let w_x = r(input, gh);
        let w_h = r(hidden, gh);
        let b = Array1::from_shape_fn(gh, |_| 0.1);
        CellParams { w_x, w_h, b }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = CellParams {
            w_x: Array2::<f64>::zeros((3, 8)),
            w_h: Array2::zeros((2, 8)),
            b: Array1::zeros(8),
        };
        let x = Array2::from_shape_vec((1, 3), vec![0.3, -2.0, 5.0]).unwrap();
        let state = CellState::zeros(CellKind::Lstm, 1, 2);
        let xw = input_projection(&p, x.view()).unwrap();
        let (next, _) = forward_step(CellKind::Lstm, &p, xw.view(), &state, None, false).unwrap();
        assert!(next.h.iter().all(|&v| v == 0.0));
        assert!(next.c.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_output_is_bounded() {
        let p = params(CellKind::Lstm, 4, 6, 3.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = CellState::zeros(CellKind::Lstm, 3, 6);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-10.0..10.0));
            let xw = input_projection(&p, x.view()).unwrap();
            state = forward_step(CellKind::Lstm, &p, xw.view(), &state, None, false).unwrap().0;
            assert!(state.h.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = params(CellKind::Gru, 4, 6, 0.1, 1);
        let x = Array2::zeros((2, 5));
        assert!(matches!(input_projection(&p, x.view()), Err(NeuralError::Dimension(_))));
        let state = CellState::zeros(CellKind::Gru, 3, 6);
        let xw = Array2::zeros((2, 18));
        assert!(matches!(
            forward_step(CellKind::Gru, &p, xw.view(), &state, None, false),
            Err(NeuralError::Dimension(_))
        ));
    }

    #[test]
    fn masked_rows_carry_state() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let p = params(kind, 3, 4, 0.5, 3);
            let mut state = CellState::zeros(kind, 2, 4);
            state.h.fill(0.25);
            let x = Array2::from_elem((2, 3), 1.0);
            let mask = Array1::from_vec(vec![1.0, 0.0]);
            let xw = input_projection(&p, x.view()).unwrap();
            let (next, _) = forward_step(kind, &p, xw.view(), &state, Some(mask.view()), false).unwrap();
            assert!(next.h.row(1).iter().all(|&v| v == 0.25));
            assert!(next.h.row(0).iter().any(|&v| v != 0.25));
        }
    }

    /// Loss = Σ h_T·u + Σ c_T·w over a short masked sequence; compares the
    /// analytic gradient for every parameter against central differences.
    #[test]
    fn step_gradients_match_finite_differences() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let (input, hidden, rows, steps) = (3, 8, 2, 4);
            let p = params(kind, input, hidden, 0.5, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let xs: Vec<Array2<f64>> =
                (0..steps).map(|_| Array2::from_shape_fn((rows, input), |_| rng.gen_range(-1.0..1.0))).collect();
            let masks: Vec<Array1<f64>> = (0..steps)
                .map(|t| Array1::from_vec(vec![1.0, if t < 2 { 1.0 } else { 0.0 }]))
                .collect();
            let u = Array2::from_shape_fn((rows, hidden), |_| rng.gen_range(-1.0..1.0));
            let w = Array2::from_shape_fn((rows, hidden), |_| rng.gen_range(-1.0..1.0));
            let loss = |p: &CellParams<f64>| {
                let mut state = CellState::zeros(kind, rows, hidden);
                for (x, m) in xs.iter().zip(&masks) {
                    let xw = input_projection(p, x.view()).unwrap();
                    state = forward_step(kind, p, xw.view(), &state, Some(m.view()), false).unwrap().0;
                }
                (&state.h * &u).sum() + state.c.map_or(0.0, |c| (&c * &w).sum())
            };
            let mut state = CellState::zeros(kind, rows, hidden);
            let mut caches = Vec::new();
            for (x, m) in xs.iter().zip(&masks) {
                let xw = input_projection(&p, x.view()).unwrap();
                let (s, c) = forward_step(kind, &p, xw.view(), &state, Some(m.view()), true).unwrap();
                caches.push(c.unwrap());
                state = s;
            }
            let mut grads = CellParams {
                w_x: Array2::zeros(p.w_x.dim()),
                w_h: Array2::zeros(p.w_h.dim()),
                b: Array1::zeros(p.b.len()),
            };
            let mut dh = u.clone();
            let mut dc = state.c.as_ref().map(|_| w.clone());
            for ((cache, m), x) in caches.iter().zip(&masks).zip(&xs).rev() {
                let g = backward_step(kind, &p, cache, Some(m.view()), &dh, dc.as_ref(), &mut grads.w_h);
                input_backward(&p, x.view(), g.dpre.view(), &mut grads);
                dh = g.dh_prev;
                dc = g.dc_prev;
            }
            let eps = 1e-5;
            let check = |analytic: f64, perturb: &dyn Fn(f64) -> CellParams<f64>| {
                let numeric = (loss(&perturb(eps)) - loss(&perturb(-eps))) / (2.0 * eps);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!((analytic - numeric).abs() / denom < 1e-5, "{kind:?}: {analytic} vs {numeric}");
            };
            for idx in 0..p.w_x.len() {
                let (r, c) = (idx / p.w_x.ncols(), idx % p.w_x.ncols());
                check(grads.w_x[[r, c]], &|e| {
                    let mut q = p.clone();
                    q.w_x[[r, c]] += e;
                    q
                });
            }
            for idx in 0..p.w_h.len() {
                let (r, c) = (idx / p.w_h.ncols(), idx % p.w_h.ncols());
                check(grads.w_h[[r, c]], &|e| {
                    let mut q = p.clone();
                    q.w_h[[r, c]] += e;
                    q
                });
            }
            for j in 0..p.b.len() {
                check(grads.b[j], &|e| {
                    let mut q = p.clone();
                    q.b[j] += e;
                    q
                });
            }
        }
    }
}
