//! Hand-derived reverse-mode gradients for the three trainable poolers.
//!
//! Every path here is validated against the central-difference oracle in
//! `numerics::finite_difference_gradient`; see the module tests and the
//! acceptance suite.

use crate::aggregator::{
    bilstm_forward_cached, normalize_attention, quality_head, AggregatorParams, DirectionCache,
    LayerCache, LstmDirectionParams, LstmLayerParams, QualityMlpParams,
};
use crate::error::{Error, Result};
use crate::numerics::{vec_affine, vec_mat_t, Matrix, Real};

/// Backprop through one LSTM direction.
///
/// `dh_out` holds dLoss/dh_t indexed by *original* row index; gradients are
/// accumulated into `grads` and dLoss/dinput into `d_input`.
fn direction_backward<T: Real>(
    input: &Matrix<T>,
    dir: &LstmDirectionParams<T>,
    cache: &DirectionCache<T>,
    dh_out: &Matrix<T>,
    d_input: &mut Matrix<T>,
    grads: &mut LstmDirectionParams<T>,
) {
    let n = cache.steps.len();
    let hsz = dir.hidden_size();
    let zeros = vec![T::zero(); hsz];
    let one = T::one();

    let mut dh_next = vec![T::zero(); hsz];
    let mut dc_next = vec![T::zero(); hsz];
    for s in (0..n).rev() {
        let t = cache.order[s];
        let st = &cache.steps[s];
        let (h_prev, c_prev) = if s > 0 {
            (&cache.steps[s - 1].h, &cache.steps[s - 1].c)
        } else {
            (&zeros, &zeros)
        };

        let mut da = [
            vec![T::zero(); hsz], // input gate
            vec![T::zero(); hsz], // forget gate
            vec![T::zero(); hsz], // cell candidate
            vec![T::zero(); hsz], // output gate
        ];
        for k in 0..hsz {
            let dh = dh_out[(t, k)] + dh_next[k];
            let do_ = dh * st.tc[k];
            let dc = dh * st.o[k] * (one - st.tc[k] * st.tc[k]) + dc_next[k];
            let di = dc * st.g[k];
            let dg = dc * st.i[k];
            let df = dc * c_prev[k];
            dc_next[k] = dc * st.f[k];
            da[0][k] = di * st.i[k] * (one - st.i[k]);
            da[1][k] = df * st.f[k] * (one - st.f[k]);
            da[2][k] = dg * (one - st.g[k] * st.g[k]);
            da[3][k] = do_ * st.o[k] * (one - st.o[k]);
        }

        let x = input.row(t);
        for k in 0..hsz {
            dh_next[k] = T::zero();
        }
        let dx = d_input.row_mut(t);
        for (gate, dak) in grads.gates_mut().into_iter().zip(&da) {
            gate.w_x.add_outer(x, dak);
            gate.w_h.add_outer(h_prev, dak);
            for (b, &d) in gate.b.iter_mut().zip(dak) {
                *b += d;
            }
        }
        for (gate, dak) in dir.gates().into_iter().zip(&da) {
            for (dxj, v) in dx.iter_mut().zip(vec_mat_t(dak, &gate.w_x)) {
                *dxj += v;
            }
            for (dhj, v) in dh_next.iter_mut().zip(vec_mat_t(dak, &gate.w_h)) {
                *dhj += v;
            }
        }
    }
}

/// Backprop through one bidirectional layer; returns dLoss/dinput.
fn layer_backward<T: Real>(
    input: &Matrix<T>,
    layer: &LstmLayerParams<T>,
    cache: &LayerCache<T>,
    d_out: &Matrix<T>,
    grads: &mut LstmLayerParams<T>,
) -> Matrix<T> {
    let (n, _) = input.shape();
    let hsz = layer.fwd.hidden_size();
    let mut dh_f = Matrix::zeros(n, hsz);
    let mut dh_b = Matrix::zeros(n, hsz);
    for t in 0..n {
        dh_f.row_mut(t).copy_from_slice(&d_out.row(t)[..hsz]);
        dh_b.row_mut(t).copy_from_slice(&d_out.row(t)[hsz..]);
    }
    let mut d_input = Matrix::zeros(n, input.cols());
    direction_backward(input, &layer.fwd, &cache.fwd, &dh_f, &mut d_input, &mut grads.fwd);
    direction_backward(input, &layer.bwd, &cache.bwd, &dh_b, &mut d_input, &mut grads.bwd);
    d_input
}

fn bilstm_backward<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
    caches: &[LayerCache<T>],
    d_hidden: &Matrix<T>,
    grads: &mut AggregatorParams<T>,
) {
    debug_assert_eq!(caches.len(), params.layers.len());
    let mut d_out = d_hidden.clone();
    for li in (0..params.layers.len()).rev() {
        let input = if li == 0 { frames } else { &caches[li - 1].output };
        d_out = layer_backward(input, &params.layers[li], &caches[li], &d_out, &mut grads.layers[li]);
    }
    // d_out is now dLoss/dframes; the frames are fixed inputs, so it is dropped.
}

// ---------------------------------------------------------------------------
// REAN
// ---------------------------------------------------------------------------

pub(crate) struct ReanForward<T> {
    pub caches: Vec<LayerCache<T>>,
    pub attention: Matrix<T>,
    pub rep: Vec<T>,
}

pub(crate) fn rean_forward_cached<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
) -> Result<ReanForward<T>> {
    let caches = bilstm_forward_cached(frames, params)?;
    let hidden = &caches.last().unwrap().output;
    let q = quality_head(hidden, params)?;
    let attention = normalize_attention(&q).weights;
    let (n, d) = frames.shape();
    let mut rep = vec![T::zero(); d];
    for i in 0..n {
        let f = frames.row(i);
        let w = attention.row(i);
        for j in 0..d {
            rep[j] += f[j] * w[j];
        }
    }
    Ok(ReanForward { caches, attention, rep })
}

pub(crate) fn rean_backward_template<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
    fwd: &ReanForward<T>,
    d_rep: &[T],
    grads: &mut AggregatorParams<T>,
) {
    let (n, d) = frames.shape();
    let att = &fwd.attention;

    // weighted mean, then the per-column softmax Jacobian
    let mut dq = Matrix::zeros(n, d);
    for j in 0..d {
        let mut dot = T::zero();
        for i in 0..n {
            dot += att[(i, j)] * d_rep[j] * frames[(i, j)];
        }
        for i in 0..n {
            dq[(i, j)] = att[(i, j)] * (d_rep[j] * frames[(i, j)] - dot);
        }
    }

    // quality head
    let hidden = &fwd.caches.last().unwrap().output;
    let mut d_hidden = Matrix::zeros(n, 2 * params.hidden);
    for t in 0..n {
        grads.head_w.add_outer(hidden.row(t), dq.row(t));
        for (b, &v) in grads.head_b.iter_mut().zip(dq.row(t)) {
            *b += v;
        }
        d_hidden
            .row_mut(t)
            .copy_from_slice(&vec_mat_t(dq.row(t), &params.head_w));
    }

    bilstm_backward(frames, params, &fwd.caches, &d_hidden, grads);
}

// ---------------------------------------------------------------------------
// naive last-state LSTM pooler
// ---------------------------------------------------------------------------

pub(crate) struct NaiveForward<T> {
    pub caches: Vec<LayerCache<T>>,
    pub last: Vec<T>,
    pub rep: Vec<T>,
}

pub(crate) fn naive_forward_cached<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
) -> Result<NaiveForward<T>> {
    let caches = bilstm_forward_cached(frames, params)?;
    let hidden = &caches.last().unwrap().output;
    let n = frames.rows();
    let hsz = params.hidden;
    let mut last = Vec::with_capacity(2 * hsz);
    last.extend_from_slice(&hidden.row(n - 1)[..hsz]);
    last.extend_from_slice(&hidden.row(0)[hsz..]);
    let rep = vec_affine(&last, &params.head_w, &params.head_b)?;
    Ok(NaiveForward { caches, last, rep })
}

pub(crate) fn naive_backward_template<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
    fwd: &NaiveForward<T>,
    d_rep: &[T],
    grads: &mut AggregatorParams<T>,
) {
    let n = frames.rows();
    let hsz = params.hidden;
    grads.head_w.add_outer(&fwd.last, d_rep);
    for (b, &v) in grads.head_b.iter_mut().zip(d_rep) {
        *b += v;
    }
    let d_last = vec_mat_t(d_rep, &params.head_w);
    let mut d_hidden = Matrix::zeros(n, 2 * hsz);
    d_hidden.row_mut(n - 1)[..hsz].copy_from_slice(&d_last[..hsz]);
    for (dst, &v) in d_hidden.row_mut(0)[hsz..].iter_mut().zip(&d_last[hsz..]) {
        *dst += v;
    }
    bilstm_backward(frames, params, &fwd.caches, &d_hidden, grads);
}

// ---------------------------------------------------------------------------
// scalar quality pooler
// ---------------------------------------------------------------------------

pub(crate) struct QualityForward<T> {
    /// post-ReLU hidden activations, N x hidden
    pub h1: Matrix<T>,
    pub weights: Vec<T>,
    pub rep: Vec<T>,
}

pub(crate) fn quality_forward_cached<T: Real>(
    frames: &Matrix<T>,
    mlp: &QualityMlpParams<T>,
) -> Result<QualityForward<T>> {
    let (n, d) = frames.shape();
    if d != mlp.dim {
        return Err(Error::shape("quality_forward", frames.shape(), mlp.w1.shape()));
    }
    let mut h1 = Matrix::zeros(n, mlp.hidden);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let mut h = vec_affine(frames.row(i), &mlp.w1, &mlp.b1)?;
        for v in &mut h {
            *v = v.max(T::zero());
        }
        let s = vec_affine(&h, &mlp.w2, &mlp.b2)?;
        h1.row_mut(i).copy_from_slice(&h);
        logits.push(s[0]);
    }
    crate::aggregator::softmax_inplace(&mut logits);
    let weights = logits;
    let mut rep = vec![T::zero(); d];
    for i in 0..n {
        let w = weights[i];
        for (rj, &fj) in rep.iter_mut().zip(frames.row(i)) {
            *rj += w * fj;
        }
    }
    Ok(QualityForward { h1, weights, rep })
}

pub(crate) fn quality_backward_template<T: Real>(
    frames: &Matrix<T>,
    mlp: &QualityMlpParams<T>,
    fwd: &QualityForward<T>,
    d_rep: &[T],
    grads: &mut QualityMlpParams<T>,
) {
    let n = frames.rows();
    let dots: Vec<T> = (0..n)
        .map(|i| frames.row(i).iter().zip(d_rep).map(|(&f, &d)| f * d).sum())
        .collect();
    let mean: T = fwd.weights.iter().zip(&dots).map(|(&w, &d)| w * d).sum();
    for i in 0..n {
        let ds = fwd.weights[i] * (dots[i] - mean);
        let h = fwd.h1.row(i);
        grads.w2.add_outer(h, &[ds]);
        grads.b2[0] += ds;
        // ReLU mask from the post-activation values
        let da: Vec<T> = (0..mlp.hidden)
            .map(|k| {
                if h[k] > T::zero() {
                    ds * mlp.w2[(k, 0)]
                } else {
                    T::zero()
                }
            })
            .collect();
        grads.w1.add_outer(frames.row(i), &da);
        for (b, &v) in grads.b1.iter_mut().zip(&da) {
            *b += v;
        }
    }
}
