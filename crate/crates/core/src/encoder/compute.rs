//! Per-sentence forward and reverse passes of the encoder.
//!
//! Only the `len` real positions of a sentence are processed. Padding never
//! enters attention or pooling, so skipping it is exact.

use super::dropout::{mask_scale, DropoutPlan, MaskRole};
use super::layout::BlockOffsets;
use super::{EncoderModel, Pooling};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `y = x W + b` for `rows` rows; `w` is `din × dout`.
fn linear(x: &[f64], rows: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        y.extend_from_slice(b);
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (i, &xv) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wi = &w[i * dout..(i + 1) * dout];
            for (yv, &wv) in yr.iter_mut().zip(wi) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients of `linear` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    rows: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (g, &d) in gb.iter_mut().zip(dyr) {
            *g += d;
        }
        let xr = &x[r * din..(r + 1) * din];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for i in 0..din {
            let wi = &w[i * dout..(i + 1) * dout];
            let gwi = &mut gw[i * dout..(i + 1) * dout];
            let xv = xr[i];
            let mut acc = 0.0;
            for o in 0..dout {
                gwi[o] += xv * dyr[o];
                acc += wi[o] * dyr[o];
            }
            dxr[i] = acc;
        }
    }
    dx
}

struct LayerNormOut {
    y: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, gamma: &[f64], beta: &[f64]) -> LayerNormOut {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for k in 0..d {
            let h = (xr[k] - mean) * rs;
            xhat[r * d + k] = h;
            y[r * d + k] = gamma[k] * h + beta[k];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    gamma: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) -> Vec<f64> {
    let rows = rstd.len();
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_x = 0.0;
        for k in 0..d {
            ggamma[k] += dyr[k] * xr[k];
            gbeta[k] += dyr[k];
            dxhat[k] = dyr[k] * gamma[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_x += dxhat[k] * xr[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_x /= d as f64;
        for k in 0..d {
            dx[r * d + k] = rstd[r] * (dxhat[k] - mean_dxhat - xr[k] * mean_dxhat_x);
        }
    }
    dx
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub(crate) struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax attention probabilities, `heads × T × T`, before dropout.
    probs: Vec<f64>,
    /// Dropout multipliers for `probs`.
    attn_scale: Vec<f64>,
    ctx: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    ff_scale: Vec<f64>,
    /// GELU output after dropout.
    hidden: Vec<f64>,
}

pub(crate) struct SentenceCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    head_applied: bool,
    pub(crate) embedding: Vec<f64>,
}

pub(crate) fn forward_sentence(
    model: &EncoderModel,
    tokens: &[u32],
    sentence: usize,
    plan: &DropoutPlan,
    apply_head: bool,
) -> SentenceCache {
    let cfg = &model.config;
    let layout = &model.layout;
    let p = &model.params;
    let d = cfg.d_model;
    let t = tokens.len();
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dropout_p = cfg.dropout_p;
    let max_len = cfg.max_len as u64;

    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = &p[layout.tok_emb + tok as usize * d..][..d];
        let pe = &p[layout.pos_emb + i * d..][..d];
        for k in 0..d {
            x[i * d + k] = e[k] + pe[k];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut outputs = Vec::with_capacity(cfg.n_layers);
    for (l, off) in layout.blocks.iter().enumerate() {
        let zero_bias = vec![0.0; d];
        let ln1 = layer_norm(&x, t, d, &p[off.ln1_gamma..][..d], &p[off.ln1_beta..][..d]);
        let a = ln1.y;
        let q = linear(&a, t, d, &p[off.wq..][..d * d], &p[off.bq..][..d], d);
        let k = linear(&a, t, d, &p[off.wk..][..d * d], &zero_bias, d);
        let v = linear(&a, t, d, &p[off.wv..][..d * d], &p[off.bv..][..d], d);

        let mut probs = vec![0.0; heads * t * t];
        let mut attn_scale = vec![1.0; heads * t * t];
        let mut ctx = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let row = &mut probs[(h * t + i) * t..][..t];
                let qi = &q[i * d + h * dh..][..dh];
                for j in 0..t {
                    let kj = &k[j * d + h * dh..][..dh];
                    row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
                let ctx_i = &mut ctx[i * d + h * dh..][..dh];
                for j in 0..t {
                    let element = ((sentence as u64 * heads as u64 + h as u64) * max_len
                        + i as u64)
                        * max_len
                        + j as u64;
                    let ms = mask_scale(plan, dropout_p, l, MaskRole::AttentionProbs, element);
                    attn_scale[(h * t + i) * t + j] = ms;
                    let w = row[j] * ms;
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &v[j * d + h * dh..][..dh];
                    for (c, &vv) in ctx_i.iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
            }
        }
        let o = linear(&ctx, t, d, &p[off.wo..][..d * d], &p[off.bo..][..d], d);
        let mut x_mid = x;
        for (xm, ov) in x_mid.iter_mut().zip(&o) {
            *xm += ov;
        }

        let ln2 = layer_norm(&x_mid, t, d, &p[off.ln2_gamma..][..d], &p[off.ln2_beta..][..d]);
        let dff = cfg.d_ff;
        let u = linear(&ln2.y, t, d, &p[off.w1..][..d * dff], &p[off.b1..][..dff], dff);
        let mut ff_scale = vec![1.0; t * dff];
        let mut hidden = vec![0.0; t * dff];
        for i in 0..t {
            for c in 0..dff {
                let element = (sentence as u64 * max_len + i as u64) * dff as u64 + c as u64;
                let ms = mask_scale(plan, dropout_p, l, MaskRole::FeedForwardHidden, element);
                ff_scale[i * dff + c] = ms;
                hidden[i * dff + c] = gelu(u[i * dff + c]) * ms;
            }
        }
        let f = linear(&hidden, t, dff, &p[off.w2..][..dff * d], &p[off.b2..][..d], d);
        let mut x_out = x_mid;
        for (xo, fv) in x_out.iter_mut().zip(&f) {
            *xo += fv;
        }
        outputs.push(x_out.clone());
        x = x_out;

        layers.push(LayerCache {
            xhat1: ln1.xhat,
            rstd1: ln1.rstd,
            a,
            q,
            k,
            v,
            probs,
            attn_scale,
            ctx,
            xhat2: ln2.xhat,
            rstd2: ln2.rstd,
            b: ln2.y,
            u,
            ff_scale,
            hidden,
        });
    }

    let last = outputs.last().expect("at least one layer");
    let mean_pool = |h: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for i in 0..t {
            for k in 0..d {
                m[k] += h[i * d + k];
            }
        }
        m.iter_mut().for_each(|v| *v /= t as f64);
        m
    };
    let pooled = match cfg.pooling {
        Pooling::FirstToken => last[..d].to_vec(),
        Pooling::Mean => mean_pool(last),
        Pooling::FirstLastAvg => {
            let first = mean_pool(&outputs[0]);
            let lastm = mean_pool(last);
            first.iter().zip(&lastm).map(|(a, b)| 0.5 * (a + b)).collect()
        }
    };
    let embedding = if apply_head {
        linear(&pooled, 1, d, &p[layout.head_w..][..d * d], &p[layout.head_b..][..d], d)
            .into_iter()
            .map(f64::tanh)
            .collect()
    } else {
        pooled.clone()
    };

    SentenceCache {
        tokens: tokens.to_vec(),
        layers,
        pooled,
        head_applied: apply_head,
        embedding,
    }
}

/// Adds the gradient of `⟨upstream, embedding⟩` w.r.t. every parameter into `grad`.
pub(crate) fn backward_sentence(
    model: &EncoderModel,
    cache: &SentenceCache,
    upstream: &[f64],
    grad: &mut [f64],
) {
    let cfg = &model.config;
    let layout = &model.layout;
    let p = &model.params;
    let d = cfg.d_model;
    let dff = cfg.d_ff;
    let t = cache.tokens.len();
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dpooled = if cache.head_applied {
        let dz: Vec<f64> = upstream
            .iter()
            .zip(&cache.embedding)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        let [gw, gb] = views(grad, [(layout.head_w, d * d), (layout.head_b, d)]);
        linear_backward(&cache.pooled, 1, d, &p[layout.head_w..][..d * d], d, &dz, gw, gb)
    } else {
        upstream.to_vec()
    };

    let n_layers = cfg.n_layers;
    let mut dx = vec![0.0; t * d];
    let mut dfirst: Option<Vec<f64>> = None;
    match cfg.pooling {
        Pooling::FirstToken => dx[..d].copy_from_slice(&dpooled),
        Pooling::Mean => {
            for i in 0..t {
                for k in 0..d {
                    dx[i * d + k] = dpooled[k] / t as f64;
                }
            }
        }
        Pooling::FirstLastAvg => {
            let mut spread = vec![0.0; t * d];
            for i in 0..t {
                for k in 0..d {
                    spread[i * d + k] = 0.5 * dpooled[k] / t as f64;
                }
            }
            dx.copy_from_slice(&spread);
            dfirst = Some(spread);
        }
    }

    for l in (0..n_layers).rev() {
        // dx is the gradient w.r.t. the output of block l
        if l == 0 {
            if let Some(df) = dfirst.take() {
                for (a, b) in dx.iter_mut().zip(&df) {
                    *a += b;
                }
            }
        }
        let c = &cache.layers[l];
        dx = backward_block(p, &layout.blocks[l], c, &dx, grad, t, d, dff, heads, dh, scale);
    }

    for (i, &tok) in cache.tokens.iter().enumerate() {
        let ge = &mut grad[layout.tok_emb + tok as usize * d..][..d];
        for k in 0..d {
            ge[k] += dx[i * d + k];
        }
        let gp = &mut grad[layout.pos_emb + i * d..][..d];
        for k in 0..d {
            gp[k] += dx[i * d + k];
        }
    }
}

/// Splits `grad` into disjoint mutable views at the given tensor offsets.
fn views<'a, const N: usize>(
    grad: &'a mut [f64],
    specs: [(usize, usize); N],
) -> [&'a mut [f64]; N] {
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by_key(|&i| specs[i].0);
    let mut out: [Option<&'a mut [f64]>; N] = std::array::from_fn(|_| None);
    let mut rest = grad;
    let mut consumed = 0;
    for &i in &order {
        let (offset, len) = specs[i];
        let tail = std::mem::take(&mut rest);
        let (_, tail) = tail.split_at_mut(offset - consumed);
        let (view, tail) = tail.split_at_mut(len);
        out[i] = Some(view);
        rest = tail;
        consumed = offset + len;
    }
    out.map(|v| v.expect("every view assigned"))
}

#[allow(clippy::too_many_arguments)]
fn backward_block(
    p: &[f64],
    off: &BlockOffsets,
    c: &LayerCache,
    dx_out: &[f64],
    grad: &mut [f64],
    t: usize,
    d: usize,
    dff: usize,
    heads: usize,
    dh: usize,
    scale: f64,
) -> Vec<f64> {
    // feed-forward sublayer: x_out = x_mid + W2 · drop(gelu(W1 · LN2(x_mid)))
    let [gw2, gb2, gw1, gb1, gg2, gbe2] = views(
        grad,
        [
            (off.w2, dff * d),
            (off.b2, d),
            (off.w1, d * dff),
            (off.b1, dff),
            (off.ln2_gamma, d),
            (off.ln2_beta, d),
        ],
    );
    let dhidden = linear_backward(&c.hidden, t, dff, &p[off.w2..][..dff * d], d, dx_out, gw2, gb2);
    let du: Vec<f64> = dhidden
        .iter()
        .zip(&c.ff_scale)
        .zip(&c.u)
        .map(|((g, s), &u)| g * s * gelu_grad(u))
        .collect();
    let db = linear_backward(&c.b, t, d, &p[off.w1..][..d * dff], dff, &du, gw1, gb1);
    let dln2 = layer_norm_backward(&db, &c.xhat2, &c.rstd2, d, &p[off.ln2_gamma..][..d], gg2, gbe2);
    let mut dx_mid = dx_out.to_vec();
    for (a, b) in dx_mid.iter_mut().zip(&dln2) {
        *a += b;
    }

    // attention sublayer: x_mid = x_in + Wo · attn(LN1(x_in))
    let mut gbk = vec![0.0; d];
    let [gwo, gbo, gwq, gbq, gwk, gwv, gbv, gg1, gbe1] = views(
        grad,
        [
            (off.wo, d * d),
            (off.bo, d),
            (off.wq, d * d),
            (off.bq, d),
            (off.wk, d * d),
            (off.wv, d * d),
            (off.bv, d),
            (off.ln1_gamma, d),
            (off.ln1_beta, d),
        ],
    );
    let dctx = linear_backward(&c.ctx, t, d, &p[off.wo..][..d * d], d, &dx_mid, gwo, gbo);
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dprobs = vec![0.0; t];
    for h in 0..heads {
        for i in 0..t {
            let row = &c.probs[(h * t + i) * t..][..t];
            let srow = &c.attn_scale[(h * t + i) * t..][..t];
            let dci = &dctx[i * d + h * dh..][..dh];
            for j in 0..t {
                let vj = &c.v[j * d + h * dh..][..dh];
                // ctx_i = sum_j probs_ij * scale_ij * v_j
                dprobs[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() * srow[j];
                let w = row[j] * srow[j];
                if w != 0.0 {
                    let dvj = &mut dv[j * d + h * dh..][..dh];
                    for (g, &dc) in dvj.iter_mut().zip(dci) {
                        *g += w * dc;
                    }
                }
            }
            let inner: f64 = row.iter().zip(&dprobs).map(|(a, b)| a * b).sum();
            let qi = &c.q[i * d + h * dh..][..dh];
            for j in 0..t {
                let ds = row[j] * (dprobs[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &c.k[j * d + h * dh..][..dh];
                let dqi = &mut dq[i * d + h * dh..][..dh];
                for (g, &kv) in dqi.iter_mut().zip(kj) {
                    *g += ds * kv;
                }
                let dkj = &mut dk[j * d + h * dh..][..dh];
                for (g, &qv) in dkj.iter_mut().zip(qi) {
                    *g += ds * qv;
                }
            }
        }
    }
    let mut da = linear_backward(&c.a, t, d, &p[off.wq..][..d * d], d, &dq, gwq, gbq);
    let dak = linear_backward(&c.a, t, d, &p[off.wk..][..d * d], d, &dk, gwk, &mut gbk);
    let dav = linear_backward(&c.a, t, d, &p[off.wv..][..d * d], d, &dv, gwv, gbv);
    for ((a, b), c2) in da.iter_mut().zip(&dak).zip(&dav) {
        *a += b + c2;
    }
    let dln1 = layer_norm_backward(&da, &c.xhat1, &c.rstd1, d, &p[off.ln1_gamma..][..d], gg1, gbe1);
    for (a, b) in dx_mid.iter_mut().zip(&dln1) {
        *a += b;
    }
    dx_mid
}
