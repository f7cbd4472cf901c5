//! Forward and reverse passes of the transformer for one window.
//!
//! Pre-norm blocks: `x += attn(ln1(x)); x += mlp(ln2(x))`, then a final
//! norm and an untied output layer with bias. Position 0 reads the learned
//! BOS vector, position `t > 0` reads the embedding of token `t - 1`, so
//! every token of the window is predicted.

use super::config::{BlockLayout, Layout};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `out[t] = inp[t] @ w + b` for row-major `w` of shape `m x n`.
fn linear(out: &mut [f64], inp: &[f64], w: &[f64], b: &[f64], m: usize, n: usize) {
    for (o, x) in out.chunks_exact_mut(n).zip(inp.chunks_exact(m)) {
        o.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * n..(i + 1) * n];
            for (oj, &wj) in o.iter_mut().zip(row) {
                *oj += xi * wj;
            }
        }
    }
}

/// Accumulates gradients of [`linear`]. `dinp` is added to, not overwritten.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    dinp: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    m: usize,
    n: usize,
) {
    for ((dx, x), dy) in dinp
        .chunks_exact_mut(m)
        .zip(inp.chunks_exact(m))
        .zip(dout.chunks_exact(n))
    {
        for (dbj, &g) in db.iter_mut().zip(dy) {
            *dbj += g;
        }
        for i in 0..m {
            let row = &w[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (&wj, &g) in row.iter().zip(dy) {
                acc += wj * g;
            }
            dx[i] += acc;
            let xi = x[i];
            if xi != 0.0 {
                let drow = &mut dw[i * n..(i + 1) * n];
                for (dwj, &g) in drow.iter_mut().zip(dy) {
                    *dwj += xi * g;
                }
            }
        }
    }
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(out: &mut [f64], inp: &[f64], g: &[f64], b: &[f64], d: usize) -> NormCache {
    let rows = inp.len() / d;
    let mut xhat = vec![0.0; inp.len()];
    let mut rstd = vec![0.0; rows];
    for t in 0..rows {
        let x = &inp[t * d..(t + 1) * d];
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let h = (x[i] - mean) * r;
            xhat[t * d + i] = h;
            out[t * d + i] = h * g[i] + b[i];
        }
    }
    NormCache { xhat, rstd }
}

fn layer_norm_back(
    dinp: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    cache: &NormCache,
    g: &[f64],
    d: usize,
) {
    let mut dxhat = vec![0.0; d];
    for t in 0..cache.rstd.len() {
        let dy = &dout[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dg[i] += dy[i] * xh[i];
            db[i] += dy[i];
            dxhat[i] = dy[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[t];
        let dx = &mut dinp[t * d..(t + 1) * d];
        for i in 0..d {
            dx[i] += r * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

struct BlockCache {
    ln1: NormCache,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>, // heads x T x T, causal (upper triangle zero)
    attn: Vec<f64>,
    ln2: NormCache,
    a2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct Forward {
    pub tokens: Vec<u8>,
    blocks: Vec<BlockCache>,
    lnf: NormCache,
    z: Vec<f64>,
    /// `T x vocab` pre-softmax scores.
    pub logits: Vec<f64>,
}

fn attention_forward(
    qkv: &[f64],
    probs: &mut [f64],
    out: &mut [f64],
    t_len: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    let mut scores = vec![0.0; t_len];
    for h in 0..heads {
        let p_h = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        for t in 0..t_len {
            let q = &qkv[t * stride + h * hd..t * stride + (h + 1) * hd];
            let mut max = f64::NEG_INFINITY;
            for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                let k = &qkv[s * stride + d + h * hd..s * stride + d + (h + 1) * hd];
                let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                *sc = dot * scale;
                max = max.max(*sc);
            }
            let mut sum = 0.0;
            for sc in scores.iter_mut().take(t + 1) {
                *sc = (*sc - max).exp();
                sum += *sc;
            }
            let row = &mut p_h[t * t_len..(t + 1) * t_len];
            let o = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
            o.iter_mut().for_each(|v| *v = 0.0);
            for s in 0..=t {
                let p = scores[s] / sum;
                row[s] = p;
                let v = &qkv[s * stride + 2 * d + h * hd..s * stride + 2 * d + (h + 1) * hd];
                for (oi, &vi) in o.iter_mut().zip(v) {
                    *oi += p * vi;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_back(
    dqkv: &mut [f64],
    dout: &[f64],
    qkv: &[f64],
    probs: &[f64],
    t_len: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    let mut dp = vec![0.0; t_len];
    for h in 0..heads {
        let p_h = &probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        for t in 0..t_len {
            let row = &p_h[t * t_len..(t + 1) * t_len];
            let dy = &dout[t * d + h * hd..t * d + (h + 1) * hd];
            let mut weighted = 0.0;
            for s in 0..=t {
                let vo = s * stride + 2 * d + h * hd;
                let v = &qkv[vo..vo + hd];
                dp[s] = dy.iter().zip(v).map(|(a, b)| a * b).sum();
                weighted += row[s] * dp[s];
                let dv = &mut dqkv[vo..vo + hd];
                for (dvi, &g) in dv.iter_mut().zip(dy) {
                    *dvi += row[s] * g;
                }
            }
            let qo = t * stride + h * hd;
            for s in 0..=t {
                let ds = row[s] * (dp[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ko = s * stride + d + h * hd;
                for i in 0..hd {
                    dqkv[qo + i] += ds * qkv[ko + i];
                    dqkv[ko + i] += ds * qkv[qo + i];
                }
            }
        }
    }
}

/// Runs the network on one window of at most `context` tokens.
pub fn forward(lay: &Layout, heads: usize, params: &[f64], tokens: &[u8]) -> Forward {
    let d = lay.d;
    let t_len = tokens.len();
    debug_assert!(t_len >= 1 && t_len <= lay.context);

    let mut x = vec![0.0; t_len * d];
    for t in 0..t_len {
        let emb = if t == 0 {
            &params[lay.bos..lay.bos + d]
        } else {
            let tok = tokens[t - 1] as usize;
            &params[lay.wte + tok * d..lay.wte + (tok + 1) * d]
        };
        let pos = &params[lay.wpe + t * d..lay.wpe + (t + 1) * d];
        for i in 0..d {
            x[t * d + i] = emb[i] + pos[i];
        }
    }

    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for bl in &lay.blocks {
        let mut a1 = vec![0.0; t_len * d];
        let ln1 = layer_norm(&mut a1, &x, p(params, bl.ln1_g, d), p(params, bl.ln1_b, d), d);
        let mut qkv = vec![0.0; t_len * 3 * d];
        linear(&mut qkv, &a1, p(params, bl.qkv_w, 3 * d * d), p(params, bl.qkv_b, 3 * d), d, 3 * d);
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut attn = vec![0.0; t_len * d];
        attention_forward(&qkv, &mut probs, &mut attn, t_len, d, heads);
        let mut proj = vec![0.0; t_len * d];
        linear(&mut proj, &attn, p(params, bl.proj_w, d * d), p(params, bl.proj_b, d), d, d);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }
        let mut a2 = vec![0.0; t_len * d];
        let ln2 = layer_norm(&mut a2, &x, p(params, bl.ln2_g, d), p(params, bl.ln2_b, d), d);
        let mut h_pre = vec![0.0; t_len * 4 * d];
        linear(&mut h_pre, &a2, p(params, bl.fc_w, 4 * d * d), p(params, bl.fc_b, 4 * d), d, 4 * d);
        let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
        let mut m = vec![0.0; t_len * d];
        linear(&mut m, &h_act, p(params, bl.out_w, 4 * d * d), p(params, bl.out_b, d), 4 * d, d);
        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi += mi;
        }
        blocks.push(BlockCache {
            ln1,
            a1,
            qkv,
            probs,
            attn,
            ln2,
            a2,
            h_pre,
            h_act,
        });
    }

    let mut z = vec![0.0; t_len * d];
    let lnf = layer_norm(&mut z, &x, p(params, lay.lnf_g, d), p(params, lay.lnf_b, d), d);
    let v = lay.vocab;
    let mut logits = vec![0.0; t_len * v];
    linear(&mut logits, &z, p(params, lay.head_w, d * v), p(params, lay.head_b, v), d, v);
    Forward {
        tokens: tokens.to_vec(),
        blocks,
        lnf,
        z,
        logits,
    }
}

fn p(params: &[f64], at: usize, n: usize) -> &[f64] {
    &params[at..at + n]
}

/// Splits `grad` into the disjoint mutable slices of one block.
struct BlockGrads<'a> {
    ln1_g: &'a mut [f64],
    ln1_b: &'a mut [f64],
    qkv_w: &'a mut [f64],
    qkv_b: &'a mut [f64],
    proj_w: &'a mut [f64],
    proj_b: &'a mut [f64],
    ln2_g: &'a mut [f64],
    ln2_b: &'a mut [f64],
    fc_w: &'a mut [f64],
    fc_b: &'a mut [f64],
    out_w: &'a mut [f64],
    out_b: &'a mut [f64],
}

fn block_grads<'a>(grad: &'a mut [f64], bl: &BlockLayout, d: usize) -> BlockGrads<'a> {
    // Block tensors are laid out contiguously in declaration order.
    let (_, rest) = grad.split_at_mut(bl.ln1_g);
    let (ln1_g, rest) = rest.split_at_mut(d);
    let (ln1_b, rest) = rest.split_at_mut(d);
    let (qkv_w, rest) = rest.split_at_mut(3 * d * d);
    let (qkv_b, rest) = rest.split_at_mut(3 * d);
    let (proj_w, rest) = rest.split_at_mut(d * d);
    let (proj_b, rest) = rest.split_at_mut(d);
    let (ln2_g, rest) = rest.split_at_mut(d);
    let (ln2_b, rest) = rest.split_at_mut(d);
    let (fc_w, rest) = rest.split_at_mut(4 * d * d);
    let (fc_b, rest) = rest.split_at_mut(4 * d);
    let (out_w, rest) = rest.split_at_mut(4 * d * d);
    let (out_b, _) = rest.split_at_mut(d);
    BlockGrads {
        ln1_g,
        ln1_b,
        qkv_w,
        qkv_b,
        proj_w,
        proj_b,
        ln2_g,
        ln2_b,
        fc_w,
        fc_b,
        out_w,
        out_b,
    }
}

/// Back-propagates `dlogits` (gradient of some scalar w.r.t. the logits)
/// and adds the parameter gradient into `grad`.
pub fn backward(
    lay: &Layout,
    heads: usize,
    params: &[f64],
    fwd: &Forward,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let d = lay.d;
    let v = lay.vocab;
    let t_len = fwd.tokens.len();

    let mut dz = vec![0.0; t_len * d];
    {
        let (head_w, head_b) = grad[lay.head_w..].split_at_mut(d * v);
        linear_back(
            &mut dz,
            head_w,
            &mut head_b[..v],
            dlogits,
            &fwd.z,
            p(params, lay.head_w, d * v),
            d,
            v,
        );
    }
    let mut dx = vec![0.0; t_len * d];
    {
        let (g, b) = grad[lay.lnf_g..].split_at_mut(d);
        layer_norm_back(&mut dx, g, &mut b[..d], &dz, &fwd.lnf, p(params, lay.lnf_g, d), d);
    }

    for (bl, cache) in lay.blocks.iter().zip(&fwd.blocks).rev() {
        let gb = block_grads(grad, bl, d);
        // MLP branch: dx is the gradient w.r.t. the block output and also
        // flows unchanged through the residual.
        let mut dh_act = vec![0.0; t_len * 4 * d];
        linear_back(
            &mut dh_act,
            gb.out_w,
            gb.out_b,
            &dx,
            &cache.h_act,
            p(params, bl.out_w, 4 * d * d),
            4 * d,
            d,
        );
        for (g, &x) in dh_act.iter_mut().zip(&cache.h_pre) {
            *g *= gelu_grad(x);
        }
        let mut da2 = vec![0.0; t_len * d];
        linear_back(
            &mut da2,
            gb.fc_w,
            gb.fc_b,
            &dh_act,
            &cache.a2,
            p(params, bl.fc_w, 4 * d * d),
            d,
            4 * d,
        );
        layer_norm_back(&mut dx, gb.ln2_g, gb.ln2_b, &da2, &cache.ln2, p(params, bl.ln2_g, d), d);

        // Attention branch.
        let mut dattn = vec![0.0; t_len * d];
        linear_back(
            &mut dattn,
            gb.proj_w,
            gb.proj_b,
            &dx,
            &cache.attn,
            p(params, bl.proj_w, d * d),
            d,
            d,
        );
        let mut dqkv = vec![0.0; t_len * 3 * d];
        attention_back(&mut dqkv, &dattn, &cache.qkv, &cache.probs, t_len, d, heads);
        let mut da1 = vec![0.0; t_len * d];
        linear_back(
            &mut da1,
            gb.qkv_w,
            gb.qkv_b,
            &dqkv,
            &cache.a1,
            p(params, bl.qkv_w, 3 * d * d),
            d,
            3 * d,
        );
        layer_norm_back(&mut dx, gb.ln1_g, gb.ln1_b, &da1, &cache.ln1, p(params, bl.ln1_g, d), d);
    }

    for t in 0..t_len {
        let g = &dx[t * d..(t + 1) * d];
        let pos = &mut grad[lay.wpe + t * d..lay.wpe + (t + 1) * d];
        for (a, b) in pos.iter_mut().zip(g) {
            *a += b;
        }
        let at = if t == 0 {
            lay.bos
        } else {
            lay.wte + fwd.tokens[t - 1] as usize * d
        };
        for (a, b) in grad[at..at + d].iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Log-softmax of one logit row.
pub fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    for (o, &l) in out.iter_mut().zip(row) {
        *o = l - lse;
    }
}
