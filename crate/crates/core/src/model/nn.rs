//! Dense f64 kernels with hand-written backward passes. Matrices are
//! row-major; a weight `w` of shape `[out, in]` maps rows of width `in` to
//! rows of width `out`.

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x w^T + b` for `x: [n, d_in]`, `w: [d_out, d_in]`.
pub(crate) fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, d_in: usize, d_out: usize) -> Vec<f64> {
    let n = x.len() / d_in;
    let mut y = vec![0.0; n * d_out];
    for r in 0..n {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * d_in..(o + 1) * d_in]) + b.map_or(0.0, |b| b[o]);
        }
    }
    y
}

/// Accumulates weight and bias gradients, returns the input gradient.
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let n = x.len() / d_in;
    let mut dx = vec![0.0; n * d_in];
    for r in 0..n {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let dyr = &dy[r * d_out..(r + 1) * d_out];
        let dxr = &mut dx[r * d_in..(r + 1) * d_in];
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, &w[o * d_in..(o + 1) * d_in], dxr);
            axpy(g, xr, &mut dw[o * d_in..(o + 1) * d_in]);
        }
    }
    if let Some(db) = db {
        for r in 0..n {
            for (b, g) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
                *b += g;
            }
        }
    }
    dx
}

pub(crate) struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    g: &[f64],
    dy: &[f64],
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) struct AttnCache {
    probs: Vec<f64>, // [heads, n, n]
}

/// Multi-head scaled dot-product attention over packed `qkv: [n, 3d]`.
pub(crate) fn attention(qkv: &[f64], n: usize, d: usize, heads: usize, causal: bool) -> (Vec<f64>, AttnCache) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    let row = 3 * d;
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..n {
            let q = &qkv[i * row + qo..i * row + qo + hd];
            let span = if causal { i + 1 } else { n };
            let p = &mut probs[(h * n + i) * n..(h * n + i) * n + n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..span {
                let s = dot(q, &qkv[j * row + ko..j * row + ko + hd]) * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pj in p.iter_mut().take(span) {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let o = &mut out[i * d + h * hd..i * d + h * hd + hd];
            for j in 0..span {
                p[j] /= z;
                axpy(p[j], &qkv[j * row + vo..j * row + vo + hd], o);
            }
        }
    }
    (out, AttnCache { probs })
}

pub(crate) fn attention_backward(
    qkv: &[f64],
    cache: &AttnCache,
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let row = 3 * d;
    let mut dqkv = vec![0.0; n * row];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..n {
            let span = if causal { i + 1 } else { n };
            let p = &cache.probs[(h * n + i) * n..(h * n + i) * n + n];
            let dout_i = &dout[i * d + h * hd..i * d + h * hd + hd];
            let mut weighted = 0.0;
            for j in 0..span {
                dp[j] = dot(dout_i, &qkv[j * row + vo..j * row + vo + hd]);
                weighted += p[j] * dp[j];
                axpy(p[j], dout_i, &mut dqkv[j * row + vo..j * row + vo + hd]);
            }
            for j in 0..span {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &qkv[j * row + ko..j * row + ko + hd], &mut dqkv[i * row + qo..i * row + qo + hd]);
                axpy(ds, &qkv[i * row + qo..i * row + qo + hd], &mut dqkv[j * row + ko..j * row + ko + hd]);
            }
        }
    }
    dqkv
}

/// Mean cross-entropy over masked rows of `logits: [n, vocab]`. Returns the
/// loss, the logits gradient, and the number of contributing rows.
pub(crate) fn masked_cross_entropy(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
    want_grad: bool,
) -> (f64, Vec<f64>, usize) {
    let count = mask.iter().filter(|&&m| m).count();
    let mut dlogits = if want_grad { vec![0.0; logits.len()] } else { Vec::new() };
    if count == 0 {
        return (0.0, dlogits, 0);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[t as usize];
        if want_grad {
            let g = &mut dlogits[i * vocab..(i + 1) * vocab];
            for (gj, v) in g.iter_mut().zip(row) {
                *gj = (v - lse).exp() * inv;
            }
            g[t as usize] -= inv;
        }
    }
    (total * inv, dlogits, count)
}
