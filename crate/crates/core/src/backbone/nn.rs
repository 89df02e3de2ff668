//! Forward and backward passes of the transformer building blocks.
//!
//! Every block reads its weights from the flat parameter slice by offset and
//! accumulates weight gradients into a flat gradient slice of the same
//! layout. Activations are row-major `rows × cols` vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc};

pub const LN_EPS: f64 = 1e-5;

/// Offsets of an affine map `y = x·W + b` with `W` stored `d_in × d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lin {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Lin {
    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.d_in * self.d_out]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.d_out]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(n * self.d_out);
        for _ in 0..n {
            y.extend_from_slice(self.bias(p));
        }
        gemm_acc(x, self.weight(p), &mut y, n, self.d_in, self.d_out);
        y
    }

    /// Accumulate weight gradients and, when asked, the input gradient.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        dy: &[f64],
        n: usize,
        dx: Option<&mut [f64]>,
    ) {
        let (d_in, d_out) = (self.d_in, self.d_out);
        gemm_tn_acc(x, dy, &mut g[self.w..self.w + d_in * d_out], n, d_in, d_out);
        let gb = &mut g[self.b..self.b + d_out];
        for row in dy.chunks_exact(d_out) {
            for (gv, &dv) in gb.iter_mut().zip(row) {
                *gv += dv;
            }
        }
        if let Some(dx) = dx {
            gemm_nt_acc(dy, self.weight(p), dx, n, d_out, d_in);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

pub struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl Norm {
    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> (Vec<f64>, NormCache) {
        let d = self.dim;
        let gain = &p[self.gain..self.gain + d];
        let bias = &p[self.bias..self.bias + d];
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                y[i * d + j] = gain[j] * h + bias[j];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &NormCache,
        dy: &[f64],
        n: usize,
    ) -> Vec<f64> {
        let d = self.dim;
        let mut dx = vec![0.0; n * d];
        for i in 0..n {
            let xh = &cache.xhat[i * d..(i + 1) * d];
            let dyr = &dy[i * d..(i + 1) * d];
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                g[self.gain + j] += dyr[j] * xh[j];
                g[self.bias + j] += dyr[j];
                let dxh = dyr[j] * p[self.gain + j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            let r = cache.rstd[i];
            for j in 0..d {
                let dxh = dyr[j] * p[self.gain + j];
                dx[i * d + j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

/// Inverted dropout mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

pub fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn head_slice(x: &[f64], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn head_scatter_add(dst: &mut [f64], src: &[f64], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for (a, &b) in dst[r * d + h * dh..r * d + (h + 1) * dh]
            .iter_mut()
            .zip(&src[r * dh..(r + 1) * dh])
        {
            *a += b;
        }
    }
}

/// Multi-head scaled dot-product attention of `n` queries over `m` keys.
/// Returns the concatenated head outputs (`n × d`) and the attention
/// probabilities (`heads × n × m`).
pub fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * m];
    for h in 0..heads {
        let qh = head_slice(q, n, d, h, dh);
        let kh = head_slice(k, m, d, h, dh);
        let vh = head_slice(v, m, d, h, dh);
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let row = &mut p[i * m..(i + 1) * m];
            let visible = if causal { (i + 1).min(m) } else { m };
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let s = scale * dot(&qh[i * dh..(i + 1) * dh], &kh[j * dh..(j + 1) * dh]);
                row[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for s in row[..visible].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row[..visible].iter_mut() {
                *s /= sum;
            }
        }
        let mut oh = vec![0.0; n * dh];
        gemm_acc(p, &vh, &mut oh, n, m, dh);
        head_scatter_add(&mut out, &oh, n, d, h, dh);
    }
    (out, probs)
}

/// Gradients of [`attend`], accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let qh = head_slice(q, n, d, h, dh);
        let kh = head_slice(k, m, d, h, dh);
        let vh = head_slice(v, m, d, h, dh);
        let doh = head_slice(dout, n, d, h, dh);
        let p = &probs[h * n * m..(h + 1) * n * m];

        let mut dvh = vec![0.0; m * dh];
        gemm_tn_acc(p, &doh, &mut dvh, n, m, dh);
        let mut dp = vec![0.0; n * m];
        gemm_nt_acc(&doh, &vh, &mut dp, n, dh, m);
        // softmax backward; masked entries have p = 0 and drop out
        let mut ds = vec![0.0; n * m];
        for i in 0..n {
            let pr = &p[i * m..(i + 1) * m];
            let dpr = &dp[i * m..(i + 1) * m];
            let inner = dot(pr, dpr);
            for j in 0..m {
                ds[i * m + j] = scale * pr[j] * (dpr[j] - inner);
            }
        }
        let mut dqh = vec![0.0; n * dh];
        gemm_acc(&ds, &kh, &mut dqh, n, m, dh);
        let mut dkh = vec![0.0; m * dh];
        gemm_tn_acc(&ds, &qh, &mut dkh, n, m, dh);

        head_scatter_add(dq, &dqh, n, d, h, dh);
        head_scatter_add(dk, &dkh, m, d, h, dh);
        head_scatter_add(dv, &dvh, m, d, h, dh);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnParams {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

/// Keys and values of an attended sequence, projected once and reused.
#[derive(Debug, Clone)]
pub struct KeyValue {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub len: usize,
}

impl AttnParams {
    pub fn project_kv(&self, p: &[f64], mem: &[f64], len: usize) -> KeyValue {
        KeyValue {
            k: self.k.forward(p, mem, len),
            v: self.v.forward(p, mem, len),
            len,
        }
    }

    /// Backward of [`AttnParams::project_kv`]; accumulates into `dmem`.
    pub fn project_kv_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        mem: &[f64],
        len: usize,
        dk: &[f64],
        dv: &[f64],
        dmem: &mut [f64],
    ) {
        self.k.backward(p, g, mem, dk, len, Some(dmem));
        self.v.backward(p, g, mem, dv, len, Some(dmem));
    }
}

/// Self-attention sub-layer cache.
pub struct SelfAttnCache {
    x: Vec<f64>,
    q: Vec<f64>,
    kv: KeyValue,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    mask: Option<Vec<f64>>,
}

pub fn self_attention(
    a: &AttnParams,
    p: &[f64],
    x: &[f64],
    n: usize,
    heads: usize,
    causal: bool,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, SelfAttnCache) {
    let d = a.q.d_in;
    let q = a.q.forward(p, x, n);
    let kv = a.project_kv(p, x, n);
    let (ctx, probs) = attend(&q, &kv.k, &kv.v, n, n, d, heads, causal);
    let mut out = a.o.forward(p, &ctx, n);
    let mask = dropout_mask(out.len(), dropout, rng);
    apply_mask(&mut out, &mask);
    (
        out,
        SelfAttnCache {
            x: x.to_vec(),
            q,
            kv,
            probs,
            ctx,
            mask,
        },
    )
}

pub fn self_attention_backward(
    a: &AttnParams,
    p: &[f64],
    g: &mut [f64],
    c: &SelfAttnCache,
    dout: &[f64],
    n: usize,
    heads: usize,
) -> Vec<f64> {
    let d = a.q.d_in;
    let mut dout = dout.to_vec();
    apply_mask(&mut dout, &c.mask);
    let mut dctx = vec![0.0; n * d];
    a.o.backward(p, g, &c.ctx, &dout, n, Some(&mut dctx));
    let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
    attend_backward(
        &c.q, &c.kv.k, &c.kv.v, &c.probs, &dctx, n, n, d, heads, &mut dq, &mut dk, &mut dv,
    );
    let mut dx = vec![0.0; n * d];
    a.q.backward(p, g, &c.x, &dq, n, Some(&mut dx));
    a.project_kv_backward(p, g, &c.x, n, &dk, &dv, &mut dx);
    dx
}

/// Cross-attention of `n` queries over several memories whose context
/// vectors are mixed with convex weights before the output projection.
/// A single memory with weight 1 is ordinary cross-attention.
pub struct FusedCrossCache {
    x: Vec<f64>,
    q: Vec<f64>,
    /// (memory index, weight, probs, ctx) for every memory with nonzero weight.
    parts: Vec<(usize, f64, Vec<f64>, Vec<f64>)>,
    fused: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl FusedCrossCache {
    /// Per-memory context vectors before mixing, for inspection.
    pub fn contexts(&self) -> impl Iterator<Item = (usize, f64, &[f64])> {
        self.parts.iter().map(|(j, w, _, c)| (*j, *w, c.as_slice()))
    }

    pub fn fused(&self) -> &[f64] {
        &self.fused
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fused_cross_attention(
    a: &AttnParams,
    p: &[f64],
    x: &[f64],
    n: usize,
    memories: &[&KeyValue],
    weights: &[f64],
    heads: usize,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, FusedCrossCache) {
    let d = a.q.d_in;
    let q = a.q.forward(p, x, n);
    let mut fused = vec![0.0; n * d];
    let mut parts = Vec::new();
    for (j, (mem, &w)) in memories.iter().zip(weights).enumerate() {
        // zero-weight memories contribute exactly nothing
        if w == 0.0 {
            continue;
        }
        let (ctx, probs) = attend(&q, &mem.k, &mem.v, n, mem.len, d, heads, false);
        for (f, &c) in fused.iter_mut().zip(&ctx) {
            *f += w * c;
        }
        parts.push((j, w, probs, ctx));
    }
    let mut out = a.o.forward(p, &fused, n);
    let mask = dropout_mask(out.len(), dropout, rng);
    apply_mask(&mut out, &mask);
    (
        out,
        FusedCrossCache {
            x: x.to_vec(),
            q,
            parts,
            fused,
            mask,
        },
    )
}

/// Returns the query-side input gradient and, per memory, `(dk, dv)`
/// (zero vectors for memories that were skipped).
#[allow(clippy::too_many_arguments)]
pub fn fused_cross_attention_backward(
    a: &AttnParams,
    p: &[f64],
    g: &mut [f64],
    c: &FusedCrossCache,
    memories: &[&KeyValue],
    dout: &[f64],
    n: usize,
    heads: usize,
) -> (Vec<f64>, Vec<Option<(Vec<f64>, Vec<f64>)>>) {
    let d = a.q.d_in;
    let mut dout = dout.to_vec();
    apply_mask(&mut dout, &c.mask);
    let mut dfused = vec![0.0; n * d];
    a.o.backward(p, g, &c.fused, &dout, n, Some(&mut dfused));
    let mut dq = vec![0.0; n * d];
    let mut dmem: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; memories.len()];
    for (j, w, probs, _) in &c.parts {
        let mem = memories[*j];
        let dctx: Vec<f64> = dfused.iter().map(|v| w * v).collect();
        let mut dk = vec![0.0; mem.len * d];
        let mut dv = vec![0.0; mem.len * d];
        attend_backward(
            &c.q, &mem.k, &mem.v, probs, &dctx, n, mem.len, d, heads, &mut dq, &mut dk, &mut dv,
        );
        dmem[*j] = Some((dk, dv));
    }
    let mut dx = vec![0.0; n * d];
    a.q.backward(p, g, &c.x, &dq, n, Some(&mut dx));
    (dx, dmem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Lin,
    pub down: Lin,
}

pub struct FeedForwardCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl FeedForward {
    pub fn forward(
        &self,
        p: &[f64],
        x: &[f64],
        n: usize,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, FeedForwardCache) {
        let mut hidden = self.up.forward(p, x, n);
        for h in hidden.iter_mut() {
            if *h < 0.0 {
                *h = 0.0;
            }
        }
        let mut out = self.down.forward(p, &hidden, n);
        let mask = dropout_mask(out.len(), dropout, rng);
        apply_mask(&mut out, &mask);
        (
            out,
            FeedForwardCache {
                x: x.to_vec(),
                hidden,
                mask,
            },
        )
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &FeedForwardCache,
        dout: &[f64],
        n: usize,
    ) -> Vec<f64> {
        let mut dout = dout.to_vec();
        apply_mask(&mut dout, &c.mask);
        let mut dh = vec![0.0; n * self.up.d_out];
        self.down.backward(p, g, &c.hidden, &dout, n, Some(&mut dh));
        for (d, &h) in dh.iter_mut().zip(&c.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dx = vec![0.0; n * self.up.d_in];
        self.up.backward(p, g, &c.x, &dh, n, Some(&mut dx));
        dx
    }
}

/// `a + b`, elementwise.
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
