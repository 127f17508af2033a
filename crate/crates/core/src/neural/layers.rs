//! Differentiable building blocks. Every layer works on a stack of
//! sequences: rows of one matrix, split into contiguous segments, so dense
//! layers run as a single product over the whole stack and only attention
//! looks at segment boundaries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, matmul, matmul_nt, matmul_tn_acc, Mat, Strides};

const LN_EPS: f64 = 1e-5;

/// Contiguous row ranges `(start, len)`, one per sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segments(pub Vec<(usize, usize)>);

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut start = 0;
        let mut out = Vec::new();
        for len in lengths {
            out.push((start, len));
            start += len;
        }
        Segments(out)
    }

    pub fn total(&self) -> usize {
        self.0.last().map_or(0, |&(s, l)| s + l)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dropout and train/eval switch for one forward pass.
pub struct Mode<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Mode<'r> {
    pub fn eval() -> Self {
        Mode {
            dropout: 0.0,
            rng: None,
        }
    }

    /// Applies inverted dropout in place and returns the mask, if any.
    pub fn dropout(&mut self, x: &mut Mat) -> Option<Mat> {
        let p = self.dropout;
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        let mut mask = Mat::zeros(x.rows, x.cols);
        for (m, v) in mask.data.iter_mut().zip(x.data.iter_mut()) {
            if rng.gen::<f64>() >= p {
                *m = keep;
                *v *= keep;
            } else {
                *v = 0.0;
            }
        }
        Some(mask)
    }
}

pub(crate) fn apply_mask(dx: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        for (d, k) in dx.data.iter_mut().zip(&m.data) {
            *d *= k;
        }
    }
}

pub(crate) fn normal_mat(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
}

/// Visits parameter tensors in declaration order.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`.
    pub w: Mat,
    /// `1 x out`. Left out where a softmax downstream would cancel it.
    pub b: Option<Mat>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: normal_mat(input, output, (input as f64).powf(-0.5), rng),
            b: Some(Mat::zeros(1, output)),
        }
    }

    pub fn without_bias(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            b: None,
            ..Linear::new(input, output, rng)
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Mat::zeros_like(&self.w),
            b: self.b.as_ref().map(Mat::zeros_like),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.w);
        if let Some(b) = &self.b {
            for i in 0..y.rows {
                for (v, bj) in y.row_mut(i).iter_mut().zip(&b.data) {
                    *v += bj;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, g: &mut Linear, x: &Mat, dy: &Mat) -> Mat {
        matmul_tn_acc(x, dy, 1.0, &mut g.w);
        if let Some(gb) = &mut g.b {
            for i in 0..dy.rows {
                for (b, d) in gb.data.iter_mut().zip(dy.row(i)) {
                    *b += d;
                }
            }
        }
        matmul_nt(dy, &self.w)
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((format!("{prefix}.w"), &self.w));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.w);
        if let Some(b) = &mut self.b {
            out.push(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Mat,
    pub bias: Mat,
}

pub struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Mat::from_vec(1, d, vec![1.0; d]),
            bias: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Mat::zeros_like(&self.gain),
            bias: Mat::zeros_like(&self.bias),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.cols as f64;
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            let yr = &mut y.data[i * x.cols..(i + 1) * x.cols];
            for j in 0..x.cols {
                yr[j] = xhat.data[i * x.cols + j] * self.gain.data[j] + self.bias.data[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, g: &mut LayerNorm, cache: &LnCache, dy: &Mat) -> Mat {
        let cols = dy.cols;
        let d = cols as f64;
        let mut dx = Mat::zeros(dy.rows, cols);
        let mut dxhat = vec![0.0; cols];
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..cols {
                g.gain.data[j] += dyr[j] * xh[j];
                g.bias.data[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gain.data[j];
                mean_d += dxhat[j];
                mean_dx += dxhat[j] * xh[j];
            }
            mean_d /= d;
            mean_dx /= d;
            let r = cache.rstd[i];
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                *out = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FfnCache {
    pre: Mat,
    act: Mat,
}

impl FeedForward {
    pub fn new(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(d, hidden, rng),
            down: Linear::new(hidden, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FeedForward {
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FfnCache) {
        let pre = self.up.forward(x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.down.forward(&act);
        (y, FfnCache { pre, act })
    }

    pub fn backward(&self, g: &mut FeedForward, x: &Mat, cache: &FfnCache, dy: &Mat) -> Mat {
        let mut dact = self.down.backward(&mut g.down, &cache.act, dy);
        for (d, p) in dact.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_grad(*p);
        }
        self.up.backward(&mut g.up, x, &dact)
    }
}

impl Params for FeedForward {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.up.collect_mut(out);
        self.down.collect_mut(out);
    }
}

/// Multi-head scaled dot-product attention without causal masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    ctx: Mat,
    /// One row-stochastic matrix per (segment, head), segment-major.
    probs: Vec<Mat>,
}

impl Attention {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d % heads == 0, "model width must divide into heads");
        Attention {
            heads,
            q: Linear::new(d, d, rng),
            k: Linear::without_bias(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            heads: self.heads,
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    /// Segment `i` of `xq` attends to segment `i` of `xkv`.
    pub fn forward(
        &self,
        xq: &Mat,
        qsegs: &Segments,
        xkv: &Mat,
        kvsegs: &Segments,
    ) -> (Mat, AttnCache) {
        let d = xq.cols;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let mut ctx = Mat::zeros(xq.rows, d);
        let mut probs = Vec::with_capacity(qsegs.len() * self.heads);
        for (&(qs, ql), &(ks, kl)) in qsegs.0.iter().zip(&kvsegs.0) {
            for h in 0..self.heads {
                let mut p = Mat::zeros(ql, kl);
                gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    &q.data,
                    Strides::rm(qs * d + h * dh, d, false),
                    &k.data,
                    Strides {
                        offset: ks * d + h * dh,
                        rs: 1,
                        cs: d,
                    },
                    0.0,
                    &mut p.data,
                    Strides::rm(0, kl, false),
                );
                crate::tensor::softmax_rows_inplace(&mut p);
                gemm(
                    ql,
                    kl,
                    dh,
                    1.0,
                    &p.data,
                    Strides::rm(0, kl, false),
                    &v.data,
                    Strides::rm(ks * d + h * dh, d, false),
                    0.0,
                    &mut ctx.data,
                    Strides::rm(qs * d + h * dh, d, false),
                );
                probs.push(p);
            }
        }
        let out = self.o.forward(&ctx);
        (
            out,
            AttnCache {
                q,
                k,
                v,
                ctx,
                probs,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        g: &mut Attention,
        xq: &Mat,
        qsegs: &Segments,
        xkv: &Mat,
        kvsegs: &Segments,
        cache: &AttnCache,
        dy: &Mat,
    ) -> (Mat, Mat) {
        let d = xq.cols;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.o.backward(&mut g.o, &cache.ctx, dy);
        let mut dq = Mat::zeros(cache.q.rows, d);
        let mut dk = Mat::zeros(cache.k.rows, d);
        let mut dv = Mat::zeros(cache.v.rows, d);
        let mut idx = 0;
        for (&(qs, ql), &(ks, kl)) in qsegs.0.iter().zip(&kvsegs.0) {
            for h in 0..self.heads {
                let p = &cache.probs[idx];
                idx += 1;
                let qo = Strides::rm(qs * d + h * dh, d, false);
                let ko = Strides::rm(ks * d + h * dh, d, false);
                // dP = dctx_h v_hᵀ
                let mut ds = Mat::zeros(ql, kl);
                gemm(
                    ql,
                    dh,
                    kl,
                    1.0,
                    &dctx.data,
                    qo,
                    &cache.v.data,
                    Strides {
                        offset: ks * d + h * dh,
                        rs: 1,
                        cs: d,
                    },
                    0.0,
                    &mut ds.data,
                    Strides::rm(0, kl, false),
                );
                // dv_h += Pᵀ dctx_h
                gemm(
                    kl,
                    ql,
                    dh,
                    1.0,
                    &p.data,
                    Strides::rm(0, kl, true),
                    &dctx.data,
                    qo,
                    1.0,
                    &mut dv.data,
                    ko,
                );
                for i in 0..ql {
                    let pr = p.row(i);
                    let dr = &mut ds.data[i * kl..(i + 1) * kl];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                // dq_h = dS k_h, dk_h = dSᵀ q_h
                gemm(
                    ql,
                    kl,
                    dh,
                    1.0,
                    &ds.data,
                    Strides::rm(0, kl, false),
                    &cache.k.data,
                    ko,
                    1.0,
                    &mut dq.data,
                    qo,
                );
                gemm(
                    kl,
                    ql,
                    dh,
                    1.0,
                    &ds.data,
                    Strides::rm(0, kl, true),
                    &cache.q.data,
                    qo,
                    1.0,
                    &mut dk.data,
                    ko,
                );
            }
        }
        let dxq = self.q.backward(&mut g.q, xq, &dq);
        let mut dxkv = self.k.backward(&mut g.k, xkv, &dk);
        dxkv.add_assign(&self.v.backward(&mut g.v, xkv, &dv));
        (dxq, dxkv)
    }
}

impl Params for Attention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.q.collect(&format!("{prefix}.q"), out);
        self.k.collect(&format!("{prefix}.k"), out);
        self.v.collect(&format!("{prefix}.v"), out);
        self.o.collect(&format!("{prefix}.o"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.o.collect_mut(out);
    }
}

/// Pre-norm self-attention + feed-forward block. Also used as the single
/// query layer of the permutation head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct EncoderCache {
    a1: Mat,
    ln1: LnCache,
    attn: AttnCache,
    drop1: Option<Mat>,
    a2: Mat,
    ln2: LnCache,
    ffn: FfnCache,
    drop2: Option<Mat>,
}

impl EncoderBlock {
    pub fn new(d: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(d, hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderBlock {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat, segs: &Segments, mode: &mut Mode) -> (Mat, EncoderCache) {
        let (a1, ln1) = self.ln1.forward(x);
        let (mut h, attn) = self.attn.forward(&a1, segs, &a1, segs);
        let drop1 = mode.dropout(&mut h);
        h.add_assign(x);
        let (a2, ln2) = self.ln2.forward(&h);
        let (mut f, ffn) = self.ffn.forward(&a2);
        let drop2 = mode.dropout(&mut f);
        f.add_assign(&h);
        (
            f,
            EncoderCache {
                a1,
                ln1,
                attn,
                drop1,
                a2,
                ln2,
                ffn,
                drop2,
            },
        )
    }

    pub fn backward(
        &self,
        g: &mut EncoderBlock,
        segs: &Segments,
        c: &EncoderCache,
        dy: &Mat,
    ) -> Mat {
        let mut df = dy.clone();
        apply_mask(&mut df, &c.drop2);
        let da2 = self.ffn.backward(&mut g.ffn, &c.a2, &c.ffn, &df);
        let mut dh = self.ln2.backward(&mut g.ln2, &c.ln2, &da2);
        dh.add_assign(dy);
        let mut dattn = dh.clone();
        apply_mask(&mut dattn, &c.drop1);
        let (mut da1, da1kv) =
            self.attn
                .backward(&mut g.attn, &c.a1, segs, &c.a1, segs, &c.attn, &dattn);
        da1.add_assign(&da1kv);
        let mut dx = self.ln1.backward(&mut g.ln1, &c.ln1, &da1);
        dx.add_assign(&dh);
        dx
    }
}

impl Params for EncoderBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.ln1.collect_mut(out);
        self.attn.collect_mut(out);
        self.ln2.collect_mut(out);
        self.ffn.collect_mut(out);
    }
}

/// Pre-norm block: bidirectional self-attention, cross-attention to the
/// encoder states, feed-forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

pub struct DecoderCache {
    a1: Mat,
    ln1: LnCache,
    sa: AttnCache,
    drop1: Option<Mat>,
    a2: Mat,
    ln2: LnCache,
    ca: AttnCache,
    drop2: Option<Mat>,
    a3: Mat,
    ln3: LnCache,
    ffn: FfnCache,
    drop3: Option<Mat>,
}

impl DecoderBlock {
    pub fn new(d: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(d),
            self_attn: Attention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            cross_attn: Attention::new(d, heads, rng),
            ln3: LayerNorm::new(d),
            ffn: FeedForward::new(d, hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DecoderBlock {
            ln1: self.ln1.zeros_like(),
            self_attn: self.self_attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            ln3: self.ln3.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }

    pub fn forward(
        &self,
        x: &Mat,
        segs: &Segments,
        mem: &Mat,
        memsegs: &Segments,
        mode: &mut Mode,
    ) -> (Mat, DecoderCache) {
        let (a1, ln1) = self.ln1.forward(x);
        let (mut h1, sa) = self.self_attn.forward(&a1, segs, &a1, segs);
        let drop1 = mode.dropout(&mut h1);
        h1.add_assign(x);
        let (a2, ln2) = self.ln2.forward(&h1);
        let (mut h2, ca) = self.cross_attn.forward(&a2, segs, mem, memsegs);
        let drop2 = mode.dropout(&mut h2);
        h2.add_assign(&h1);
        let (a3, ln3) = self.ln3.forward(&h2);
        let (mut h3, ffn) = self.ffn.forward(&a3);
        let drop3 = mode.dropout(&mut h3);
        h3.add_assign(&h2);
        (
            h3,
            DecoderCache {
                a1,
                ln1,
                sa,
                drop1,
                a2,
                ln2,
                ca,
                drop2,
                a3,
                ln3,
                ffn,
                drop3,
            },
        )
    }

    /// Returns `dL/dx` and accumulates `dL/dmem` into `dmem`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        g: &mut DecoderBlock,
        segs: &Segments,
        mem: &Mat,
        memsegs: &Segments,
        c: &DecoderCache,
        dy: &Mat,
        dmem: &mut Mat,
    ) -> Mat {
        let mut d3 = dy.clone();
        apply_mask(&mut d3, &c.drop3);
        let da3 = self.ffn.backward(&mut g.ffn, &c.a3, &c.ffn, &d3);
        let mut dh2 = self.ln3.backward(&mut g.ln3, &c.ln3, &da3);
        dh2.add_assign(dy);

        let mut d2 = dh2.clone();
        apply_mask(&mut d2, &c.drop2);
        let (da2, dm) =
            self.cross_attn
                .backward(&mut g.cross_attn, &c.a2, segs, mem, memsegs, &c.ca, &d2);
        dmem.add_assign(&dm);
        let mut dh1 = self.ln2.backward(&mut g.ln2, &c.ln2, &da2);
        dh1.add_assign(&dh2);

        let mut d1 = dh1.clone();
        apply_mask(&mut d1, &c.drop1);
        let (mut da1, da1kv) =
            self.self_attn
                .backward(&mut g.self_attn, &c.a1, segs, &c.a1, segs, &c.sa, &d1);
        da1.add_assign(&da1kv);
        let mut dx = self.ln1.backward(&mut g.ln1, &c.ln1, &da1);
        dx.add_assign(&dh1);
        dx
    }
}

impl Params for DecoderBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ln3.collect(&format!("{prefix}.ln3"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.ln1.collect_mut(out);
        self.self_attn.collect_mut(out);
        self.ln2.collect_mut(out);
        self.cross_attn.collect_mut(out);
        self.ln3.collect_mut(out);
        self.ffn.collect_mut(out);
    }
}
