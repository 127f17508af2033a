use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_mask, normal_mat, DecoderBlock, DecoderCache, EncoderBlock, EncoderCache, Linear,
    LnCache, LayerNorm, Mode, Params, Segments,
};
use crate::error::{Error, Result};
use crate::refine::{unrolled_loss, SundaeConfig};
use crate::search::{permutation_nll_grad, PointerMatrix};
use crate::tensor::{log_softmax_rows, matmul, matmul_nt, matmul_tn_acc, Mat};
use crate::types::{TokenId, TrainingExample};

/// Examples per independently computed gradient chunk. Fixed so that the
/// summation order, and therefore the result, does not depend on the
/// number of worker threads.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled in from the vocabulary when left at zero.
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    /// Longest encoder or decoder sequence, in tokens.
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 48,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            max_len: 128,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 {
            return bad("model vocab_size is zero");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.ffn_mult == 0 || self.max_len < 2 {
            return bad("ffn_mult must be positive and max_len at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// All trainable tensors. A second instance with the same shapes holds
/// gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub enc: Vec<EncoderBlock>,
    pub enc_norm: LayerNorm,
    pub key: Linear,
    pub query: EncoderBlock,
    pub dec: Vec<DecoderBlock>,
    pub dec_norm: LayerNorm,
    /// `d x V`; absent when the output projection reuses `tok_emb`.
    pub out_w: Option<Mat>,
    pub out_b: Mat,
}

/// Knobs of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Weight of the permutation term.
    pub lambda_per: f64,
    pub sundae: SundaeConfig,
    /// Sampling temperature for the second-pass input.
    pub temperature: f64,
    /// Enables dropout.
    pub train: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda_per: 5.0,
            sundae: SundaeConfig::default(),
            temperature: 1.0,
            train: true,
        }
    }
}

/// Where the second decoder pass takes its `<msk>`-slot tokens from.
#[derive(Debug, Clone, Copy)]
pub enum Pass2<'a> {
    /// Drawn from the first pass's distribution.
    Sample,
    /// Given explicitly, one vector per example in slot order.
    Fixed(&'a [Vec<TokenId>]),
}

/// Loss totals for a batch (means over examples).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub perm: f64,
    pub dec: f64,
    pub examples: usize,
}

impl LossReport {
    fn add(&mut self, other: &LossReport) {
        self.total += other.total;
        self.perm += other.perm;
        self.dec += other.dec;
        self.examples += other.examples;
    }
}

struct EncState {
    segs: Segments,
    tokens: Vec<TokenId>,
    drop0: Option<Mat>,
    blocks: Vec<(Mat, EncoderCache)>,
    norm: LnCache,
    h: Mat,
}

struct DecState {
    segs: Segments,
    tokens: Vec<TokenId>,
    drop0: Option<Mat>,
    blocks: Vec<(Mat, DecoderCache)>,
    norm: LnCache,
    rows: Vec<usize>,
    z: Mat,
    logp: Mat,
}

struct PtrState {
    key: Mat,
    query_cache: EncoderCache,
    query: Mat,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hidden = d * config.ffn_mult;
        let tok_emb = normal_mat(config.vocab_size, d, 0.1, &mut rng);
        let pos_emb = normal_mat(config.max_len, d, 0.1, &mut rng);
        let enc = (0..config.enc_layers)
            .map(|_| EncoderBlock::new(d, config.heads, hidden, &mut rng))
            .collect();
        let key = Linear::without_bias(d, d, &mut rng);
        let query = EncoderBlock::new(d, config.heads, hidden, &mut rng);
        let dec = (0..config.dec_layers)
            .map(|_| DecoderBlock::new(d, config.heads, hidden, &mut rng))
            .collect();
        let out_w = (!config.tie_embeddings)
            .then(|| normal_mat(d, config.vocab_size, (d as f64).powf(-0.5), &mut rng));
        Ok(ModelParams {
            config,
            tok_emb,
            pos_emb,
            enc,
            enc_norm: LayerNorm::new(d),
            key,
            query,
            dec,
            dec_norm: LayerNorm::new(d),
            out_w,
            out_b: Mat::zeros(1, config.vocab_size),
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.enc.iter().enumerate() {
            b.collect(&format!("enc.{i}"), &mut out);
        }
        self.enc_norm.collect("enc_norm", &mut out);
        self.key.collect("ptr.key", &mut out);
        self.query.collect("ptr.query", &mut out);
        for (i, b) in self.dec.iter().enumerate() {
            b.collect(&format!("dec.{i}"), &mut out);
        }
        self.dec_norm.collect("dec_norm", &mut out);
        if let Some(w) = &self.out_w {
            out.push(("out.w".to_string(), w));
        }
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    /// Mutable tensors, same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.enc {
            b.collect_mut(&mut out);
        }
        self.enc_norm.collect_mut(&mut out);
        self.key.collect_mut(&mut out);
        self.query.collect_mut(&mut out);
        for b in &mut self.dec {
            b.collect_mut(&mut out);
        }
        self.dec_norm.collect_mut(&mut out);
        if let Some(w) = &mut self.out_w {
            out.push(w);
        }
        out.push(&mut self.out_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// `self += k * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, k: f64) {
        let src: Vec<&Mat> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(&s.data) {
                *a += k * b;
            }
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::LengthExceeded {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn embed(&self, seqs: &[&[TokenId]], mode: &mut Mode) -> Result<(Mat, Segments, Vec<TokenId>, Option<Mat>)> {
        let d = self.config.d_model;
        let segs = Segments::from_lengths(seqs.iter().map(|s| s.len()));
        let mut x = Mat::zeros(segs.total(), d);
        let mut tokens = Vec::with_capacity(segs.total());
        for seq in seqs {
            self.check_len(seq.len())?;
            for (pos, &t) in seq.iter().enumerate() {
                if t as usize >= self.config.vocab_size {
                    return Err(Error::InvalidVocab(format!(
                        "token id {t} outside model vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                let row = tokens.len();
                let dst = x.row_mut(row);
                for ((o, e), p) in dst.iter_mut().zip(self.tok_emb.row(t as usize)).zip(self.pos_emb.row(pos)) {
                    *o = e + p;
                }
                tokens.push(t);
            }
        }
        let drop = mode.dropout(&mut x);
        Ok((x, segs, tokens, drop))
    }

    fn embed_backward(&self, g: &mut ModelParams, segs: &Segments, tokens: &[TokenId], drop: &Option<Mat>, dx: &Mat) {
        let mut dx = dx.clone();
        apply_mask(&mut dx, drop);
        for &(start, len) in &segs.0 {
            for pos in 0..len {
                let row = dx.row(start + pos);
                let t = tokens[start + pos] as usize;
                for (a, b) in g.tok_emb.row_mut(t).iter_mut().zip(row) {
                    *a += b;
                }
                for (a, b) in g.pos_emb.row_mut(pos).iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
    }

    fn encode_stack(&self, seqs: &[&[TokenId]], mode: &mut Mode) -> Result<EncState> {
        let (mut x, segs, tokens, drop0) = self.embed(seqs, mode)?;
        let mut blocks = Vec::with_capacity(self.enc.len());
        for b in &self.enc {
            let (y, c) = b.forward(&x, &segs, mode);
            blocks.push((x, c));
            x = y;
        }
        let (h, norm) = self.enc_norm.forward(&x);
        Ok(EncState {
            segs,
            tokens,
            drop0,
            blocks,
            norm,
            h,
        })
    }

    fn encode_backward(&self, g: &mut ModelParams, st: &EncState, dh: &Mat) {
        let mut dx = self.enc_norm.backward(&mut g.enc_norm, &st.norm, dh);
        for (i, b) in self.enc.iter().enumerate().rev() {
            dx = b.backward(&mut g.enc[i], &st.segs, &st.blocks[i].1, &dx);
        }
        self.embed_backward(g, &st.segs, &st.tokens, &st.drop0, &dx);
    }

    fn pointer_stack(&self, h: &Mat, segs: &Segments, mode: &mut Mode) -> PtrState {
        let key = self.key.forward(h);
        let (query, query_cache) = self.query.forward(h, segs, mode);
        PtrState {
            key,
            query_cache,
            query,
        }
    }

    fn pointer_for_segment(&self, st: &PtrState, seg: (usize, usize), n: usize, s: usize) -> Result<PointerMatrix> {
        let d = self.config.d_model;
        let (start, len) = seg;
        let q = Mat::from_vec(len, d, st.query.data[start * d..(start + len) * d].to_vec());
        let k = Mat::from_vec(len, d, st.key.data[start * d..(start + len) * d].to_vec());
        let mut a = matmul_nt(&q, &k);
        a.scale(1.0 / (d as f64).sqrt());
        PointerMatrix::new(a.data, n, s)
    }

    /// Gradient of the pointer scores of every segment (`da[i]` is
    /// `len x len`) back into `dh`.
    fn pointer_backward(&self, g: &mut ModelParams, h: &Mat, segs: &Segments, st: &PtrState, da: &[Mat], dh: &mut Mat) {
        let d = self.config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Mat::zeros(h.rows, d);
        let mut dk = Mat::zeros(h.rows, d);
        for (&(start, len), a) in segs.0.iter().zip(da) {
            let q = Mat::from_vec(len, d, st.query.data[start * d..(start + len) * d].to_vec());
            let k = Mat::from_vec(len, d, st.key.data[start * d..(start + len) * d].to_vec());
            let gq = matmul(a, &k);
            let mut gk = Mat::zeros(len, d);
            matmul_tn_acc(a, &q, 1.0, &mut gk);
            for (dst, src) in dq.data[start * d..(start + len) * d].iter_mut().zip(&gq.data) {
                *dst = src * scale;
            }
            for (dst, src) in dk.data[start * d..(start + len) * d].iter_mut().zip(&gk.data) {
                *dst = src * scale;
            }
        }
        dh.add_assign(&self.key.backward(&mut g.key, h, &dk));
        dh.add_assign(&self.query.backward(&mut g.query, segs, &st.query_cache, &dq));
    }

    fn decode_stack(
        &self,
        h: &Mat,
        hsegs: &Segments,
        seqs: &[&[TokenId]],
        rows: Vec<usize>,
        mode: &mut Mode,
    ) -> Result<DecState> {
        let (mut x, segs, tokens, drop0) = self.embed(seqs, mode)?;
        let mut blocks = Vec::with_capacity(self.dec.len());
        for b in &self.dec {
            let (y, c) = b.forward(&x, &segs, h, hsegs, mode);
            blocks.push((x, c));
            x = y;
        }
        let (normed, norm) = self.dec_norm.forward(&x);
        let d = self.config.d_model;
        let mut z = Mat::zeros(rows.len(), d);
        for (k, &r) in rows.iter().enumerate() {
            z.row_mut(k).copy_from_slice(normed.row(r));
        }
        let mut logits = match &self.out_w {
            Some(w) => matmul(&z, w),
            None => matmul_nt(&z, &self.tok_emb),
        };
        for i in 0..logits.rows {
            for (v, b) in logits.row_mut(i).iter_mut().zip(&self.out_b.data) {
                *v += b;
            }
        }
        let logp = log_softmax_rows(&logits);
        Ok(DecState {
            segs,
            tokens,
            drop0,
            blocks,
            norm,
            rows,
            z,
            logp,
        })
    }

    fn decode_backward(&self, g: &mut ModelParams, h: &Mat, hsegs: &Segments, st: &DecState, dlogits: &Mat, dh: &mut Mat) {
        let d = self.config.d_model;
        for i in 0..dlogits.rows {
            for (b, v) in g.out_b.data.iter_mut().zip(dlogits.row(i)) {
                *b += v;
            }
        }
        let dz = match &self.out_w {
            Some(w) => {
                matmul_tn_acc(&st.z, dlogits, 1.0, g.out_w.as_mut().expect("gradient shape"));
                matmul_nt(dlogits, w)
            }
            None => {
                matmul_tn_acc(dlogits, &st.z, 1.0, &mut g.tok_emb);
                matmul(dlogits, &self.tok_emb)
            }
        };
        let mut dnormed = Mat::zeros(st.segs.total(), d);
        for (k, &r) in st.rows.iter().enumerate() {
            for (a, b) in dnormed.row_mut(r).iter_mut().zip(dz.row(k)) {
                *a += b;
            }
        }
        let mut dx = self.dec_norm.backward(&mut g.dec_norm, &st.norm, &dnormed);
        for (i, b) in self.dec.iter().enumerate().rev() {
            dx = b.backward(&mut g.dec[i], &st.segs, h, hsegs, &st.blocks[i].1, &dx, dh);
        }
        self.embed_backward(g, &st.segs, &st.tokens, &st.drop0, &dx);
    }

    /// Encoder states `H` for one source sequence (`<ins>` block included).
    pub fn encode(&self, src: &[TokenId]) -> Result<Mat> {
        Ok(self.encode_stack(&[src], &mut Mode::eval())?.h)
    }

    /// Pointer scores `A = Q Kᵀ / sqrt(d)` over the rows of `h`.
    pub fn pointer_matrix(&self, h: &Mat, n: usize, s: usize) -> Result<PointerMatrix> {
        if h.rows != n + s {
            return Err(Error::Shape(format!("H has {} rows, expected {}", h.rows, n + s)));
        }
        let segs = Segments::from_lengths([h.rows]);
        let st = self.pointer_stack(h, &segs, &mut Mode::eval());
        self.pointer_for_segment(&st, segs.0[0], n, s)
    }

    /// Log-probabilities over the vocabulary at `positions` of the decoder
    /// input `tokens`, one row per position.
    pub fn decode_log_probs(&self, h: &Mat, tokens: &[TokenId], positions: &[usize]) -> Result<Mat> {
        if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Shape(format!("position {p} outside decoder input")));
        }
        let hsegs = Segments::from_lengths([h.rows]);
        let st = self.decode_stack(h, &hsegs, &[tokens], positions.to_vec(), &mut Mode::eval())?;
        Ok(st.logp)
    }

    /// Probability rows for every decoder position.
    pub fn decode_distributions(&self, h: &Mat, tokens: &[TokenId]) -> Result<Mat> {
        let all: Vec<usize> = (0..tokens.len()).collect();
        let mut p = self.decode_log_probs(h, tokens, &all)?;
        p.data.iter_mut().for_each(|v| *v = v.exp());
        Ok(p)
    }

    /// Summed (not averaged) loss of a few examples; gradients are added to
    /// `g`. `first` is the index of `examples[0]` in the batch, used in error
    /// reports.
    pub fn chunk_loss(
        &self,
        examples: &[&TrainingExample],
        opts: &LossOptions,
        pass2: Pass2,
        rng: &mut ChaCha8Rng,
        g: &mut ModelParams,
        first: usize,
    ) -> Result<LossReport> {
        let lambda0 = opts.sundae.lambda0;
        let second = opts.sundae.needs_second_pass();
        let dropout = if opts.train { self.config.dropout } else { 0.0 };

        let srcs: Vec<&[TokenId]> = examples.iter().map(|e| e.source.ids()).collect();
        let mut mode = Mode { dropout, rng: Some(&mut *rng) };
        let enc = self.encode_stack(&srcs, &mut mode)?;
        let ptr = self.pointer_stack(&enc.h, &enc.segs, &mut mode);
        drop(mode);

        let mut report = LossReport {
            examples: examples.len(),
            ..LossReport::default()
        };
        let mut per_example = vec![0.0; examples.len()];
        let mut da = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let (n, s) = (ex.source.n(), ex.source.s());
            let a = self
                .pointer_for_segment(&ptr, enc.segs.0[i], n, s)
                .map_err(|_| Error::NumericalDivergence { example: first + i })?;
            let (nll, grad) = permutation_nll_grad(&a, &ex.pi)?;
            report.perm += nll;
            per_example[i] += opts.lambda_per * nll;
            let mut gm = Mat::from_vec(n + s, n + s, grad);
            gm.scale(opts.lambda_per);
            da.push(gm);
        }

        let slots: Vec<Vec<usize>> = examples.iter().map(|e| e.msk_positions()).collect();
        let targets: Vec<Vec<TokenId>> = examples
            .iter()
            .zip(&slots)
            .map(|(e, sl)| sl.iter().map(|&p| e.dec_output[p]).collect())
            .collect();
        let mut rows = Vec::new();
        let mut offset = 0;
        for (e, sl) in examples.iter().zip(&slots) {
            rows.extend(sl.iter().map(|&p| offset + p));
            offset += e.dec_input.len();
        }

        let dec_in: Vec<&[TokenId]> = examples.iter().map(|e| e.dec_input.as_slice()).collect();
        let mut mode = Mode { dropout, rng: Some(&mut *rng) };
        let pass1 = self.decode_stack(&enc.h, &enc.segs, &dec_in, rows.clone(), &mut mode)?;
        drop(mode);

        let pass2 = if second {
            let mut sampled: Vec<Vec<TokenId>> = examples.iter().map(|e| e.dec_input.clone()).collect();
            let mut row = 0;
            for (i, sl) in slots.iter().enumerate() {
                for (k, &p) in sl.iter().enumerate() {
                    sampled[i][p] = match pass2 {
                        Pass2::Fixed(given) => given[i][k],
                        Pass2::Sample => sample_row(pass1.logp.row(row), opts.temperature, rng),
                    };
                    row += 1;
                }
            }
            let views: Vec<&[TokenId]> = sampled.iter().map(|v| v.as_slice()).collect();
            let mut mode = Mode { dropout, rng: Some(&mut *rng) };
            Some(self.decode_stack(&enc.h, &enc.segs, &views, rows.clone(), &mut mode)?)
        } else {
            None
        };

        let vocab = self.config.vocab_size;
        let mut dl1 = Mat::zeros(rows.len(), vocab);
        let mut dl2 = Mat::zeros(rows.len(), vocab);
        let mut row = 0;
        for (i, t) in targets.iter().enumerate() {
            let k = t.len();
            let slice = |m: &Mat| Mat::from_vec(k, vocab, m.data[row * vocab..(row + k) * vocab].to_vec());
            let l1 = slice(&pass1.logp);
            let l2 = pass2.as_ref().map(|p| slice(&p.logp));
            let out = unrolled_loss(&l1, l2.as_ref(), t, lambda0)?;
            dl1.data[row * vocab..(row + k) * vocab].copy_from_slice(&out.grad_first.data);
            if let Some(gs) = &out.grad_second {
                dl2.data[row * vocab..(row + k) * vocab].copy_from_slice(&gs.data);
            }
            report.dec += out.loss;
            per_example[i] += out.loss;
            row += k;
        }
        if let Some(i) = per_example.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence { example: first + i });
        }
        report.total = per_example.iter().sum();

        let mut dh = Mat::zeros(enc.h.rows, enc.h.cols);
        if let Some(p2) = &pass2 {
            self.decode_backward(g, &enc.h, &enc.segs, p2, &dl2, &mut dh);
        }
        self.decode_backward(g, &enc.h, &enc.segs, &pass1, &dl1, &mut dh);
        self.pointer_backward(g, &enc.h, &enc.segs, &ptr, &da, &mut dh);
        self.encode_backward(g, &enc, &dh);
        Ok(report)
    }

    /// Mean loss over `examples` and its gradient. Chunks of [`CHUNK`]
    /// examples are evaluated in parallel on the current thread pool, each
    /// with its own random stream derived from `seed`, and reduced in chunk
    /// order.
    pub fn batch_loss(
        &self,
        examples: &[TrainingExample],
        opts: &LossOptions,
        seed: u64,
    ) -> Result<(LossReport, ModelParams)> {
        if examples.is_empty() {
            return Ok((LossReport::default(), self.zeros_like()));
        }
        let refs: Vec<&TrainingExample> = examples.iter().collect();
        let parts: Vec<Result<(LossReport, ModelParams)>> = refs
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ci as u64);
                let mut g = self.zeros_like();
                let r = self.chunk_loss(chunk, opts, Pass2::Sample, &mut rng, &mut g, ci * CHUNK)?;
                Ok((r, g))
            })
            .collect();
        let mut total = LossReport::default();
        let mut grads: Option<ModelParams> = None;
        for part in parts {
            let (r, g) = part?;
            total.add(&r);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.add_scaled(&g, 1.0),
            }
        }
        let mut grads = grads.expect("at least one chunk");
        let inv = 1.0 / examples.len() as f64;
        for t in grads.tensors_mut() {
            t.scale(inv);
        }
        total.total *= inv;
        total.perm *= inv;
        total.dec *= inv;
        Ok((total, grads))
    }
}

fn sample_row(logp: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let t = temperature.max(1e-6);
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|v| ((v - max) / t).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u <= 0.0 {
            return i as TokenId;
        }
    }
    (w.len() - 1) as TokenId
}
