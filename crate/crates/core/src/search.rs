//! Pointer scores, masked step distributions and permutation beam search.

use crate::error::{Error, Result};
use crate::types::{validate_permutation, Permutation};

/// Square `(n + s) x (n + s)` matrix of log-domain pointer scores. Row `i`
/// scores the successor of position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointerMatrix {
    a: Vec<f64>,
    n: usize,
    s: usize,
}

impl PointerMatrix {
    pub fn new(a: Vec<f64>, n: usize, s: usize) -> Result<Self> {
        let m = n + s;
        if a.len() != m * m {
            return Err(Error::Shape(format!(
                "pointer matrix has {} entries, expected {}",
                a.len(),
                m * m
            )));
        }
        if n < 2 {
            return Err(Error::Shape(format!("core length {n} too short")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("pointer matrix entries must be finite".into()));
        }
        Ok(PointerMatrix { a, n, s })
    }

    pub fn zeros(n: usize, s: usize) -> Self {
        PointerMatrix {
            a: vec![0.0; (n + s) * (n + s)],
            n,
            s,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// Side length, `n + s`.
    pub fn dim(&self) -> usize {
        self.n + self.s
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.dim();
        &self.a[i * m..(i + 1) * m]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.dim() + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }
}

/// Visited flags plus bookkeeping for a partial permutation.
#[derive(Debug, Clone)]
struct PrefixState {
    visited: Vec<bool>,
    last: usize,
    last_core: usize,
    next_ins: usize,
}

impl PrefixState {
    fn new(prefix: &[usize], n: usize, s: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidPermutation(m));
        if prefix.first() != Some(&0) {
            return bad("prefix must start at 0".into());
        }
        let mut st = PrefixState {
            visited: vec![false; n + s],
            last: 0,
            last_core: 0,
            next_ins: n,
        };
        for (k, &i) in prefix.iter().enumerate() {
            if i >= n + s || st.visited[i] {
                return bad(format!("prefix index {i} out of range or repeated"));
            }
            if i >= n {
                if i != st.next_ins || (k > 0 && prefix[k - 1] >= n) {
                    return bad(format!("<ins> index {i} out of order"));
                }
                st.next_ins += 1;
            } else {
                if i == n - 1 && k + 1 != prefix.len() {
                    return bad("</s> before the end of the prefix".into());
                }
                st.last_core = i;
            }
            st.visited[i] = true;
            st.last = i;
        }
        Ok(st)
    }

    fn push(&mut self, i: usize, n: usize) {
        self.visited[i] = true;
        self.last = i;
        if i >= n {
            self.next_ins += 1;
        } else {
            self.last_core = i;
        }
    }

    fn allowed(&self, j: usize, n: usize) -> bool {
        if self.visited[j] {
            return false;
        }
        if j >= n {
            // only the lowest unused <ins>, and never right after another one
            return j == self.next_ins && self.last < n;
        }
        true
    }

    /// Smallest unvisited core position to the right of the most recent core
    /// position. After an `<ins>` the anchor is the core token before it.
    fn right(&self, n: usize) -> usize {
        (self.last_core + 1..n)
            .find(|&j| !self.visited[j])
            .unwrap_or(n - 1)
    }
}

/// Masked softmax of row `last` followed by confidence blending with weight
/// `c`. `st.last` must not be `</s>`.
fn distribution(a: &PointerMatrix, st: &PrefixState, c: f64) -> Result<Vec<f64>> {
    let n = a.n;
    let row = a.row(st.last);
    let mut p = vec![0.0; a.dim()];
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if st.allowed(j, n) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DeadEnd);
    }
    let mut z = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if st.allowed(j, n) {
            p[j] = (v - max).exp();
            z += p[j];
        }
    }
    for v in &mut p {
        *v /= z;
    }
    if c > 0.0 {
        let r = st.right(n);
        for v in &mut p {
            *v *= 1.0 - c;
        }
        p[r] += c;
    }
    Ok(p)
}

/// Probability of every next position given the prefix.
///
/// Visited positions are masked, as is every `<ins>` other than the lowest
/// unused one and every `<ins>` directly after an `<ins>`. With `c > 0` the
/// result is `(1 - c) * p + c * one_hot(right)`, where `right` is the nearest
/// unvisited core position to the right of the last core position.
pub fn step_distribution(a: &PointerMatrix, prefix: &[usize], c: f64) -> Result<Vec<f64>> {
    let st = PrefixState::new(prefix, a.n, a.s)?;
    if st.last == a.n - 1 {
        return Err(Error::InvalidPermutation("prefix already finished".into()));
    }
    distribution(a, &st, c)
}

/// Log-probability of a complete permutation: the sum of the log step
/// probabilities. Masked moves give `-inf`.
pub fn score_permutation(a: &PointerMatrix, pi: &Permutation, c: f64) -> Result<f64> {
    let pi = pi.as_slice();
    validate_permutation(pi, a.n, a.s)?;
    let mut st = PrefixState::new(&pi[..1], a.n, a.s)?;
    let mut total = 0.0;
    for &next in &pi[1..] {
        if !st.allowed(next, a.n) {
            return Ok(f64::NEG_INFINITY);
        }
        let p = distribution(a, &st, c)?;
        total += p[next].ln();
        st.push(next, a.n);
    }
    Ok(total)
}

/// Teacher-forced negative log-likelihood of `pi` with no confidence bias,
/// and its gradient with respect to every entry of the matrix.
pub fn permutation_nll_grad(a: &PointerMatrix, pi: &Permutation) -> Result<(f64, Vec<f64>)> {
    let pi = pi.as_slice();
    validate_permutation(pi, a.n, a.s)?;
    let m = a.dim();
    let mut grad = vec![0.0; m * m];
    let mut st = PrefixState::new(&pi[..1], a.n, a.s)?;
    let mut nll = 0.0;
    for &next in &pi[1..] {
        if !st.allowed(next, a.n) {
            return Err(Error::InvalidPermutation(format!(
                "move to {next} is masked"
            )));
        }
        let p = distribution(a, &st, 0.0)?;
        nll -= p[next].ln();
        let g = &mut grad[st.last * m..(st.last + 1) * m];
        for (gj, pj) in g.iter_mut().zip(&p) {
            *gj += pj;
        }
        g[next] -= 1.0;
        st.push(next, a.n);
    }
    Ok((nll, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPermutation {
    pub perm: Permutation,
    /// Accumulated log-probability.
    pub logp: f64,
    /// Ranking key: `logp / len` with length normalization, else `logp`.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub confidence_bias: f64,
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 4,
            confidence_bias: 0.2,
            length_norm: true,
        }
    }
}

fn rank_key(logp: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm {
        logp / len as f64
    } else {
        logp
    }
}

/// Descending by score, ties broken by the lexicographically smaller index
/// sequence.
pub fn rank_order(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

struct Live {
    pi: Vec<usize>,
    logp: f64,
    st: PrefixState,
}

/// Beam search over permutations. Every step expands each live hypothesis by
/// all positions of non-zero probability and keeps the best `width`
/// candidates; a candidate that emits `</s>` is finished and takes its beam
/// slot. Returns up to `width` finished hypotheses, best first.
pub fn beam_search(a: &PointerMatrix, cfg: &BeamConfig) -> Result<Vec<ScoredPermutation>> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let n = a.n;
    let mut live = vec![Live {
        pi: vec![0],
        logp: 0.0,
        st: PrefixState::new(&[0], n, a.s)?,
    }];
    let mut finished: Vec<ScoredPermutation> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let p = match distribution(a, &hyp.st, cfg.confidence_bias) {
                Ok(p) => p,
                Err(Error::DeadEnd) => continue,
                Err(e) => return Err(e),
            };
            for (j, &pj) in p.iter().enumerate() {
                if pj > 0.0 {
                    let logp = hyp.logp + pj.ln();
                    let key = rank_key(logp, hyp.pi.len() + 1, cfg.length_norm);
                    cands.push((h, j, logp, key));
                }
            }
        }
        cands.sort_by(|x, y| {
            y.3.total_cmp(&x.3)
                .then_with(|| live[x.0].pi.cmp(&live[y.0].pi))
                .then_with(|| x.1.cmp(&y.1))
        });
        cands.truncate(cfg.width);
        let mut next = Vec::with_capacity(cands.len());
        for (h, j, logp, key) in cands {
            let mut pi = live[h].pi.clone();
            pi.push(j);
            if j == n - 1 {
                finished.push(ScoredPermutation {
                    perm: Permutation::new(pi, n, a.s)?,
                    logp,
                    score: key,
                });
            } else {
                let mut st = live[h].st.clone();
                st.push(j, n);
                next.push(Live { pi, logp, st });
            }
        }
        live = next;
    }
    if finished.is_empty() {
        return Err(Error::SearchExhausted);
    }
    finished.sort_by(|x, y| rank_order(x.score, x.perm.as_slice(), y.score, y.perm.as_slice()));
    finished.truncate(cfg.width);
    Ok(finished)
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(vals: I) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn normalization: each step subtracts the column-wise
/// then the row-wise log-sum-exp.
pub fn sinkhorn(a: &PointerMatrix, steps: usize) -> PointerMatrix {
    let m = a.dim();
    let mut out = a.a.clone();
    for _ in 0..steps {
        for j in 0..m {
            let lse = log_sum_exp((0..m).map(|i| out[i * m + j]));
            for i in 0..m {
                out[i * m + j] -= lse;
            }
        }
        for i in 0..m {
            let row = &mut out[i * m..(i + 1) * m];
            let lse = log_sum_exp(row.iter().copied());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
    }
    PointerMatrix {
        a: out,
        n: a.n,
        s: a.s,
    }
}
