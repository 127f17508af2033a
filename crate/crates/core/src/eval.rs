//! Edit-based F0.5, GLEU, hypothesis selection and decoding-cost reports.
//!
//! The edit scorer is a simplified stand-in for the standard shared-task
//! scorers; its numbers are not comparable to theirs.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

/// Tag carried by every score report.
pub const SCORER: &str = "simplified";

/// Replace `src[start..end]` by `replacement`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub replacement: Vec<String>,
}

/// Sorted, non-overlapping edits over one source sentence.
pub type EditSet = Vec<Edit>;

/// Levenshtein alignment with unit costs. The trace walks left to right and
/// takes a match whenever one is optimal, then a substitution, a deletion and
/// an insertion in that order. Maximal runs of non-matching operations are
/// merged into one edit.
pub fn extract_edits<S: AsRef<str>>(src: &[S], hyp: &[S]) -> EditSet {
    let (m, n) = (src.len(), hyp.len());
    // d[i][j]: distance between src[i..] and hyp[j..]
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for i in (0..=m).rev() {
        for j in (0..=n).rev() {
            d[i][j] = if i == m {
                n - j
            } else if j == n {
                m - i
            } else {
                let sub = usize::from(src[i].as_ref() != hyp[j].as_ref());
                (d[i + 1][j + 1] + sub)
                    .min(d[i + 1][j] + 1)
                    .min(d[i][j + 1] + 1)
            };
        }
    }
    let mut edits = Vec::new();
    let mut open: Option<Edit> = None;
    let (mut i, mut j) = (0, 0);
    while i < m || j < n {
        let same = i < m && j < n && src[i].as_ref() == hyp[j].as_ref();
        if same && d[i][j] == d[i + 1][j + 1] {
            if let Some(e) = open.take() {
                edits.push(e);
            }
            i += 1;
            j += 1;
            continue;
        }
        let e = open.get_or_insert_with(|| Edit {
            start: i,
            end: i,
            replacement: Vec::new(),
        });
        if i < m && j < n && d[i][j] == d[i + 1][j + 1] + 1 {
            e.replacement.push(hyp[j].as_ref().to_string());
            i += 1;
            j += 1;
        } else if i < m && d[i][j] == d[i + 1][j] + 1 {
            i += 1;
        } else {
            e.replacement.push(hyp[j].as_ref().to_string());
            j += 1;
        }
        e.end = i;
    }
    if let Some(e) = open {
        edits.push(e);
    }
    edits
}

/// Applies sorted, non-overlapping edits.
pub fn apply_edits<S: AsRef<str>>(src: &[S], edits: &[Edit]) -> Vec<String> {
    let mut out = Vec::with_capacity(src.len());
    let mut pos = 0;
    for e in edits {
        out.extend(src[pos..e.start].iter().map(|s| s.as_ref().to_string()));
        out.extend(e.replacement.iter().cloned());
        pos = e.end;
    }
    out.extend(src[pos..].iter().map(|s| s.as_ref().to_string()));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub beta: f64,
}

impl ScoreReport {
    /// Precision is 1 when nothing was proposed and recall is 1 when
    /// nothing was expected.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, beta: f64) -> Self {
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let b2 = beta * beta;
        let denom = b2 * precision + recall;
        let f_beta = if denom == 0.0 {
            0.0
        } else {
            (1.0 + b2) * precision * recall / denom
        };
        ScoreReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f_beta,
            beta,
        }
    }
}

fn multiset(edits: &[Edit]) -> HashMap<&Edit, usize> {
    let mut m = HashMap::new();
    for e in edits {
        *m.entry(e).or_insert(0) += 1;
    }
    m
}

/// `(tp, fp, fn)` for one sentence; edits match only when identical.
pub fn edit_counts(hyp: &[Edit], gold: &[Edit]) -> (usize, usize, usize) {
    let h = multiset(hyp);
    let g = multiset(gold);
    let tp: usize = h
        .iter()
        .map(|(e, &c)| c.min(g.get(e).copied().unwrap_or(0)))
        .sum();
    (tp, hyp.len() - tp, gold.len() - tp)
}

/// F0.5 of one sentence's edits.
pub fn f_beta_score(hyp: &[Edit], gold: &[Edit]) -> ScoreReport {
    let (tp, fp, fn_) = edit_counts(hyp, gold);
    ScoreReport::from_counts(tp, fp, fn_, 0.5)
}

/// Corpus-level F0.5 from summed counts. Each item is
/// `(source, hypothesis, reference)` as whitespace-tokenized text.
pub fn corpus_f_beta<S: AsRef<str>>(items: &[(S, S, S)]) -> ScoreReport {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (src, hyp, reference) in items {
        let src: Vec<&str> = src.as_ref().split_whitespace().collect();
        let hyp: Vec<&str> = hyp.as_ref().split_whitespace().collect();
        let reference: Vec<&str> = reference.as_ref().split_whitespace().collect();
        let (a, b, c) = edit_counts(&extract_edits(&src, &hyp), &extract_edits(&src, &reference));
        tp += a;
        fp += b;
        fn_ += c;
    }
    ScoreReport::from_counts(tp, fp, fn_, 0.5)
}

fn ngrams<'a, S: AsRef<str>>(toks: &'a [S], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

fn overlap(a: &BTreeMap<Vec<&str>, usize>, b: &BTreeMap<Vec<&str>, usize>) -> BTreeMap<Vec<String>, usize> {
    a.iter()
        .filter_map(|(k, &c)| {
            let m = c.min(b.get(k).copied().unwrap_or(0));
            (m > 0).then(|| (k.iter().map(|s| s.to_string()).collect(), m))
        })
        .collect()
}

/// Per-order GLEU sufficient statistics: numerator, denominator for
/// n = 1..=4, then hypothesis and reference lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GleuStats {
    pub num: [f64; 4],
    pub den: [f64; 4],
    pub hyp_len: f64,
    pub ref_len: f64,
}

impl GleuStats {
    pub fn new<S: AsRef<str>>(hyp: &[S], src: &[S], reference: &[S]) -> Self {
        let mut st = GleuStats {
            hyp_len: hyp.len() as f64,
            ref_len: reference.len() as f64,
            ..GleuStats::default()
        };
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let s = ngrams(src, n);
            let r = ngrams(reference, n);
            let hr: usize = overlap(&h, &r).values().sum();
            // source n-grams kept by the hypothesis that the reference does not have
            let hs = overlap(&h, &s);
            let penalty: usize = hs
                .iter()
                .map(|(k, &c)| {
                    let key: Vec<&str> = k.iter().map(String::as_str).collect();
                    c.saturating_sub(r.get(&key).copied().unwrap_or(0))
                })
                .sum();
            st.num[n - 1] = (hr as f64 - penalty as f64).max(0.0);
            st.den[n - 1] = h.values().sum::<usize>() as f64;
        }
        st
    }

    pub fn add(&mut self, o: &GleuStats) {
        for k in 0..4 {
            self.num[k] += o.num[k];
            self.den[k] += o.den[k];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Brevity penalty times the geometric mean of the n-gram precisions.
    /// Orders without any hypothesis n-gram are skipped; a zero numerator
    /// gives 0.
    pub fn score(&self) -> f64 {
        let mut logs = Vec::new();
        for k in 0..4 {
            if self.den[k] == 0.0 {
                continue;
            }
            if self.num[k] == 0.0 {
                return 0.0;
            }
            logs.push((self.num[k] / self.den[k]).ln());
        }
        if logs.is_empty() {
            return if self.ref_len == 0.0 { 1.0 } else { 0.0 };
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len / self.hyp_len).exp()
        };
        bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }
}

/// Sentence GLEU; with several references the best one counts.
pub fn gleu<S: AsRef<str>>(hyp: &[S], src: &[S], refs: &[Vec<S>]) -> f64 {
    refs.iter()
        .map(|r| GleuStats::new(hyp, src, r).score())
        .fold(0.0, f64::max)
}

/// Corpus GLEU over `(source, hypothesis, reference)` text triples.
pub fn corpus_gleu<S: AsRef<str>>(items: &[(S, S, S)]) -> f64 {
    let mut total = GleuStats::default();
    for (src, hyp, reference) in items {
        let s: Vec<&str> = src.as_ref().split_whitespace().collect();
        let h: Vec<&str> = hyp.as_ref().split_whitespace().collect();
        let r: Vec<&str> = reference.as_ref().split_whitespace().collect();
        total.add(&GleuStats::new(&h, &s, &r));
    }
    total.score()
}

/// A beam candidate after decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Beam ranking key of the permutation.
    pub perm_score: f64,
    /// Decoder log-probability of the chosen slot tokens.
    pub dec_logp: f64,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection<'a> {
    /// `lambda * perm_score + (1 - lambda) * dec_logp`; `lambda = 1` uses the
    /// permutation score alone.
    Rescore { lambda: f64 },
    /// Best sentence GLEU against the references.
    GleuOracle { src: &'a [String], refs: &'a [Vec<String>] },
}

/// Index of the chosen candidate; ties keep the earlier (beam) position.
pub fn select_hypothesis(cands: &[Candidate], mode: &Selection) -> Option<usize> {
    let key = |c: &Candidate| match mode {
        Selection::Rescore { lambda } if *lambda >= 1.0 => c.perm_score,
        Selection::Rescore { lambda } if *lambda <= 0.0 => c.dec_logp,
        Selection::Rescore { lambda } => lambda * c.perm_score + (1.0 - lambda) * c.dec_logp,
        Selection::GleuOracle { src, refs } => gleu(&c.tokens, src, refs),
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let k = key(c);
        if best.map_or(true, |(_, b)| k > b) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// Model invocations for one sentence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PassCounts {
    pub encoder: usize,
    pub beam_steps: usize,
    pub decoder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchBucket {
    pub bucket: usize,
    pub sentences: usize,
    pub mean_len: f64,
    pub mean_encoder: f64,
    pub max_encoder: usize,
    pub mean_decoder: f64,
    pub max_decoder: usize,
    pub mean_beam_steps: f64,
    /// Passes of a greedy left-to-right decoder producing the same output:
    /// one per output token.
    pub mean_autoregressive: f64,
}

/// Aggregates per-sentence counts by length bucket. Each row is
/// `(bucket, counts, output length)`.
pub fn bench_forward_counts(rows: &[(usize, PassCounts, usize)]) -> Vec<BenchBucket> {
    let mut by: BTreeMap<usize, Vec<(PassCounts, usize)>> = BTreeMap::new();
    for &(b, c, m) in rows {
        by.entry(b).or_default().push((c, m));
    }
    by.into_iter()
        .map(|(bucket, v)| {
            let n = v.len() as f64;
            let mean = |f: &dyn Fn(&(PassCounts, usize)) -> usize| {
                v.iter().map(f).sum::<usize>() as f64 / n
            };
            BenchBucket {
                bucket,
                sentences: v.len(),
                mean_len: mean(&|r| r.1),
                mean_encoder: mean(&|r| r.0.encoder),
                max_encoder: v.iter().map(|r| r.0.encoder).max().unwrap_or(0),
                mean_decoder: mean(&|r| r.0.decoder),
                max_decoder: v.iter().map(|r| r.0.decoder).max().unwrap_or(0),
                mean_beam_steps: mean(&|r| r.0.beam_steps),
                mean_autoregressive: mean(&|r| r.1),
            }
        })
        .collect()
}
