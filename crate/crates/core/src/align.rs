//! Ground-truth permutations from (errorful, corrected) sentence pairs.
//!
//! Matching is greedy and longest-first over target spans; the kept spans are
//! a maximum-length subsequence (in target order) whose neighbouring source
//! ranks stay within `max_len` of each other. Tokens of the target that are
//! not covered by kept spans become `<ins>` insertions of at most
//! [`MSK_PER_INS`] tokens each.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{
    Permutation, SourceSentence, TokenId, TrainingExample, BOS, EOS, MSK, MSK_PER_INS,
    PAD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlignedSpan {
    pub start_src: usize,
    pub start_tgt: usize,
    pub len: usize,
}

impl AlignedSpan {
    pub fn end_src(&self) -> usize {
        self.start_src + self.len
    }

    pub fn end_tgt(&self) -> usize {
        self.start_tgt + self.len
    }
}

/// Which supervision builder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aligner {
    /// Longest-first span matching with span-subsequence selection.
    #[default]
    Span,
    /// Token-level nearest-occurrence pointing, kept as an ablation baseline.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Number of `<ins>` slots appended to every source.
    pub s: usize,
    /// Largest allowed rank difference between neighbouring kept spans.
    pub max_len: usize,
    /// When set, the difference must be strictly below `max_len`.
    pub strict_max_len: bool,
    pub aligner: Aligner,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            s: 8,
            max_len: 2,
            strict_max_len: false,
            aligner: Aligner::Span,
        }
    }
}

fn find_leftmost(hay: &[Option<TokenId>], needle: &[Option<TokenId>]) -> Option<usize> {
    if needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&start| {
        hay[start..start + needle.len()]
            .iter()
            .zip(needle)
            .all(|(h, n)| h.is_some() && h == n)
    })
}

/// Greedy longest-first span matching. Target spans are visited from the
/// longest length down and, within one length, by ascending start; a span is
/// claimed at its leftmost occurrence among the still unclaimed source tokens,
/// after which both sides are hidden. The result is sorted by `start_tgt`.
pub fn match_spans(x: &[TokenId], y: &[TokenId]) -> Vec<AlignedSpan> {
    let mut msk_x: Vec<Option<TokenId>> = x.iter().copied().map(Some).collect();
    let mut msk_y: Vec<Option<TokenId>> = y.iter().copied().map(Some).collect();
    let mut aligns = Vec::new();
    for len in (1..=y.len()).rev() {
        for i in 0..=y.len() - len {
            let window = &msk_y[i..i + len];
            if window.iter().any(Option::is_none) {
                continue;
            }
            if let Some(start) = find_leftmost(&msk_x, window) {
                aligns.push(AlignedSpan {
                    start_src: start,
                    start_tgt: i,
                    len,
                });
                msk_x[start..start + len].fill(None);
                msk_y[i..i + len].fill(None);
            }
        }
    }
    aligns.sort_by_key(|a| a.start_tgt);
    aligns
}

/// Rank of every span when ordered by source position.
pub fn source_ranks(spans: &[AlignedSpan]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| spans[i].start_src);
    let mut ranks = vec![0; spans.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank;
    }
    ranks
}

/// Ordering key of a candidate subsequence: more covered tokens first, then
/// fewer rank descents, then the lexicographically smallest index list.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Chain {
    total: usize,
    descents: usize,
    ids: Vec<usize>,
}

impl Chain {
    fn better_than(&self, other: &Chain) -> bool {
        (other.total, self.descents, &self.ids) < (self.total, other.descents, &other.ids)
    }
}

fn within(a: usize, b: usize, max_len: usize, strict: bool) -> bool {
    let d = a.abs_diff(b);
    if strict {
        d < max_len
    } else {
        d <= max_len
    }
}

/// Indices (into `ranks`) of the best subsequence under the rank-distance
/// constraint, before the sentinel spans are forced in.
pub fn best_subsequence(
    ranks: &[usize],
    lens: &[usize],
    max_len: usize,
    strict: bool,
) -> Vec<usize> {
    let k = ranks.len();
    let mut best: Vec<Chain> = Vec::with_capacity(k);
    for j in 0..k {
        let mut chain = Chain {
            total: lens[j],
            descents: 0,
            ids: vec![j],
        };
        for (i, prev) in best.iter().enumerate() {
            if !within(ranks[i], ranks[j], max_len, strict) {
                continue;
            }
            let mut ids = prev.ids.clone();
            ids.push(j);
            let cand = Chain {
                total: prev.total + lens[j],
                descents: prev.descents + usize::from(ranks[j] < ranks[i]),
                ids,
            };
            if cand.better_than(&chain) {
                chain = cand;
            }
        }
        best.push(chain);
    }
    best.into_iter()
        .reduce(|a, b| if b.better_than(&a) { b } else { a })
        .map(|c| c.ids)
        .unwrap_or_default()
}

/// Keeps a maximum-total-length subsequence of `spans` (sorted by target
/// start) in which neighbouring source ranks differ by at most `max_len`
/// (strictly less when `strict`). The first and last spans, which carry
/// `<s>` and `</s>`, are always kept.
pub fn select_spans(spans: &[AlignedSpan], max_len: usize, strict: bool) -> Vec<AlignedSpan> {
    if spans.is_empty() {
        return Vec::new();
    }
    let ranks = source_ranks(spans);
    let lens: Vec<usize> = spans.iter().map(|s| s.len).collect();
    let mut ids = best_subsequence(&ranks, &lens, max_len, strict);
    ids.push(0);
    ids.push(spans.len() - 1);
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().map(|i| spans[i]).collect()
}

/// Builds the permutation and decoder supervision for one pair. `x` and `y`
/// must both be wrapped in `<s> .. </s>`.
pub fn build_example(
    x: &[TokenId],
    y: &[TokenId],
    cfg: &OracleConfig,
) -> Result<TrainingExample> {
    let source = SourceSentence::from_core(x, cfg.s)?;
    SourceSentence::from_core(y, 0)?;
    let spans = select_spans(&match_spans(x, y), cfg.max_len, cfg.strict_max_len);
    assemble(source, y, &spans, cfg.s)
}

/// Walks kept spans in target order and emits the permutation together with
/// the decoder rows.
fn assemble(
    source: SourceSentence,
    y: &[TokenId],
    spans: &[AlignedSpan],
    s: usize,
) -> Result<TrainingExample> {
    let x = source.core().to_vec();
    let n = x.len();
    let mut pi = Vec::new();
    let mut dec_input = Vec::new();
    let mut dec_output = Vec::new();
    let mut last_tgt: Option<usize> = None;
    let mut k = 1;
    let mut lossy = false;
    for span in spans {
        if let Some(last) = last_tgt {
            let gap = &y[last + 1..span.start_tgt];
            if !gap.is_empty() {
                if k <= s {
                    pi.push(n + k - 1);
                    k += 1;
                    lossy |= gap.len() > MSK_PER_INS;
                    let mut ins_seq = gap.to_vec();
                    ins_seq.extend([PAD, PAD]);
                    dec_output.extend_from_slice(&ins_seq[..MSK_PER_INS]);
                    dec_input.extend([MSK; MSK_PER_INS]);
                } else {
                    lossy = true;
                }
            }
        }
        pi.extend(span.start_src..span.end_src());
        dec_input.extend_from_slice(&x[span.start_src..span.end_src()]);
        dec_output.extend_from_slice(&x[span.start_src..span.end_src()]);
        last_tgt = Some(span.end_tgt() - 1);
    }
    let pi = Permutation::new(pi, n, s)?;
    Ok(TrainingExample {
        source,
        pi,
        dec_input,
        dec_output,
        lossy,
    })
}

/// Token-level baseline: every target token points at the unused source
/// occurrence closest to the right of the previously pointed source token;
/// runs of unmatched target tokens become insertions. Word order is followed
/// token by token, so moved clauses get split up.
pub fn build_example_nearest(x: &[TokenId], y: &[TokenId], s: usize) -> Result<TrainingExample> {
    let source = SourceSentence::from_core(x, s)?;
    SourceSentence::from_core(y, 0)?;
    let mut used = vec![false; x.len()];
    used[0] = true;
    used[x.len() - 1] = true;
    let mut spans = vec![AlignedSpan {
        start_src: 0,
        start_tgt: 0,
        len: 1,
    }];
    let mut last_src = 0usize;
    for (t, &tok) in y.iter().enumerate().take(y.len() - 1).skip(1) {
        let target = last_src + 1;
        let pick = (1..x.len() - 1)
            .filter(|&i| !used[i] && x[i] == tok)
            .min_by_key(|&i| (i.abs_diff(target), i));
        if let Some(i) = pick {
            used[i] = true;
            last_src = i;
            spans.push(AlignedSpan {
                start_src: i,
                start_tgt: t,
                len: 1,
            });
        }
    }
    spans.push(AlignedSpan {
        start_src: x.len() - 1,
        start_tgt: y.len() - 1,
        len: 1,
    });
    debug_assert!(x[0] == BOS && y[y.len() - 1] == EOS);
    assemble(source, y, &spans, s)
}

/// Dispatches on the configured aligner.
pub fn build_with(x: &[TokenId], y: &[TokenId], cfg: &OracleConfig) -> Result<TrainingExample> {
    match cfg.aligner {
        Aligner::Span => build_example(x, y, cfg),
        Aligner::Nearest => build_example_nearest(x, y, cfg.s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Vocab;

    fn wrap(v: &Vocab, text: &str) -> Vec<TokenId> {
        v.wrap(text)
    }

    #[test]
    fn identity_pair_is_one_span() {
        let v = Vocab::from_texts(["a b c"], 2).unwrap();
        let x = wrap(&v, "a b c");
        let spans = match_spans(&x, &x);
        assert_eq!(
            spans,
            vec![AlignedSpan {
                start_src: 0,
                start_tgt: 0,
                len: 5
            }]
        );
        let ex = build_example(&x, &x, &OracleConfig::default()).unwrap();
        assert!(ex.pi.is_identity(5));
        assert_eq!(ex.dec_input, x);
        assert_eq!(ex.dec_output, x);
        assert!(!ex.lossy);
    }

    #[test]
    fn swapped_pair_gives_token_spans() {
        let v = Vocab::from_texts(["a b"], 1).unwrap();
        let x = wrap(&v, "a b");
        let y = wrap(&v, "b a");
        let spans = match_spans(&x, &y);
        assert_eq!(spans.len(), 4);
        assert!(spans.iter().all(|s| s.len == 1));
        assert_eq!(source_ranks(&spans), vec![0, 2, 1, 3]);
    }

    #[test]
    fn monotone_ranks_keep_everything() {
        for max_len in 1..4 {
            let ranks: Vec<usize> = (0..6).collect();
            let lens = vec![1, 3, 2, 5, 1, 1];
            assert_eq!(best_subsequence(&ranks, &lens, max_len, false), ranks);
        }
    }

    #[test]
    fn strict_mode_forbids_equal_difference() {
        let spans: Vec<AlignedSpan> = [(0, 0, 1), (2, 1, 1), (1, 2, 1), (3, 3, 1)]
            .iter()
            .map(|&(s, t, l)| AlignedSpan {
                start_src: s,
                start_tgt: t,
                len: l,
            })
            .collect();
        assert_eq!(select_spans(&spans, 2, false).len(), 4);
        assert!(select_spans(&spans, 2, true).len() < 4);
    }

    #[test]
    fn insertion_beyond_s_is_lossy() {
        let v = Vocab::from_texts(["a b c d e f"], 1).unwrap();
        let x = wrap(&v, "a c e");
        let y = wrap(&v, "a b c d e");
        let ex = build_example(&x, &y, &OracleConfig { s: 1, ..Default::default() }).unwrap();
        assert!(ex.lossy);
        assert_eq!(ex.pi.insertions(5), 1);
        let ex = build_example(&x, &y, &OracleConfig { s: 2, ..Default::default() }).unwrap();
        assert!(!ex.lossy);
        assert_eq!(ex.reconstruct(), y);
    }

    #[test]
    fn long_gap_is_truncated_and_flagged() {
        let v = Vocab::from_texts(["a b c d e f"], 8).unwrap();
        let x = wrap(&v, "a f");
        let y = wrap(&v, "a b c d e f");
        let ex = build_example(&x, &y, &OracleConfig::default()).unwrap();
        assert!(ex.lossy);
        assert_eq!(ex.dec_output.iter().filter(|&&t| t == PAD).count(), 0);
        ex.check().unwrap();
    }

    #[test]
    fn nearest_baseline_splits_moved_clause() {
        let v = Vocab::from_texts(["i like films when was younger watched on tv"], 8).unwrap();
        let x = wrap(&v, "i like films when i was younger i watched on tv");
        let y = wrap(&v, "i like films i watched on tv when i was younger");
        let ex = build_example_nearest(&x, &y, 8).unwrap();
        ex.check().unwrap();
        assert_eq!(
            ex.pi.as_slice(),
            &[0, 1, 2, 3, 5, 9, 10, 11, 4, 8, 6, 7, 12]
        );
    }
}
