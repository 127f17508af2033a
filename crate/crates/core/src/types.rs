//! Vocabulary, source sentences and permutations.
//!
//! Every sequence handled by the crate is a list of [`TokenId`]s. The first
//! ids of every [`Vocab`] are reserved for the special tokens, in a fixed
//! layout, so code that only needs the specials (the oracle, the search, the
//! decoder state) can work without a vocabulary at hand.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const MSK: TokenId = 4;
/// Id of `<ins1>`; `<insK>` is `INS_BASE + K - 1`.
pub const INS_BASE: TokenId = 5;

/// Number of `<msk>` slots each selected `<ins>` expands to.
pub const MSK_PER_INS: usize = 3;

const FIXED_SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<msk>"];

pub fn ins_token(k: usize) -> TokenId {
    debug_assert!(k >= 1);
    INS_BASE + (k as TokenId - 1)
}

/// Closed token inventory. Ids `0..INS_BASE + s_count` are the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    s_count: usize,
}

impl Vocab {
    /// Builds a vocabulary from the given words; duplicates and words that
    /// collide with a special are skipped. Words keep first-seen order.
    pub fn new<I, S>(words: I, s_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if s_count == 0 {
            return Err(Error::InvalidVocab("s_count must be at least 1".into()));
        }
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|t| t.to_string()).collect();
        tokens.extend((1..=s_count).map(|k| format!("<ins{k}>")));
        let mut id_of: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!("bad token {w:?}")));
            }
            if w.starts_with("<ins") && w.ends_with('>') && !id_of.contains_key(w) {
                return Err(Error::InvalidVocab(format!("{w} outside the <ins> block")));
            }
            if !id_of.contains_key(w) {
                id_of.insert(w.to_string(), tokens.len() as TokenId);
                tokens.push(w.to_string());
            }
        }
        Ok(Vocab {
            tokens,
            id_of,
            s_count,
        })
    }

    /// Collects every whitespace token (lowercased) from `texts` and builds a
    /// vocabulary with words in sorted order.
    pub fn from_texts<'a, I>(texts: I, s_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        words.sort();
        words.dedup();
        Vocab::new(words, s_count)
    }

    /// Parses the one-token-per-line format written by [`Vocab::save`].
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in FIXED_SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(Error::InvalidVocab(format!(
                    "line {} must be {special}",
                    i + 1
                )));
            }
        }
        let s_count = lines[INS_BASE as usize..]
            .iter()
            .enumerate()
            .take_while(|(k, t)| **t == format!("<ins{}>", k + 1))
            .count();
        let words = &lines[INS_BASE as usize + s_count..];
        let vocab = Vocab::new(words.iter().copied(), s_count)?;
        if vocab.len() != lines.len() {
            return Err(Error::InvalidVocab("duplicate or misplaced tokens".into()));
        }
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Vocab::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn s_count(&self) -> usize {
        self.s_count
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// True for every reserved id, including the `<ins>` block.
    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < INS_BASE as usize + self.s_count
    }

    /// Lowercased whitespace tokens mapped to ids, no sentinels.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    /// `<s> words </s>`.
    pub fn wrap(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_words(text));
        ids.push(EOS);
        ids
    }
}

/// A sentinel-wrapped sentence followed by the `<ins>` block:
/// `<s> w1 .. wk </s> <ins1> .. <insS>`, with `n = k + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceSentence {
    ids: Vec<TokenId>,
    n: usize,
}

impl SourceSentence {
    /// `core` must start with `<s>` and end with `</s>`.
    pub fn from_core(core: &[TokenId], s: usize) -> Result<Self> {
        let n = core.len();
        if n < 2 || core[0] != BOS || core[n - 1] != EOS {
            return Err(Error::InvalidPermutation(
                "source must be wrapped in <s> .. </s>".into(),
            ));
        }
        let mut ids = core.to_vec();
        ids.extend((1..=s).map(ins_token));
        Ok(SourceSentence { ids, n })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Core length including both sentinels.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.ids.len() - self.n
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn core(&self) -> &[TokenId] {
        &self.ids[..self.n]
    }
}

/// Whitespace tokenizer: lowercases, maps out-of-vocabulary words to `<unk>`
/// and appends the vocabulary's `<ins>` block.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<SourceSentence> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    SourceSentence::from_core(&vocab.wrap(text), vocab.s_count())
}

/// Index sequence into a [`SourceSentence`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(pi: Vec<usize>, n: usize, s: usize) -> Result<Self> {
        validate_permutation(&pi, n, s)?;
        Ok(Permutation(pi))
    }

    /// `0, 1, .., n - 1`.
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Number of `<ins>` positions used.
    pub fn insertions(&self, n: usize) -> usize {
        self.0.iter().filter(|&&i| i >= n).count()
    }

    pub fn is_identity(&self, n: usize) -> bool {
        self.0.len() == n && self.0.iter().enumerate().all(|(k, &i)| k == i)
    }
}

/// Checks the structural invariants of a complete permutation.
pub fn validate_permutation(pi: &[usize], n: usize, s: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidPermutation(msg));
    if n < 2 {
        return bad(format!("core length {n} too short"));
    }
    if pi.len() < 2 {
        return bad("permutation needs at least <s> and </s>".into());
    }
    if pi[0] != 0 {
        return bad(format!("must start at 0, got {}", pi[0]));
    }
    if pi[pi.len() - 1] != n - 1 {
        return bad(format!("must end at {}, got {}", n - 1, pi[pi.len() - 1]));
    }
    let mut seen = vec![false; n + s];
    let mut last_ins: Option<usize> = None;
    for (k, &i) in pi.iter().enumerate() {
        if i >= n + s {
            return bad(format!("index {i} out of range {}", n + s));
        }
        if seen[i] {
            return bad(format!("index {i} repeats"));
        }
        seen[i] = true;
        if i >= n {
            if let Some(prev) = last_ins {
                if i <= prev {
                    return bad(format!("<ins> index {i} after {prev}"));
                }
            }
            if k > 0 && pi[k - 1] >= n {
                return bad(format!("adjacent <ins> at {k}"));
            }
            last_ins = Some(i);
        }
    }
    Ok(())
}

/// `out[k] = src.ids[pi[k]]`.
pub fn apply_permutation(src: &SourceSentence, pi: &Permutation) -> Result<Vec<TokenId>> {
    validate_permutation(pi.as_slice(), src.n(), src.s())?;
    Ok(pi.as_slice().iter().map(|&i| src.ids()[i]).collect())
}

/// Replaces every `<ins>` (ids `INS_BASE..INS_BASE + s`) by three `<msk>`;
/// returns the expanded sequence and the positions of the `<msk>` slots.
pub fn expand_insertions(permuted: &[TokenId], s: usize) -> (Vec<TokenId>, Vec<usize>) {
    let mut out = Vec::with_capacity(permuted.len() + 2 * MSK_PER_INS);
    let mut msk = Vec::new();
    for &t in permuted {
        if t >= INS_BASE && t < INS_BASE + s as TokenId {
            for _ in 0..MSK_PER_INS {
                msk.push(out.len());
                out.push(MSK);
            }
        } else {
            out.push(t);
        }
    }
    (out, msk)
}

/// Supervision for one sentence pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub source: SourceSentence,
    pub pi: Permutation,
    pub dec_input: Vec<TokenId>,
    pub dec_output: Vec<TokenId>,
    /// Set when a gap was truncated or insertions ran out of `<ins>` slots;
    /// the target can then not be reconstructed from the example.
    pub lossy: bool,
}

impl TrainingExample {
    pub fn msk_positions(&self) -> Vec<usize> {
        self.dec_input
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == MSK)
            .map(|(i, _)| i)
            .collect()
    }

    /// Target reconstruction: `<msk>` slots take the decoder targets, `<pad>`
    /// is dropped.
    pub fn reconstruct(&self) -> Vec<TokenId> {
        self.dec_input
            .iter()
            .zip(&self.dec_output)
            .map(|(&i, &o)| if i == MSK { o } else { i })
            .filter(|&t| t != PAD)
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        validate_permutation(self.pi.as_slice(), self.source.n(), self.source.s())?;
        let permuted = apply_permutation(&self.source, &self.pi)?;
        let (expanded, _) = expand_insertions(&permuted, self.source.s());
        if expanded != self.dec_input {
            return Err(Error::InvalidPermutation(
                "decoder input does not match the permuted source".into(),
            ));
        }
        if self.dec_input.len() != self.dec_output.len() {
            return Err(Error::InvalidPermutation(
                "decoder input and output lengths differ".into(),
            ));
        }
        let agree = self
            .dec_input
            .iter()
            .zip(&self.dec_output)
            .all(|(&i, &o)| i == MSK || i == o);
        if !agree {
            return Err(Error::InvalidPermutation(
                "decoder output changes a non-<msk> position".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn busy_vocab() -> Vocab {
        Vocab::new(["i", "be", "busy", "am"], 1).unwrap()
    }

    #[test]
    fn tokenize_with_sentinels() {
        let v = busy_vocab();
        let src = tokenize("I be busy", &v).unwrap();
        let expected = vec![BOS, v.id("i"), v.id("be"), v.id("busy"), EOS, ins_token(1)];
        assert_eq!(src.ids(), expected.as_slice());
        assert_eq!(src.n(), 5);
        assert_eq!(src.s(), 1);
    }

    #[test]
    fn tokenize_empty_and_oov() {
        let v = busy_vocab();
        assert!(matches!(tokenize("   ", &v), Err(Error::EmptyInput)));
        let src = tokenize("zzz", &v).unwrap();
        assert_eq!(src.ids(), &[BOS, UNK, EOS, ins_token(1)]);
    }

    #[test]
    fn apply_with_one_insertion() {
        let v = busy_vocab();
        let src = tokenize("I be busy", &v).unwrap();
        let pi = Permutation::new(vec![0, 1, 5, 3, 4], 5, 1).unwrap();
        let out = apply_permutation(&src, &pi).unwrap();
        assert_eq!(out, vec![BOS, v.id("i"), ins_token(1), v.id("busy"), EOS]);
        let id = Permutation::identity(5);
        assert_eq!(apply_permutation(&src, &id).unwrap(), src.core());
    }

    #[test]
    fn apply_with_three_insertions() {
        let words = "it was 20 years ago we were friends since us were 10";
        let v = Vocab::from_texts([words], 3).unwrap();
        let src = tokenize(words, &v).unwrap();
        assert_eq!(src.n(), 14);
        let pi = Permutation::new(
            vec![0, 1, 2, 3, 4, 5, 14, 6, 15, 8, 9, 16, 11, 12, 13],
            14,
            3,
        )
        .unwrap();
        let out = apply_permutation(&src, &pi).unwrap();
        let text: Vec<&str> = out.iter().map(|&t| v.token(t)).collect();
        assert_eq!(
            text.join(" "),
            "<s> it was 20 years ago <ins1> we <ins2> friends since <ins3> were 10 </s>"
        );
    }

    #[test]
    fn permutation_invariants() {
        assert!(Permutation::new(vec![0, 1, 2, 3], 4, 1).is_ok());
        assert!(Permutation::new(vec![1, 0, 2, 3], 4, 1).is_err());
        assert!(Permutation::new(vec![0, 1, 2], 4, 1).is_err());
        assert!(Permutation::new(vec![0, 1, 1, 3], 4, 1).is_err());
        assert!(Permutation::new(vec![0, 5, 4, 3], 4, 2).is_err());
        assert!(Permutation::new(vec![0, 4, 5, 3], 4, 2).is_err());
        assert!(Permutation::new(vec![0, 4, 1, 5, 3], 4, 2).is_ok());
        assert!(Permutation::new(vec![0, 9, 3], 4, 2).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_texts(["the cat sat", "a dog"], 8).unwrap();
        let parsed = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(parsed, v);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t) as usize, i);
        }
        assert!(Vocab::parse("<s>\n</s>\n").is_err());
    }
}
