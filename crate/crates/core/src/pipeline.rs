//! Sentence-level correction with a trained model: one encoder pass, pointer
//! search over the source, then slot refinement for each kept hypothesis.

use rayon::prelude::*;

use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::eval::{select_hypothesis, Candidate, PassCounts, Selection};
use crate::neural::ModelParams;
use crate::refine::{refine, DecodeState, SundaeConfig};
use crate::search::{beam_search, sinkhorn};
use crate::types::{
    apply_permutation, expand_insertions, tokenize, Permutation, TokenId, Vocab, INS_BASE, MSK,
    MSK_PER_INS, PAD, UNK,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    pub perm: Permutation,
    /// Beam ranking key of the permutation.
    pub perm_score: f64,
    pub perm_logp: f64,
    /// Log-probability of the chosen slot tokens under the last decoder pass.
    pub dec_logp: f64,
    pub decoder_calls: usize,
}

impl Hypothesis {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn candidate(&self) -> Candidate {
        Candidate {
            perm_score: self.perm_score,
            dec_logp: self.dec_logp,
            tokens: self.tokens.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub source: Vec<String>,
    /// Beam order, best first.
    pub hypotheses: Vec<Hypothesis>,
    pub counts: PassCounts,
}

impl Correction {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }

    /// Hypothesis picked by `mode` among the first `k`.
    pub fn select(&self, k: usize, mode: &Selection) -> &Hypothesis {
        let cands: Vec<Candidate> = self.hypotheses.iter().take(k).map(Hypothesis::candidate).collect();
        &self.hypotheses[select_hypothesis(&cands, mode).unwrap_or(0)]
    }
}

/// A trained model bundled with its vocabulary and inference settings.
#[derive(Debug, Clone)]
pub struct Corrector {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub search: SearchConfig,
    pub decoder: SundaeConfig,
}

impl Corrector {
    pub fn new(params: ModelParams, vocab: Vocab, search: SearchConfig, decoder: SundaeConfig) -> Result<Self> {
        if params.config.vocab_size != vocab.len() {
            return Err(Error::InvalidVocab(format!(
                "model has {} output tokens, vocabulary has {}",
                params.config.vocab_size,
                vocab.len()
            )));
        }
        if search.beam_width == 0 || search.topk == 0 {
            return Err(Error::Config("beam width and topk must be at least 1".into()));
        }
        decoder.validate()?;
        Ok(Corrector {
            params,
            vocab,
            search,
            decoder,
        })
    }

    /// Corrects one whitespace-tokenized sentence, keeping up to
    /// `search.topk` hypotheses. Words copied from the source keep their
    /// original spelling, so out-of-vocabulary words survive.
    pub fn correct(&self, text: &str) -> Result<Correction> {
        let words: Vec<String> = text.split_whitespace().map(String::from).collect();
        if words.is_empty() {
            return Ok(Correction {
                source: words,
                hypotheses: vec![Hypothesis {
                    tokens: Vec::new(),
                    perm: Permutation::identity(2),
                    perm_score: 0.0,
                    perm_logp: 0.0,
                    dec_logp: 0.0,
                    decoder_calls: 0,
                }],
                counts: PassCounts::default(),
            });
        }
        let src = tokenize(text, &self.vocab)?;
        let (n, s) = (src.n(), src.s());
        let h = self.params.encode(src.ids())?;
        let mut counts = PassCounts {
            encoder: 1,
            ..PassCounts::default()
        };
        let mut a = self.params.pointer_matrix(&h, n, s)?;
        if self.search.sinkhorn_steps > 0 {
            a = sinkhorn(&a, self.search.sinkhorn_steps);
        }
        let beams = beam_search(&a, &self.search.beam())?;
        counts.beam_steps = beams.iter().map(|b| b.perm.len() - 1).max().unwrap_or(0);

        let mut hypotheses = Vec::new();
        for b in beams.into_iter().take(self.search.topk) {
            let permuted = apply_permutation(&src, &b.perm)?;
            let (dec_input, _) = expand_insertions(&permuted, s);
            // source index behind every decoder position; None for slots
            let origin: Vec<Option<usize>> = b
                .perm
                .as_slice()
                .iter()
                .flat_map(|&j| {
                    if j < n {
                        vec![Some(j)]
                    } else {
                        vec![None; MSK_PER_INS]
                    }
                })
                .collect();
            debug_assert_eq!(origin.len(), dec_input.len());
            let refined = refine(
                DecodeState::new(dec_input),
                |tokens, slots| self.params.decode_log_probs(&h, tokens, slots),
                self.decoder.steps,
            )?;
            counts.decoder += refined.calls;
            let tokens = self.surface(&words, n, &origin, &refined.tokens);
            hypotheses.push(Hypothesis {
                tokens,
                perm: b.perm,
                perm_score: b.score,
                perm_logp: b.logp,
                dec_logp: refined.logp,
                decoder_calls: refined.calls,
            });
        }
        Ok(Correction {
            source: words,
            hypotheses,
            counts,
        })
    }

    fn surface(&self, words: &[String], n: usize, origin: &[Option<usize>], tokens: &[TokenId]) -> Vec<String> {
        let mut out = Vec::new();
        for (o, &t) in origin.iter().zip(tokens) {
            match o {
                Some(j) if *j >= 1 && *j < n - 1 => out.push(words[j - 1].clone()),
                Some(_) => {}
                None => {
                    let keep = t == UNK || !(t == PAD || t == MSK || t < INS_BASE || self.vocab.is_special(t));
                    if keep {
                        out.push(self.vocab.token(t).to_string());
                    }
                }
            }
        }
        out
    }

    /// Corrects sentences in parallel on the current thread pool; results
    /// keep input order.
    pub fn correct_all<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Vec<Result<Correction>> {
        texts.par_iter().map(|t| self.correct(t.as_ref())).collect()
    }
}
