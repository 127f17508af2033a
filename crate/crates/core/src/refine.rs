//! Step-unrolled denoising decoder: two-pass training loss and iterative
//! refinement restricted to the `<msk>` slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::types::{TokenId, Vocab, BOS, EOS, INS_BASE, MSK, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    /// One decoder pass, target tokens independent given the input.
    Vanilla,
    /// Unrolled training on the decoder's own samples, several refinement
    /// passes at inference.
    Sundae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SundaeConfig {
    /// Weight of the first-pass term in the unrolled loss.
    pub lambda0: f64,
    /// Decoder passes at inference.
    pub steps: usize,
    pub mode: DecoderMode,
}

impl SundaeConfig {
    pub fn vanilla() -> Self {
        SundaeConfig {
            lambda0: 1.0,
            steps: 1,
            mode: DecoderMode::Vanilla,
        }
    }

    pub fn sundae(lambda0: f64, steps: usize) -> Result<Self> {
        let cfg = SundaeConfig {
            lambda0,
            steps,
            mode: DecoderMode::Sundae,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda0) {
            return Err(Error::Config(format!(
                "lambda0 {} outside [0, 1]",
                self.lambda0
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("decoder steps must be at least 1".into()));
        }
        if self.mode == DecoderMode::Vanilla && (self.steps != 1 || self.lambda0 != 1.0) {
            return Err(Error::Config(
                "vanilla mode requires steps = 1 and lambda0 = 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether training needs the second, sampled pass.
    pub fn needs_second_pass(&self) -> bool {
        self.lambda0 < 1.0
    }
}

impl Default for SundaeConfig {
    fn default() -> Self {
        SundaeConfig {
            lambda0: 0.25,
            steps: 2,
            mode: DecoderMode::Sundae,
        }
    }
}

/// Loss value and its gradient with respect to the logits of each pass.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledLoss {
    pub loss: f64,
    pub ce_first: f64,
    pub ce_second: f64,
    pub grad_first: Mat,
    pub grad_second: Option<Mat>,
}

fn cross_entropy(logp: &Mat, targets: &[TokenId], weight: f64) -> (f64, Mat) {
    let mut grad = Mat::zeros(logp.rows, logp.cols);
    let mut ce = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        ce -= logp.get(k, t as usize);
        if weight != 0.0 {
            let g = grad.row_mut(k);
            for (gj, lj) in g.iter_mut().zip(logp.row(k)) {
                *gj = weight * lj.exp();
            }
            g[t as usize] -= weight;
        }
    }
    (ce, grad)
}

/// `lambda0 * CE(first) + (1 - lambda0) * CE(second)`, each cross-entropy
/// summed over the `<msk>` slots.
///
/// Rows of `first` and `second` are log-probabilities for the `<msk>` slots in
/// order (row `k` belongs to the `k`-th slot) and `targets[k]` is that slot's
/// target. The second pass must have been computed on an input whose slots
/// were sampled from the first pass; no gradient flows through the sampling.
/// Gradients are with respect to the logits that produced each row.
pub fn unrolled_loss(
    first: &Mat,
    second: Option<&Mat>,
    targets: &[TokenId],
    lambda0: f64,
) -> Result<UnrolledLoss> {
    if first.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} rows for {} targets",
            first.rows,
            targets.len()
        )));
    }
    let (ce_first, grad_first) = cross_entropy(first, targets, lambda0);
    let (ce_second, grad_second) = match second {
        Some(p2) if lambda0 < 1.0 => {
            if p2.rows != targets.len() {
                return Err(Error::Shape("second pass row count".into()));
            }
            let (ce, g) = cross_entropy(p2, targets, 1.0 - lambda0);
            (ce, Some(g))
        }
        None if lambda0 < 1.0 => {
            return Err(Error::Shape("lambda0 < 1 needs a second pass".into()))
        }
        _ => (0.0, None),
    };
    let loss = if lambda0 < 1.0 {
        lambda0 * ce_first + (1.0 - lambda0) * ce_second
    } else {
        ce_first
    };
    Ok(UnrolledLoss {
        loss,
        ce_first,
        ce_second,
        grad_first,
        grad_second,
    })
}

/// Decoder input whose `<msk>` slots are the only positions refinement may
/// change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    tokens: Vec<TokenId>,
    msk_positions: Vec<usize>,
    step: usize,
}

impl DecodeState {
    /// Freezes the current `<msk>` positions of `tokens`.
    pub fn new(tokens: Vec<TokenId>) -> Self {
        let msk_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == MSK)
            .map(|(i, _)| i)
            .collect();
        DecodeState {
            tokens,
            msk_positions,
            step: 0,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn msk_positions(&self) -> &[usize] {
        &self.msk_positions
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub tokens: Vec<TokenId>,
    /// Decoder invocations made.
    pub calls: usize,
    /// Sum of the log-probabilities of the chosen slot tokens under the last
    /// pass; zero when nothing was decoded.
    pub logp: f64,
}

/// Runs `steps` decoder passes. Each pass scores the previous pass's full
/// sequence and writes the argmax into the frozen `<msk>` slots only; without
/// slots the decoder is not called at all.
///
/// `score_fn(tokens, slots)` returns one row of log-probabilities per slot.
pub fn refine<F>(mut state: DecodeState, mut score_fn: F, steps: usize) -> Result<Refined>
where
    F: FnMut(&[TokenId], &[usize]) -> Result<Mat>,
{
    if state.msk_positions.is_empty() {
        return Ok(Refined {
            tokens: state.tokens,
            calls: 0,
            logp: 0.0,
        });
    }
    let mut calls = 0;
    let mut logp = 0.0;
    for _ in 0..steps.max(1) {
        let scores = score_fn(&state.tokens, &state.msk_positions)?;
        calls += 1;
        if scores.rows != state.msk_positions.len() {
            return Err(Error::Shape("score rows do not match slots".into()));
        }
        logp = 0.0;
        for (k, &pos) in state.msk_positions.iter().enumerate() {
            let row = scores.row(k);
            let (best, best_v) = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            state.tokens[pos] = best as TokenId;
            logp += best_v;
        }
        state.step += 1;
    }
    Ok(Refined {
        tokens: state.tokens,
        calls,
        logp,
    })
}

/// Surface string: drops sentinels, `<pad>`, `<msk>` and `<ins>` and joins
/// the remaining tokens with single spaces. `<unk>` is kept.
pub fn finalize(tokens: &[TokenId], vocab: &Vocab) -> String {
    tokens
        .iter()
        .filter(|&&t| !matches!(t, PAD | BOS | EOS | MSK) && (t == UNK || t < INS_BASE || !vocab.is_special(t)))
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_softmax_rows;

    #[test]
    fn vanilla_invariants() {
        assert!(SundaeConfig::vanilla().validate().is_ok());
        let bad = SundaeConfig {
            lambda0: 0.5,
            steps: 1,
            mode: DecoderMode::Vanilla,
        };
        assert!(bad.validate().is_err());
        assert!(SundaeConfig::sundae(1.5, 2).is_err());
        assert!(SundaeConfig::sundae(0.25, 0).is_err());
    }

    #[test]
    fn hand_computed_half_weight() {
        // two slots over a 3-token vocabulary
        let p1 = Mat::from_vec(2, 3, vec![0.7, 0.2, 0.1, 0.1, 0.3, 0.6]);
        let p2 = Mat::from_vec(2, 3, vec![0.5, 0.25, 0.25, 0.2, 0.2, 0.6]);
        let l1 = Mat::from_vec(2, 3, p1.data.iter().map(|v: &f64| v.ln()).collect());
        let l2 = Mat::from_vec(2, 3, p2.data.iter().map(|v: &f64| v.ln()).collect());
        let out = unrolled_loss(&l1, Some(&l2), &[0, 2], 0.5).unwrap();
        let ce1 = -(0.7f64.ln() + 0.6f64.ln());
        let ce2 = -(0.5f64.ln() + 0.6f64.ln());
        assert!((out.ce_first - ce1).abs() < 1e-12);
        assert!((out.ce_second - ce2).abs() < 1e-12);
        assert!((out.loss - 0.5 * (ce1 + ce2)).abs() < 1e-12);
        let g = out.grad_first;
        assert!((g.get(0, 0) - 0.5 * (0.7 - 1.0)).abs() < 1e-12);
        assert!((g.get(1, 1) - 0.5 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_is_plain_cross_entropy() {
        let logits = Mat::from_vec(2, 4, vec![0.1, 1.0, -0.5, 2.0, 0.0, 0.3, 0.3, -1.0]);
        let lp = log_softmax_rows(&logits);
        let vanilla = unrolled_loss(&lp, None, &[3, 1], 1.0).unwrap();
        let other = log_softmax_rows(&Mat::from_vec(2, 4, vec![5.0; 8]));
        let with_second = unrolled_loss(&lp, Some(&other), &[3, 1], 1.0).unwrap();
        assert_eq!(vanilla.loss, with_second.loss);
        assert_eq!(vanilla.loss, -(lp.get(0, 3) + lp.get(1, 1)));
        assert!(vanilla.grad_second.is_none());
    }

    #[test]
    fn empty_slots_give_zero_loss() {
        let lp = Mat::zeros(0, 5);
        let out = unrolled_loss(&lp, Some(&lp), &[], 0.25).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn no_slots_means_no_decoder_call() {
        let state = DecodeState::new(vec![BOS, 10, 11, EOS]);
        let mut calls = 0;
        let out = refine(
            state,
            |_, _| {
                calls += 1;
                Ok(Mat::zeros(0, 12))
            },
            2,
        )
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(out.calls, 0);
        assert_eq!(out.tokens, vec![BOS, 10, 11, EOS]);
    }

    #[test]
    fn constant_scorer_is_a_fixed_point() {
        let tokens = vec![BOS, 9, MSK, MSK, MSK, 10, EOS];
        let scorer = |_: &[TokenId], slots: &[usize]| {
            let mut m = Mat::zeros(slots.len(), 12);
            for k in 0..slots.len() {
                m.row_mut(k)[7 + k] = 1.0;
            }
            Ok(log_softmax_rows(&m))
        };
        let one = refine(DecodeState::new(tokens.clone()), scorer, 1).unwrap();
        let two = refine(DecodeState::new(tokens), scorer, 2).unwrap();
        assert_eq!(one.tokens, two.tokens);
        assert_eq!(two.calls, 2);
    }

    #[test]
    fn refinement_with_oracle_scorer() {
        let v = Vocab::new(["i", "be", "busy", "am"], 1).unwrap();
        let input = vec![BOS, v.id("i"), MSK, MSK, MSK, v.id("busy"), EOS];
        let gold = [v.id("am"), PAD, PAD];
        let out = refine(
            DecodeState::new(input.clone()),
            |_, slots| {
                let mut m = Mat::from_vec(slots.len(), v.len(), vec![-10.0; slots.len() * v.len()]);
                for (k, &g) in gold.iter().enumerate() {
                    m.row_mut(k)[g as usize] = 0.0;
                }
                Ok(m)
            },
            2,
        )
        .unwrap();
        assert_eq!(
            out.tokens,
            vec![BOS, v.id("i"), v.id("am"), PAD, PAD, v.id("busy"), EOS]
        );
        for (i, (&a, &b)) in input.iter().zip(&out.tokens).enumerate() {
            if a != MSK {
                assert_eq!(a, b, "position {i} changed");
            }
        }
        assert_eq!(finalize(&out.tokens, &v), "i am busy");
    }

    #[test]
    fn finalize_edge_cases() {
        let v = Vocab::from_texts(["it was 20 years ago and we had been friends since were 10"], 3).unwrap();
        assert_eq!(finalize(&[BOS, EOS], &v), "");
        let row = "<s> it was 20 years ago and <pad> <pad> we had been <pad> friends since we <pad> <pad> were 10 </s>";
        let ids: Vec<TokenId> = row.split(' ').map(|t| v.id(t)).collect();
        assert_eq!(
            finalize(&ids, &v),
            "it was 20 years ago and we had been friends since we were 10"
        );
    }
}
