use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use permfill::align::{build_example, match_spans, OracleConfig};
use permfill::config::SearchConfig;
use permfill::corpus::{inject_errors, inject_errors_traced, NoiseConfig};
use permfill::eval::{apply_edits, extract_edits, ScoreReport};
use permfill::neural::{ModelConfig, ModelParams};
use permfill::pipeline::Corrector;
use permfill::refine::{refine, unrolled_loss, DecodeState, SundaeConfig};
use permfill::search::{beam_search, rank_order, score_permutation, sinkhorn, BeamConfig, PointerMatrix};
use permfill::tensor::Mat;
use permfill::toy;
use permfill::types::{
    apply_permutation, expand_insertions, tokenize, validate_permutation, Permutation, SourceSentence,
    TokenId, Vocab, INS_BASE, MSK, PAD,
};

const ALPHABET: &str = "a b c d e";

fn sentence(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..=max)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn matrix(n: usize, s: usize, seed: u64) -> PointerMatrix {
    let m = n + s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointerMatrix::new((0..m * m).map(|_| rng.gen_range(-3.0..3.0)).collect(), n, s).unwrap()
}

/// A random walk through the moves a permutation may make.
fn random_permutation(n: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pi = vec![0];
    let mut next_ins = n;
    loop {
        let last = *pi.last().unwrap();
        let mut moves: Vec<usize> = (1..n - 1).filter(|j| !pi.contains(j)).collect();
        if last < n && next_ins < n + s {
            moves.push(next_ins);
        }
        if moves.is_empty() || rng.gen_bool(0.2) {
            pi.push(n - 1);
            return pi;
        }
        let j = moves[rng.gen_range(0..moves.len())];
        if j >= n {
            next_ins += 1;
        }
        pi.push(j);
    }
}

fn tiny_corrector(steps: usize, seed: u64) -> Corrector {
    let v = Vocab::from_texts([ALPHABET], 4).unwrap();
    let cfg = ModelConfig {
        vocab_size: v.len(),
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_mult: 2,
        max_len: 128,
        dropout: 0.0,
        tie_embeddings: true,
    };
    let search = SearchConfig {
        confidence_bias: 0.0,
        ..SearchConfig::default()
    };
    let decoder = SundaeConfig::sundae(0.25, steps).unwrap();
    Corrector::new(ModelParams::new(cfg, seed).unwrap(), v, search, decoder).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn oracle_permutations_are_valid_and_reconstruct(x in sentence(8), y in sentence(8), s in 1usize..4) {
        let v = Vocab::from_texts([ALPHABET], s).unwrap();
        let (xi, yi) = (v.wrap(&x.join(" ")), v.wrap(&y.join(" ")));
        let ex = build_example(&xi, &yi, &OracleConfig { s, ..OracleConfig::default() }).unwrap();
        prop_assert!(ex.check().is_ok());
        if !ex.lossy {
            prop_assert_eq!(ex.reconstruct(), yi);
        }
    }

    #[test]
    fn matched_spans_never_overlap(x in sentence(10), y in sentence(10)) {
        let v = Vocab::from_texts([ALPHABET], 1).unwrap();
        let (xi, yi) = (v.wrap(&x.join(" ")), v.wrap(&y.join(" ")));
        let spans = match_spans(&xi, &yi);
        let mut src = vec![0; xi.len()];
        let mut tgt = vec![0; yi.len()];
        for sp in &spans {
            prop_assert_eq!(&xi[sp.start_src..sp.end_src()], &yi[sp.start_tgt..sp.end_tgt()]);
            src[sp.start_src..sp.end_src()].iter_mut().for_each(|c| *c += 1);
            tgt[sp.start_tgt..sp.end_tgt()].iter_mut().for_each(|c| *c += 1);
        }
        prop_assert!(src.iter().chain(&tgt).all(|&c| c <= 1));
        prop_assert!(spans.windows(2).all(|w| w[0].start_tgt < w[1].start_tgt));
    }

    #[test]
    fn permuted_sources_round_trip(words in sentence(8), s in 1usize..4, seed: u64) {
        let v = Vocab::from_texts([ALPHABET], s).unwrap();
        let text = words.join(" ");
        let src = tokenize(&text, &v).unwrap();
        prop_assert_eq!(&src, &tokenize(&text, &v).unwrap());
        let pi = Permutation::new(random_permutation(src.n(), s, seed), src.n(), s).unwrap();
        let out = apply_permutation(&src, &pi).unwrap();
        prop_assert!(!out.contains(&PAD) && !out.contains(&MSK));
        let (expanded, _) = expand_insertions(&out, s);
        let kept: Vec<TokenId> = expanded.into_iter().filter(|&t| t != MSK && t != PAD).collect();
        let plain: Vec<TokenId> = out.into_iter().filter(|&t| !(INS_BASE..INS_BASE + s as TokenId).contains(&t)).collect();
        prop_assert_eq!(kept, plain);
    }

    #[test]
    fn beam_emits_valid_sorted_permutations(n in 2usize..=10, s in 0usize..=3, width in 1usize..6, c in 0.0f64..1.0, norm: bool, seed: u64) {
        let a = matrix(n, s, seed);
        let cfg = BeamConfig { width, confidence_bias: c, length_norm: norm };
        let beams = beam_search(&a, &cfg).unwrap();
        prop_assert!(!beams.is_empty() && beams.len() <= width);
        for b in &beams {
            prop_assert!(validate_permutation(b.perm.as_slice(), n, s).is_ok());
        }
        for w in beams.windows(2) {
            prop_assert!(rank_order(w[0].score, w[0].perm.as_slice(), w[1].score, w[1].perm.as_slice()).is_le());
        }
    }

    #[test]
    fn no_beam_beats_exact_search(n in 2usize..=5, s in 0usize..=2, width in 1usize..6, norm: bool, seed: u64) {
        // wider is not always better, but nothing beats a beam wide enough to be exhaustive
        let a = matrix(n, s, seed);
        let top = |w| beam_search(&a, &BeamConfig { width: w, confidence_bias: 0.0, length_norm: norm }).unwrap()[0].score;
        prop_assert!(top(10_000) >= top(width) - 1e-12);
    }

    #[test]
    fn full_confidence_keeps_source_order(n in 2usize..=10, s in 0usize..=3, width in 1usize..5, seed: u64) {
        let a = matrix(n, s, seed);
        let beams = beam_search(&a, &BeamConfig { width, confidence_bias: 1.0, length_norm: true }).unwrap();
        prop_assert!(beams[0].perm.is_identity(n));
    }

    #[test]
    fn permutation_probabilities_sum_to_one(n in 2usize..=5, s in 0usize..=2, norm: bool, seed: u64) {
        let a = matrix(n, s, seed);
        let all = beam_search(&a, &BeamConfig { width: 10_000, confidence_bias: 0.0, length_norm: norm }).unwrap();
        let total: f64 = all.iter().map(|b| b.logp.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
        for b in &all {
            prop_assert!((score_permutation(&a, &b.perm, 0.0).unwrap() - b.logp).abs() < 1e-12);
        }
        // normalization reorders but reaches the same set
        let other = beam_search(&a, &BeamConfig { width: 10_000, confidence_bias: 0.0, length_norm: !norm }).unwrap();
        let mut p: Vec<Vec<usize>> = all.iter().map(|b| b.perm.as_slice().to_vec()).collect();
        let mut q: Vec<Vec<usize>> = other.iter().map(|b| b.perm.as_slice().to_vec()).collect();
        p.sort();
        q.sort();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn sinkhorn_marginals_improve(n in 2usize..=7, s in 0usize..=2, scale in 0.5f64..3.0, seed: u64) {
        let m = n + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-scale..scale)).collect();
        let a = PointerMatrix::new(raw, n, s).unwrap();
        // rows are normalized last, columns converge at a rate set by the spread
        let col_error = |steps| {
            let b = sinkhorn(&a, steps);
            let mut worst: f64 = 0.0;
            for i in 0..m {
                let row: f64 = (0..m).map(|j| b.get(i, j).exp()).sum();
                assert!((row - 1.0).abs() < 1e-12);
                let col: f64 = (0..m).map(|j| b.get(j, i).exp()).sum();
                worst = worst.max((col - 1.0).abs());
            }
            worst
        };
        let (e10, e50, e200) = (col_error(10), col_error(50), col_error(200));
        prop_assert!(e50 <= e10 + 1e-12 && e200 <= e50 + 1e-12, "{} {} {}", e10, e50, e200);
        if scale <= 1.0 {
            prop_assert!(e200 < 1e-6, "scale {} error {}", scale, e200);
        }
    }

    #[test]
    fn refinement_only_touches_slots(
        tokens in prop::collection::vec(prop::sample::select(vec![2u32, 3, 4, 6, 7, 8]), 1..20),
        steps in 1usize..4,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = DecodeState::new(tokens.clone());
        let slots = state.msk_positions().to_vec();
        let out = refine(state, |_, pos| {
            Ok(Mat::from_vec(pos.len(), 9, (0..pos.len() * 9).map(|_| rng.gen_range(-5.0..0.0)).collect()))
        }, steps).unwrap();
        for (i, (&a, &b)) in tokens.iter().zip(&out.tokens).enumerate() {
            if !slots.contains(&i) {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert_eq!(out.calls, if slots.is_empty() { 0 } else { steps });
    }

    #[test]
    fn unrolled_loss_reduces_to_single_pass(rows in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logp = |rng: &mut ChaCha8Rng| {
            let mut m = Mat::zeros(rows, 5);
            for r in 0..rows {
                let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let z = raw.iter().map(|v| v.exp()).sum::<f64>().ln();
                for (dst, v) in m.row_mut(r).iter_mut().zip(raw) {
                    *dst = v - z;
                }
            }
            m
        };
        let (p1, p2) = (logp(&mut rng), logp(&mut rng));
        let targets: Vec<TokenId> = (0..rows).map(|_| rng.gen_range(0..5)).collect();
        let single = unrolled_loss(&p1, None, &targets, 1.0).unwrap();
        let unrolled = unrolled_loss(&p1, Some(&p2), &targets, 1.0).unwrap();
        prop_assert_eq!(single.loss, unrolled.loss);
        prop_assert_eq!(&single.grad_first, &unrolled.grad_first);
        let mixed = unrolled_loss(&p1, Some(&p2), &targets, 0.25).unwrap();
        prop_assert!(mixed.loss >= 0.0);
    }

    #[test]
    fn edits_round_trip(src in sentence(10), hyp in sentence(10)) {
        let edits = extract_edits(&src, &hyp);
        prop_assert_eq!(apply_edits(&src, &edits), hyp.clone());
        prop_assert!(edits.windows(2).all(|w| w[0].end <= w[1].start));
        if src == hyp {
            prop_assert!(edits.is_empty());
        }
    }

    #[test]
    fn f_beta_matches_closed_form(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, beta in 0.1f64..3.0) {
        let r = ScoreReport::from_counts(tp, fp, fn_, beta);
        let (p, rc) = (r.precision, r.recall);
        let b2 = beta * beta;
        let closed = if p + rc == 0.0 { 0.0 } else { (1.0 + b2) * p * rc / (b2 * p + rc) };
        prop_assert!((r.f_beta - closed).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn noise_is_seeded_and_hits_its_rate(seed: u64) {
        let words: Vec<String> = toy::grammar_words().into_iter().collect();
        let mut cfg = NoiseConfig { seed, ..NoiseConfig::default() };
        for w in &words {
            cfg.confusion_sets.insert(w.clone(), words.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<String> = (0..100_000).map(|_| words[rng.gen_range(0..words.len())].clone()).collect();
        prop_assert_eq!(inject_errors(&clean, &cfg), inject_errors(&clean, &cfg));
        let (_, trace) = inject_errors_traced(&clean, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        // a swap consumes its right neighbour without a draw
        let draws = (trace.tokens - trace.swaps) as f64;
        let expected = cfg.p_drop + cfg.p_swap + cfg.p_dup + cfg.p_replace;
        let rate = trace.corrupted() as f64 / draws;
        prop_assert!((rate - expected).abs() <= 0.02 * expected, "rate {} vs {}", rate, expected);
        let drop_rate = trace.drops as f64 / draws;
        prop_assert!((drop_rate - cfg.p_drop).abs() <= 0.1 * cfg.p_drop, "drop rate {}", drop_rate);
    }

    #[test]
    fn decoding_cost_is_flat_in_length(steps in 1usize..4, seed: u64) {
        let c = tiny_corrector(steps, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let letters = ["a", "b", "c", "d", "e"];
        for len in [1usize, 5, 20, 60] {
            let text: Vec<&str> = (0..len).map(|_| letters[rng.gen_range(0..5)]).collect();
            let r = c.correct(&text.join(" ")).unwrap();
            prop_assert_eq!(r.counts.encoder, 1);
            prop_assert!(r.counts.decoder <= steps);
            // pointer steps grow with the sentence, decoder passes do not
            prop_assert!(r.counts.beam_steps + 1 >= r.best().perm.len());
        }
    }

    #[test]
    fn toy_pairs_always_build(seed in 0u64..1000) {
        let spec = toy::ToySpec { synthetic: 200, domain: 50, stage2_synthetic: 20, dev: 10, test: 10, seed, ..Default::default() };
        let corpora = toy::generate(&spec).unwrap();
        let cfg = OracleConfig::default();
        for corpus in corpora.training() {
            for (x, y) in &corpus.pairs {
                let v = Vocab::from_texts([x.as_str(), y.as_str()], cfg.s).unwrap();
                let ex = build_example(&v.wrap(x), &v.wrap(y), &cfg).unwrap();
                prop_assert!(ex.check().is_ok());
                let src = SourceSentence::from_core(&v.wrap(x), cfg.s).unwrap();
                prop_assert_eq!(src.n(), x.split_whitespace().count() + 2);
            }
        }
    }
}
