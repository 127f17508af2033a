use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::align::{build_example, OracleConfig};
use crate::refine::SundaeConfig;
use crate::tensor::Mat;
use crate::types::{TokenId, TrainingExample, Vocab, MSK};

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_mult: 2,
        max_len: 16,
        dropout: 0.0,
        tie_embeddings: true,
    }
}

fn oracle(s: usize) -> OracleConfig {
    OracleConfig {
        s,
        ..OracleConfig::default()
    }
}

fn pair(v: &Vocab, x: &str, y: &str, s: usize) -> TrainingExample {
    build_example(&v.wrap(x), &v.wrap(y), &oracle(s)).unwrap()
}

/// 20-token vocabulary (7 specials with s = 2) and two examples that need
/// an insertion and a reordering.
fn fd_fixture() -> (Vocab, Vec<TrainingExample>) {
    let v = Vocab::from_texts(["a b c d e f g h i j k l m"], 2).unwrap();
    assert_eq!(v.len(), 20);
    let ex = vec![
        pair(&v, "a b d e", "a b c d e", 2),
        pair(&v, "f g h i j", "f i j g h k", 2),
    ];
    (v, ex)
}

fn fixed_second_pass(ex: &[TrainingExample]) -> Vec<Vec<TokenId>> {
    gradcheck::fixed_second_pass(ex, 20)
}

fn loss_and_grad(
    p: &ModelParams,
    ex: &[TrainingExample],
    opts: &LossOptions,
    fixed: &[Vec<TokenId>],
) -> (f64, ModelParams) {
    let refs: Vec<&TrainingExample> = ex.iter().collect();
    let mut g = p.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = p
        .chunk_loss(&refs, opts, Pass2::Fixed(fixed), &mut rng, &mut g, 0)
        .unwrap();
    (r.total, g)
}

fn check_gradients(p: &ModelParams, ex: &[TrainingExample], opts: &LossOptions) -> f64 {
    gradcheck::check_gradients(p, ex, opts, 1e-5).unwrap().worst()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (v, ex) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 3).unwrap();
    for lambda0 in [0.25, 1.0] {
        let sundae = if lambda0 < 1.0 {
            SundaeConfig::sundae(lambda0, 2).unwrap()
        } else {
            SundaeConfig::vanilla()
        };
        let opts = LossOptions {
            lambda_per: 5.0,
            sundae,
            temperature: 1.0,
            train: false,
        };
        let worst = check_gradients(&p, &ex, &opts);
        assert!(worst <= 1e-4, "lambda0 {lambda0}: worst relative error {worst}");
    }
}

#[test]
fn untied_output_gradients_match_finite_differences() {
    let (v, ex) = fd_fixture();
    let cfg = ModelConfig {
        tie_embeddings: false,
        ..tiny_config(v.len())
    };
    let p = ModelParams::new(cfg, 5).unwrap();
    let opts = LossOptions {
        train: false,
        ..LossOptions::default()
    };
    let worst = check_gradients(&p, &ex[..1], &opts);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_parameters_give_equal_rows() {
    let (v, ex) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 1).unwrap().zeros_like();
    let h = p.encode(ex[0].source.ids()).unwrap();
    for i in 1..h.rows {
        assert_eq!(h.row(i), h.row(0));
    }
    let a = p
        .pointer_matrix(&h, ex[0].source.n(), ex[0].source.s())
        .unwrap();
    assert!(a.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn encoding_is_deterministic() {
    let (v, ex) = fd_fixture();
    let a = ModelParams::new(tiny_config(v.len()), 42).unwrap();
    let b = ModelParams::new(tiny_config(v.len()), 42).unwrap();
    let ha = a.encode(ex[1].source.ids()).unwrap();
    let hb = b.encode(ex[1].source.ids()).unwrap();
    assert_eq!(ha.data, hb.data);
}

#[test]
fn too_long_input_is_rejected() {
    let (v, _) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 0).unwrap();
    let ids = vec![8; 17];
    assert!(matches!(
        p.encode(&ids),
        Err(crate::Error::LengthExceeded { len: 17, max: 16 })
    ));
}

#[test]
fn decoder_rows_are_distributions_and_position_aware() {
    let (v, ex) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 0).unwrap();
    let h = p.encode(ex[1].source.ids()).unwrap();
    let tokens = ex[1].dec_input.clone();
    let probs = p.decode_distributions(&h, &tokens).unwrap();
    for i in 0..probs.rows {
        let sum: f64 = probs.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let slot = tokens.iter().position(|&t| t == MSK).unwrap();
    let mut swapped = tokens.clone();
    let last = swapped.len() - 2;
    swapped.swap(1, last);
    let other = p.decode_distributions(&h, &swapped).unwrap();
    assert_ne!(probs.row(slot), other.row(slot));
}

#[test]
fn symmetric_rows_give_equal_pointer_rows() {
    let (v, _) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 9).unwrap();
    let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let h = Mat::from_vec(5, 8, row.repeat(5));
    let a = p.pointer_matrix(&h, 4, 1).unwrap();
    for i in 1..5 {
        for j in 0..5 {
            assert!((a.get(i, j) - a.get(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn permutation_weight_zero_leaves_decoder_loss() {
    let (v, ex) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 2).unwrap();
    let fixed = fixed_second_pass(&ex);
    let opts = LossOptions {
        lambda_per: 0.0,
        train: false,
        ..LossOptions::default()
    };
    let refs: Vec<&TrainingExample> = ex.iter().collect();
    let mut g = p.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = p
        .chunk_loss(&refs, &opts, Pass2::Fixed(&fixed), &mut rng, &mut g, 0)
        .unwrap();
    assert_eq!(r.total, r.dec);
    assert!(g.key.w.data.iter().all(|&x| x == 0.0));
}

#[test]
fn vanilla_and_sundae_agree_at_lambda_one() {
    let (v, ex) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 2).unwrap();
    let fixed = fixed_second_pass(&ex);
    let vanilla = LossOptions {
        sundae: SundaeConfig::vanilla(),
        train: false,
        ..LossOptions::default()
    };
    let sundae_one = LossOptions {
        sundae: SundaeConfig::sundae(1.0, 2).unwrap(),
        ..vanilla
    };
    let a = loss_and_grad(&p, &ex, &vanilla, &fixed);
    let b = loss_and_grad(&p, &ex, &sundae_one, &fixed);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn overfits_a_single_example() {
    let v = Vocab::new(["i", "be", "busy", "am"], 1).unwrap();
    let ex = vec![pair(&v, "i be busy", "i am busy", 1)];
    let cfg = ModelConfig {
        d_model: 16,
        ..tiny_config(v.len())
    };
    let mut p = ModelParams::new(cfg, 0).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let opts = LossOptions {
        lambda_per: 1.0,
        sundae: SundaeConfig::vanilla(),
        train: false,
        ..LossOptions::default()
    };
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let (r, g) = p.batch_loss(&ex, &opts, step).unwrap();
        last = r.dec;
        opt.step(&mut p, &g, 0.03).unwrap();
    }
    let (r, _) = p.batch_loss(&ex, &opts, 99).unwrap();
    assert!(r.dec < 0.01, "masked CE {} (last step {last})", r.dec);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let v = Vocab::from_texts(["he she go goes went home now then they we a the"], 4).unwrap();
    let pairs = [
        ("he go home", "he goes home"),
        ("she go home now", "she goes home now"),
        ("they goes home", "they go home"),
        ("we goes home then", "we go home then"),
        ("he went home", "he went home"),
        ("home he goes", "he goes home"),
        ("she goes the home", "she goes home"),
        ("they go home now", "they go home now"),
    ];
    let ex: Vec<TrainingExample> = pairs.iter().map(|(x, y)| pair(&v, x, y, 4)).collect();
    let mut p = ModelParams::new(tiny_config(v.len()), 11).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let opts = LossOptions {
        train: false,
        sundae: SundaeConfig::vanilla(),
        ..LossOptions::default()
    };
    let mut prev = f64::INFINITY;
    for step in 0..20 {
        let (r, g) = p.batch_loss(&ex, &opts, step).unwrap();
        assert!(r.total < prev, "step {step}: {} !< {prev}", r.total);
        prev = r.total;
        opt.step(&mut p, &g, 1e-3).unwrap();
    }
}

#[test]
fn batch_gradient_is_independent_of_thread_count() {
    let (v, ex) = fd_fixture();
    let cfg = ModelConfig {
        dropout: 0.1,
        ..tiny_config(v.len())
    };
    let p = ModelParams::new(cfg, 4).unwrap();
    let many: Vec<TrainingExample> = ex.iter().cycle().take(19).cloned().collect();
    let opts = LossOptions::default();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| p.batch_loss(&many, &opts, 77).unwrap())
    };
    let (r1, g1) = run(1);
    let (r3, g3) = run(3);
    assert_eq!(r1, r3);
    assert_eq!(g1, g3);
}

#[test]
fn adamw_closed_form_steps() {
    let (v, _) = fd_fixture();
    let mut p = ModelParams::new(tiny_config(v.len()), 0).unwrap();
    let before = p.clone();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    let zero = p.zeros_like();
    opt.step(&mut p, &zero, 0.1).unwrap();
    assert_eq!(p, before);

    // first step with unit gradient moves every entry by lr / (1 + eps)
    let mut ones = p.zeros_like();
    ones.tensors_mut().into_iter().for_each(|t| t.fill(1.0));
    let mut opt = AdamW::new(cfg, &p);
    let mut q = p.clone();
    opt.step(&mut q, &ones, 0.1).unwrap();
    let moved = q.tok_emb.data[0] - p.tok_emb.data[0];
    assert!((moved + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);

    // decoupled decay: decayed update = plain update - lr * wd * p
    let mut plain = p.clone();
    let mut decayed = p.clone();
    AdamW::new(cfg, &p).step(&mut plain, &ones, 0.1).unwrap();
    let with_decay = AdamWConfig {
        weight_decay: 0.01,
        ..cfg
    };
    AdamW::new(with_decay, &p).step(&mut decayed, &ones, 0.1).unwrap();
    for ((a, b), orig) in plain
        .named_tensors()
        .iter()
        .zip(decayed.named_tensors())
        .zip(p.named_tensors())
    {
        for ((x, y), o) in a.1.data.iter().zip(&b.1.data).zip(&orig.1.data) {
            assert_eq!(*y, *x - 0.1 * 0.01 * o);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let (v, ex) = fd_fixture();
    let p = ModelParams::new(tiny_config(v.len()), 8).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let mut q = p.clone();
    let (_, g) = p.batch_loss(&ex, &LossOptions::default(), 1).unwrap();
    opt.step(&mut q, &g, 0.01).unwrap();
    let ck = Checkpoint {
        params: q,
        optimizer: Some(opt),
        meta: serde_json::json!({ "vocab": v.to_text() }),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    let json = back.to_json();
    assert_eq!(json["model"]["d_model"], 8);
}
