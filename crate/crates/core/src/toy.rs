//! Template grammar for the shipped toy corpora.
//!
//! Every error the generators inject can be undone from context: verbs
//! agree with their subject and take the tense named by the time phrase,
//! every noun always carries the same article, and drops are limited to
//! articles and `to`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{inject_errors_with, NoiseConfig, ParallelCorpus, Stage, MAX_SENTENCE_TOKENS};
use crate::error::Result;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Person {
    First,
    Third,
    Plural,
}

const SUBJECTS: &[(&str, Person)] = &[
    ("i", Person::First),
    ("you", Person::Plural),
    ("he", Person::Third),
    ("she", Person::Third),
    ("we", Person::Plural),
    ("they", Person::Plural),
    ("my brother", Person::Third),
    ("my sister", Person::Third),
    ("my parents", Person::Plural),
    ("my friends", Person::Plural),
];

/// base, third person singular, past, objects.
const TRANSITIVE: &[(&str, &str, &str, &[&str])] = &[
    ("eat", "eats", "ate", &["an apple", "an orange", "a sandwich", "the cake", "the soup"]),
    ("watch", "watches", "watched", &["a movie", "the news", "the game"]),
    ("play", "plays", "played", &["the piano", "the guitar", "football", "the game"]),
    ("cook", "cooks", "cooked", &["dinner", "the soup", "a meal"]),
    ("visit", "visits", "visited", &["the museum", "the zoo", "my grandmother"]),
    ("buy", "buys", "bought", &["a book", "an umbrella", "a ticket", "an apple"]),
    ("clean", "cleans", "cleaned", &["the room", "the kitchen", "the car"]),
    ("like", "likes", "liked", &["the cake", "the museum", "football", "a movie", "the zoo"]),
];

const MOTION: &[(&str, &str, &str)] = &[
    ("go", "goes", "went"),
    ("walk", "walks", "walked"),
    ("drive", "drives", "drove"),
];

const PLACES: &[&str] = &["park", "school", "market", "beach", "office", "station"];

const ADJECTIVES: &[&str] = &["busy", "tired", "happy", "hungry", "late", "sick", "ready"];

const PRESENT_TIMES: &[&str] = &["every day", "every week", "every morning", "on weekends"];
const PAST_TIMES: &[&str] = &["yesterday", "last week", "last night", "two days ago"];
const BE_PRESENT_TIMES: &[&str] = &["today", "now"];
const BE_PAST_TIMES: &[&str] = &["yesterday", "last night"];

const EXTRAS: &[&str] = &["with my friends", "at home"];

const ARTICLES: &[&str] = &["a", "an", "the"];
const BE_FORMS: &[&str] = &["am", "is", "are", "was", "were"];

fn be_form(person: Person, past: bool) -> &'static str {
    match (person, past) {
        (Person::First, false) => "am",
        (Person::Third, false) => "is",
        (Person::Plural, false) => "are",
        (Person::Plural, true) => "were",
        (_, true) => "was",
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty list")
}

/// One grammatical sentence, as whitespace tokens.
pub fn sample_sentence<R: Rng>(rng: &mut R) -> Vec<String> {
    let (subject, person) = *SUBJECTS.choose(rng).expect("subjects");
    let past = rng.gen_bool(0.5);
    let mut body: Vec<&str> = vec![subject];
    let time;
    match rng.gen_range(0..3) {
        0 => {
            let (base, third, past_form, objects) = *TRANSITIVE.choose(rng).expect("verbs");
            body.push(match (past, person) {
                (true, _) => past_form,
                (false, Person::Third) => third,
                _ => base,
            });
            body.push(pick(rng, objects));
            if rng.gen_bool(0.25) {
                body.push(pick(rng, EXTRAS));
            }
            time = pick(rng, if past { PAST_TIMES } else { PRESENT_TIMES });
        }
        1 => {
            let (base, third, past_form) = *MOTION.choose(rng).expect("verbs");
            body.push(match (past, person) {
                (true, _) => past_form,
                (false, Person::Third) => third,
                _ => base,
            });
            body.push("to the");
            body.push(pick(rng, PLACES));
            time = pick(rng, if past { PAST_TIMES } else { PRESENT_TIMES });
        }
        _ => {
            body.push(be_form(person, past));
            body.push(pick(rng, ADJECTIVES));
            time = pick(rng, if past { BE_PAST_TIMES } else { BE_PRESENT_TIMES });
        }
    }
    let text = if rng.gen_bool(0.3) {
        format!("{time} {}", body.join(" "))
    } else {
        format!("{} {time}", body.join(" "))
    };
    text.split_whitespace().map(String::from).collect()
}

/// Every word the grammar can emit.
pub fn grammar_words() -> BTreeSet<String> {
    let mut phrases: Vec<&str> = Vec::new();
    phrases.extend(SUBJECTS.iter().map(|s| s.0));
    for (a, b, c, objs) in TRANSITIVE {
        phrases.extend([*a, *b, *c]);
        phrases.extend(objs.iter());
    }
    for (a, b, c) in MOTION {
        phrases.extend([*a, *b, *c]);
    }
    phrases.push("to the");
    for list in [
        PLACES,
        ADJECTIVES,
        PRESENT_TIMES,
        PAST_TIMES,
        BE_PRESENT_TIMES,
        BE_PAST_TIMES,
        EXTRAS,
        ARTICLES,
        BE_FORMS,
    ] {
        phrases.extend(list.iter());
    }
    phrases.push("and");
    phrases
        .iter()
        .flat_map(|p| p.split_whitespace().map(String::from))
        .collect()
}

fn confusion_sets() -> BTreeMap<String, Vec<String>> {
    let mut groups: Vec<Vec<&str>> = TRANSITIVE
        .iter()
        .map(|(a, b, c, _)| vec![*a, *b, *c])
        .collect();
    groups.extend(MOTION.iter().map(|(a, b, c)| vec![*a, *b, *c]));
    groups.push(BE_FORMS.to_vec());
    groups.push(ARTICLES.to_vec());
    let mut out = BTreeMap::new();
    for g in groups {
        for w in &g {
            out.insert(w.to_string(), g.iter().map(|s| s.to_string()).collect());
        }
    }
    out
}

fn droppable() -> BTreeSet<String> {
    ["a", "an", "the", "to"].iter().map(|s| s.to_string()).collect()
}

/// Stage I corruption: all four error types.
pub fn synthetic_noise(seed: u64) -> NoiseConfig {
    NoiseConfig {
        p_drop: 0.05,
        p_swap: 0.03,
        p_dup: 0.02,
        p_replace: 0.15,
        confusion_sets: confusion_sets(),
        droppable: droppable(),
        seed,
    }
}

/// In-domain corruption: mostly agreement, tense and article errors.
pub fn domain_noise(seed: u64) -> NoiseConfig {
    NoiseConfig {
        p_drop: 0.06,
        p_swap: 0.02,
        p_dup: 0.01,
        p_replace: 0.2,
        confusion_sets: confusion_sets(),
        droppable: droppable(),
        seed,
    }
}

/// Sizes of the generated splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub synthetic: usize,
    /// In-domain pairs; used in stage II and again alone in stage III.
    pub domain: usize,
    /// Synthetic pairs mixed into stage II.
    pub stage2_synthetic: usize,
    pub dev: usize,
    pub test: usize,
    /// Share of in-domain pairs left uncorrupted.
    pub clean_fraction: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            synthetic: 20_000,
            domain: 2_000,
            stage2_synthetic: 2_000,
            dev: 500,
            test: 500,
            clean_fraction: 0.2,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpora {
    pub stage1: ParallelCorpus,
    pub stage2: ParallelCorpus,
    pub stage3: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl ToyCorpora {
    pub fn training(&self) -> Vec<ParallelCorpus> {
        vec![self.stage1.clone(), self.stage2.clone(), self.stage3.clone()]
    }
}

fn corrupt<R: Rng>(clean: &[String], noise: &NoiseConfig, rng: &mut R, force: bool) -> Vec<String> {
    for _ in 0..16 {
        let out = inject_errors_with(clean, noise, rng);
        if !out.is_empty() && (!force || out != clean) {
            return out;
        }
    }
    clean.to_vec()
}

fn domain_pairs<R: Rng>(
    n: usize,
    spec: &ToySpec,
    noise: &NoiseConfig,
    rng: &mut R,
    exclude: &HashSet<Vec<String>>,
) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let y = sample_sentence(rng);
        if exclude.contains(&y) {
            continue;
        }
        let x = if rng.gen_bool(spec.clean_fraction) {
            y.clone()
        } else {
            corrupt(&y, noise, rng, true)
        };
        out.push((x.join(" "), y.join(" ")));
    }
    out
}

fn synthetic_pairs<R: Rng>(
    n: usize,
    noise: &NoiseConfig,
    rng: &mut R,
    exclude: &HashSet<Vec<String>>,
) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let y = sample_sentence(rng);
        if exclude.contains(&y) {
            continue;
        }
        let x = corrupt(&y, noise, rng, false);
        out.push((x.join(" "), y.join(" ")));
    }
    out
}

/// Generates all splits. Targets of the dev and test splits never appear
/// as targets in the training stages.
pub fn generate(spec: &ToySpec) -> Result<ToyCorpora> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dnoise = domain_noise(spec.seed);
    let snoise = synthetic_noise(spec.seed);
    let none = HashSet::new();
    let test = domain_pairs(spec.test, spec, &dnoise, &mut rng, &none);
    let mut held: HashSet<Vec<String>> = test
        .iter()
        .map(|(_, y)| y.split_whitespace().map(String::from).collect())
        .collect();
    let dev = domain_pairs(spec.dev, spec, &dnoise, &mut rng, &held);
    held.extend(
        dev.iter()
            .map(|(_, y)| y.split_whitespace().map(String::from).collect::<Vec<_>>()),
    );
    let stage1 = synthetic_pairs(spec.synthetic, &snoise, &mut rng, &held);
    let domain = domain_pairs(spec.domain, spec, &dnoise, &mut rng, &held);
    let mut stage2 = synthetic_pairs(spec.stage2_synthetic, &snoise, &mut rng, &held);
    stage2.extend(domain.iter().cloned());
    stage2.shuffle(&mut rng);
    Ok(ToyCorpora {
        stage1: ParallelCorpus::new(stage1, Stage::I)?,
        stage2: ParallelCorpus::new(stage2, Stage::II)?,
        stage3: ParallelCorpus::new(domain, Stage::III)?,
        dev: ParallelCorpus::new(dev, Stage::III)?,
        test: ParallelCorpus::new(test, Stage::III)?,
    })
}

/// In-domain pairs whose targets fall in `[b, b + 9]` tokens (capped at the
/// load limit) for each lower bound `b`, built by joining clauses with
/// `and`. Returns `(b, source, target)`.
pub fn length_sweep(buckets: &[usize], per_bucket: usize, seed: u64) -> Vec<(usize, String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = domain_noise(seed);
    let mut out = Vec::new();
    for &b in buckets {
        let hi = (b + 9).min(MAX_SENTENCE_TOKENS);
        let mut made = 0;
        while made < per_bucket {
            let mut y: Vec<String> = Vec::new();
            while y.len() < b {
                if !y.is_empty() {
                    y.push("and".into());
                }
                y.extend(sample_sentence(&mut rng));
            }
            if y.len() > hi {
                continue;
            }
            let x = corrupt(&y, &noise, &mut rng, true);
            if x.len() > MAX_SENTENCE_TOKENS {
                continue;
            }
            out.push((b, x.join(" "), y.join(" ")));
            made += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::OracleConfig;
    use crate::corpus::build_examples;
    use crate::types::Vocab;

    fn small() -> ToySpec {
        ToySpec {
            synthetic: 300,
            domain: 100,
            stage2_synthetic: 50,
            dev: 40,
            test: 40,
            ..ToySpec::default()
        }
    }

    #[test]
    fn vocabulary_is_small() {
        let words = grammar_words();
        let v = Vocab::new(words.iter().cloned(), 8).unwrap();
        assert!(v.len() <= 200, "{}", v.len());
    }

    #[test]
    fn sentences_use_grammar_words() {
        let words = grammar_words();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            for w in sample_sentence(&mut rng) {
                assert!(words.contains(&w), "{w}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let held: HashSet<&String> = a.test.pairs.iter().chain(&a.dev.pairs).map(|p| &p.1).collect();
        for c in a.training() {
            assert!(c.pairs.iter().all(|p| !held.contains(&p.1)));
        }
        assert_eq!(a.stage2.len(), 150);
        assert_eq!(a.stage3.len(), 100);
    }

    #[test]
    fn every_pair_builds_an_example() {
        let c = generate(&small()).unwrap();
        let v = Vocab::new(grammar_words(), 8).unwrap();
        for corpus in c.training().iter().chain([&c.dev, &c.test]) {
            let (ex, stats) =
                build_examples(&corpus.pairs, &v, &OracleConfig::default(), false).unwrap();
            assert_eq!(ex.len(), corpus.len());
            assert!(stats.lossy_fraction() < 0.05);
        }
    }

    #[test]
    fn sweep_lengths_fall_in_buckets() {
        let rows = length_sweep(&[10, 40, 70], 3, 5);
        assert_eq!(rows.len(), 9);
        for (b, _, y) in rows {
            let n = y.split_whitespace().count();
            assert!(n >= b && n <= (b + 9).min(70), "{b}: {n}");
        }
    }
}
