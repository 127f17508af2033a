//! Parallel corpora, synthetic error injection, the staged training plan
//! and the line format for prepared examples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{build_with, OracleConfig};
use crate::error::{Error, Result};
use crate::types::{Permutation, SourceSentence, TokenId, TrainingExample, Vocab};

/// Longest sentence (either side, in whitespace tokens) kept at load time.
pub const MAX_SENTENCE_TOKENS: usize = 70;

/// Share of malformed lines above which a file is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Large synthetic corpus.
    I,
    /// Mixed synthetic and in-domain data.
    II,
    /// Small clean in-domain data.
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn parse(s: &str) -> Result<Stage> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    /// (errorful, corrected) pairs.
    pub pairs: Vec<(String, String)>,
    pub stage: Stage,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(String, String)>, stage: Stage) -> Result<Self> {
        if let Some(i) = pairs
            .iter()
            .position(|(a, b)| a.trim().is_empty() || b.trim().is_empty())
        {
            return Err(Error::Config(format!("pair {i} has an empty side")));
        }
        Ok(ParallelCorpus { pairs, stage })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (x, y) in &self.pairs {
            out.push_str(x);
            out.push('\t');
            out.push_str(y);
            out.push('\n');
        }
        out
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::file(path, e))
    }
}

/// Lines that did not make it into a loaded corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    /// 1-based line number and reason.
    pub malformed: Vec<(usize, String)>,
    /// Pairs dropped for exceeding [`MAX_SENTENCE_TOKENS`].
    pub too_long: usize,
}

/// Parses `source<TAB>target` lines. CRLF endings are accepted and blank
/// lines are ignored.
pub fn parse_tsv(text: &str, stage: Stage, origin: &Path) -> Result<(ParallelCorpus, LoadReport)> {
    let mut report = LoadReport::default();
    let mut pairs = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let reason = match fields.as_slice() {
            [x, y] if x.trim().is_empty() || y.trim().is_empty() => Some("empty side"),
            [_, _] => None,
            [_] => Some("no tab separator"),
            _ => Some("more than one tab"),
        };
        if let Some(r) = reason {
            report.malformed.push((i + 1, r.to_string()));
            continue;
        }
        let (x, y) = (fields[0].trim(), fields[1].trim());
        if x.split_whitespace().count() > MAX_SENTENCE_TOKENS
            || y.split_whitespace().count() > MAX_SENTENCE_TOKENS
        {
            report.too_long += 1;
            continue;
        }
        pairs.push((x.to_string(), y.to_string()));
    }
    if report.lines > 0
        && report.malformed.len() as f64 > MAX_MALFORMED_FRACTION * report.lines as f64
    {
        return Err(Error::CorpusRejected {
            path: origin.to_path_buf(),
            malformed: report.malformed.len(),
            total: report.lines,
        });
    }
    Ok((ParallelCorpus { pairs, stage }, report))
}

pub fn load_tsv(path: impl AsRef<Path>, stage: Stage) -> Result<(ParallelCorpus, LoadReport)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| {
        Error::file(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "not valid UTF-8"),
        )
    })?;
    parse_tsv(&text, stage, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_swap: f64,
    pub p_dup: f64,
    pub p_replace: f64,
    /// Replacement candidates per token; tokens without an entry are never
    /// replaced.
    pub confusion_sets: BTreeMap<String, Vec<String>>,
    /// Tokens eligible for dropping; empty means every token is.
    pub droppable: BTreeSet<String>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_drop: 0.05,
            p_swap: 0.03,
            p_dup: 0.02,
            p_replace: 0.15,
            confusion_sets: BTreeMap::new(),
            droppable: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn silent() -> Self {
        NoiseConfig {
            p_drop: 0.0,
            p_swap: 0.0,
            p_dup: 0.0,
            p_replace: 0.0,
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_drop, self.p_swap, self.p_dup, self.p_replace];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("noise probabilities must lie in [0, 1]".into()));
        }
        if ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config("noise probabilities sum above 1".into()));
        }
        Ok(())
    }
}

/// Corruption events applied to one sentence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoiseTrace {
    pub tokens: usize,
    pub drops: usize,
    pub swaps: usize,
    pub dups: usize,
    pub replaces: usize,
}

impl NoiseTrace {
    pub fn corrupted(&self) -> usize {
        self.drops + self.swaps + self.dups + self.replaces
    }
}

/// Walks the sentence once; every token independently draws at most one of
/// drop, swap with its right neighbour, duplicate, or confusion-set
/// replacement. Events that do not apply to a token (no right neighbour,
/// not droppable, no confusion set) leave it unchanged.
pub fn inject_errors_traced<R: Rng>(
    clean: &[String],
    cfg: &NoiseConfig,
    rng: &mut R,
) -> (Vec<String>, NoiseTrace) {
    let mut out = Vec::with_capacity(clean.len() + 2);
    let mut trace = NoiseTrace {
        tokens: clean.len(),
        ..NoiseTrace::default()
    };
    let t_drop = cfg.p_drop;
    let t_swap = t_drop + cfg.p_swap;
    let t_dup = t_swap + cfg.p_dup;
    let t_rep = t_dup + cfg.p_replace;
    let mut i = 0;
    while i < clean.len() {
        let tok = &clean[i];
        let u: f64 = rng.gen();
        if u < t_drop {
            if cfg.droppable.is_empty() || cfg.droppable.contains(tok) {
                trace.drops += 1;
                i += 1;
                continue;
            }
        } else if u < t_swap {
            if i + 1 < clean.len() {
                trace.swaps += 1;
                out.push(clean[i + 1].clone());
                out.push(tok.clone());
                i += 2;
                continue;
            }
        } else if u < t_dup {
            trace.dups += 1;
            out.push(tok.clone());
        } else if u < t_rep {
            if let Some(cands) = cfg.confusion_sets.get(tok) {
                let others: Vec<&String> = cands.iter().filter(|c| *c != tok).collect();
                if !others.is_empty() {
                    trace.replaces += 1;
                    out.push(others[rng.gen_range(0..others.len())].clone());
                    i += 1;
                    continue;
                }
            }
        }
        out.push(tok.clone());
        i += 1;
    }
    (out, trace)
}

pub fn inject_errors_with<R: Rng>(clean: &[String], cfg: &NoiseConfig, rng: &mut R) -> Vec<String> {
    inject_errors_traced(clean, cfg, rng).0
}

/// Corrupts one sentence with a generator seeded from `cfg.seed`.
pub fn inject_errors(clean: &[String], cfg: &NoiseConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    inject_errors_with(clean, cfg, &mut rng)
}

/// Epoch count and learning-rate shape for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Linear warm-up steps at the start of the stage, then constant.
    pub warmup_steps: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            epochs: 1,
            lr: 1e-3,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub stage3: StageSettings,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage1: StageSettings {
                epochs: 6,
                lr: 2e-3,
                warmup_steps: 100,
            },
            stage2: StageSettings {
                epochs: 5,
                lr: 1e-3,
                warmup_steps: 0,
            },
            stage3: StageSettings {
                epochs: 5,
                lr: 5e-4,
                warmup_steps: 0,
            },
        }
    }
}

impl Schedule {
    pub fn settings(&self, stage: Stage) -> StageSettings {
        match stage {
            Stage::I => self.stage1,
            Stage::II => self.stage2,
            Stage::III => self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for st in Stage::ALL {
            let s = self.settings(st);
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("stage {st} learning rate must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub stage: Stage,
    pub pairs: Vec<(String, String)>,
    pub settings: StageSettings,
}

/// Ordered training phases: stage I (when present), II, then III (when
/// present). Corpora sharing a stage are concatenated in the given order.
pub fn make_stage_plan(corpora: &[ParallelCorpus], schedule: &Schedule) -> Result<Vec<Phase>> {
    schedule.validate()?;
    let mut by_stage: BTreeMap<Stage, Vec<(String, String)>> = BTreeMap::new();
    for c in corpora {
        by_stage
            .entry(c.stage)
            .or_default()
            .extend(c.pairs.iter().cloned());
    }
    if by_stage.get(&Stage::II).map_or(true, |p| p.is_empty()) {
        return Err(Error::Plan("stage II data is required".into()));
    }
    Ok(by_stage
        .into_iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(stage, pairs)| Phase {
            stage,
            pairs,
            settings: schedule.settings(stage),
        })
        .collect())
}

/// Outcome counts of turning pairs into examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub pairs: usize,
    pub kept: usize,
    pub dropped: usize,
    pub lossy: usize,
}

impl BuildStats {
    pub fn lossy_fraction(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.lossy as f64 / self.pairs as f64
        }
    }
}

/// Runs the oracle over every pair. Lossy examples are counted and, when
/// `drop_lossy` is set, left out.
pub fn build_examples(
    pairs: &[(String, String)],
    vocab: &Vocab,
    oracle: &OracleConfig,
    drop_lossy: bool,
) -> Result<(Vec<TrainingExample>, BuildStats)> {
    if vocab.s_count() != oracle.s {
        return Err(Error::Config(format!(
            "vocabulary has {} <ins> tokens but the oracle uses s = {}",
            vocab.s_count(),
            oracle.s
        )));
    }
    let built: Vec<Result<TrainingExample>> = pairs
        .par_iter()
        .map(|(x, y)| build_with(&vocab.wrap(x), &vocab.wrap(y), oracle))
        .collect();
    let mut stats = BuildStats {
        pairs: pairs.len(),
        ..BuildStats::default()
    };
    let mut out = Vec::with_capacity(pairs.len());
    for ex in built {
        let ex = ex?;
        if ex.lossy {
            stats.lossy += 1;
            if drop_lossy {
                stats.dropped += 1;
                continue;
            }
        }
        out.push(ex);
    }
    stats.kept = out.len();
    Ok((out, stats))
}

fn join_ids<T: fmt::Display>(ids: &[T]) -> String {
    ids.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// `source ids \t pi \t decoder input \t decoder output \t lossy(0|1)`.
pub fn format_record(ex: &TrainingExample) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        join_ids(ex.source.ids()),
        join_ids(ex.pi.as_slice()),
        join_ids(&ex.dec_input),
        join_ids(&ex.dec_output),
        u8::from(ex.lossy)
    )
}

fn parse_ids<T: std::str::FromStr>(field: &str) -> Result<Vec<T>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad id {t:?} in example record")))
        })
        .collect()
}

/// Inverse of [`format_record`]; `s` is the `<ins>` block length.
pub fn parse_record(line: &str, s: usize) -> Result<TrainingExample> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::Config(format!(
            "example record has {} fields, expected 5",
            fields.len()
        )));
    }
    let ids: Vec<TokenId> = parse_ids(fields[0])?;
    if ids.len() < s + 2 {
        return Err(Error::Config("example record source too short".into()));
    }
    let source = SourceSentence::from_core(&ids[..ids.len() - s], s)?;
    if source.ids() != ids.as_slice() {
        return Err(Error::Config("example record <ins> block mismatch".into()));
    }
    let pi = Permutation::new(parse_ids(fields[1])?, source.n(), s)?;
    let ex = TrainingExample {
        source,
        pi,
        dec_input: parse_ids(fields[2])?,
        dec_output: parse_ids(fields[3])?,
        lossy: match fields[4] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Config(format!("bad lossy flag {other:?}"))),
        },
    };
    ex.check()?;
    Ok(ex)
}
