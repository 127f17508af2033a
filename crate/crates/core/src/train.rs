//! Staged training: data preparation, the optimizer loop with warm-up, loss
//! curves and resumable checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{build_examples, make_stage_plan, BuildStats, ParallelCorpus, Stage, StageSettings};
use crate::error::{Error, Result};
use crate::neural::{AdamW, Checkpoint, LossReport, ModelParams};
use crate::pipeline::Corrector;
use crate::types::{TrainingExample, Vocab};

/// Examples of one training stage.
#[derive(Debug, Clone)]
pub struct PhaseData {
    pub stage: Stage,
    pub settings: StageSettings,
    pub examples: Vec<TrainingExample>,
    pub stats: BuildStats,
}

/// Vocabulary over every word of the training corpora.
pub fn build_vocab(corpora: &[ParallelCorpus], s: usize) -> Result<Vocab> {
    Vocab::from_texts(
        corpora
            .iter()
            .flat_map(|c| c.pairs.iter().flat_map(|(x, y)| [x.as_str(), y.as_str()])),
        s,
    )
}

/// Plans the stages and runs the oracle over each of them.
pub fn prepare_phases(corpora: &[ParallelCorpus], vocab: &Vocab, cfg: &RunConfig) -> Result<Vec<PhaseData>> {
    make_stage_plan(corpora, &cfg.train.schedule)?
        .into_iter()
        .map(|p| {
            let (examples, stats) = build_examples(&p.pairs, vocab, &cfg.oracle, cfg.train.drop_lossy)?;
            Ok(PhaseData {
                stage: p.stage,
                settings: p.settings,
                examples,
                stats,
            })
        })
        .collect()
}

/// Position of the next optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
    pub global_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub perm: f64,
    pub dec: f64,
}

impl StepRecord {
    pub const HEADER: &'static str = "stage\tepoch\tstep\tlr\tloss\tperm\tdec";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
            self.stage, self.epoch, self.step, self.lr, self.loss, self.perm, self.dec
        )
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Example order of one epoch; a function of the seed, phase and epoch only.
pub fn epoch_order(seed: u64, phase: usize, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, phase as u64 + 1), epoch as u64 + 1));
    order.shuffle(&mut rng);
    order
}

/// Linear warm-up to the stage rate, then constant.
pub fn learning_rate(settings: &StageSettings, phase_step: usize) -> f64 {
    if settings.warmup_steps == 0 || phase_step >= settings.warmup_steps {
        settings.lr
    } else {
        settings.lr * (phase_step + 1) as f64 / settings.warmup_steps as f64
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub opt: AdamW,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(cfg: RunConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mut model = cfg.model;
        model.vocab_size = vocab.len();
        if vocab.s_count() != cfg.oracle.s {
            return Err(Error::Config(format!(
                "vocabulary has {} <ins> tokens but the oracle uses s = {}",
                vocab.s_count(),
                cfg.oracle.s
            )));
        }
        let params = ModelParams::new(model, cfg.seed)?;
        let opt = AdamW::new(cfg.optim, &params);
        Ok(Trainer {
            cfg,
            vocab,
            params,
            opt,
            progress: Progress::default(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// configuration stored there is used as is.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let meta = TrainMeta::from_checkpoint(&ckpt)?;
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Trainer {
            cfg: meta.config,
            vocab: meta.vocab,
            params: ckpt.params,
            opt,
            progress: meta.progress,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = TrainMeta {
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            vocab: self.vocab.clone(),
            progress: self.progress,
        };
        Checkpoint {
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
            meta: meta.to_json(),
        }
    }

    fn step_seed(&self) -> u64 {
        mix(self.cfg.seed ^ 0x5eed, self.progress.global_step)
    }

    /// Loss of the next batch without updating anything.
    pub fn peek_loss(&self, phases: &[PhaseData]) -> Result<Option<LossReport>> {
        let Some((batch, _, _)) = self.next_batch(phases) else {
            return Ok(None);
        };
        let (report, _) = self
            .params
            .batch_loss(&batch, &self.cfg.train.loss_options(), self.step_seed())?;
        Ok(Some(report))
    }

    /// Examples, stage settings and learning rate of the next step, or None
    /// when training is finished. Normalizes `progress` past empty epochs.
    fn next_batch(&self, phases: &[PhaseData]) -> Option<(Vec<TrainingExample>, Stage, f64)> {
        let bs = self.cfg.train.batch_size;
        let mut p = self.progress;
        loop {
            let ph = phases.get(p.phase)?;
            let per_epoch = ph.examples.len().div_ceil(bs);
            if p.epoch >= ph.settings.epochs || per_epoch == 0 {
                p = Progress {
                    phase: p.phase + 1,
                    epoch: 0,
                    batch: 0,
                    ..p
                };
                continue;
            }
            if p.batch >= per_epoch {
                p.epoch += 1;
                p.batch = 0;
                continue;
            }
            let order = epoch_order(self.cfg.seed, p.phase, p.epoch, ph.examples.len());
            let batch = order[p.batch * bs..((p.batch + 1) * bs).min(order.len())]
                .iter()
                .map(|&i| ph.examples[i].clone())
                .collect();
            let lr = learning_rate(&ph.settings, p.epoch * per_epoch + p.batch);
            return Some((batch, ph.stage, lr));
        }
    }

    fn advance(&mut self, phases: &[PhaseData]) {
        let bs = self.cfg.train.batch_size;
        let p = &mut self.progress;
        p.global_step += 1;
        p.batch += 1;
        while let Some(ph) = phases.get(p.phase) {
            let per_epoch = ph.examples.len().div_ceil(bs);
            if p.batch < per_epoch && p.epoch < ph.settings.epochs {
                break;
            }
            if p.epoch + 1 < ph.settings.epochs && per_epoch > 0 {
                p.epoch += 1;
                p.batch = 0;
                break;
            }
            p.phase += 1;
            p.epoch = 0;
            p.batch = 0;
        }
    }

    /// One optimizer step; None once every phase is done.
    pub fn step(&mut self, phases: &[PhaseData]) -> Result<Option<StepRecord>> {
        let Some((batch, stage, lr)) = self.next_batch(phases) else {
            return Ok(None);
        };
        let seed = self.step_seed();
        let (report, grads) = self
            .params
            .batch_loss(&batch, &self.cfg.train.loss_options(), seed)?;
        self.opt.step(&mut self.params, &grads, lr)?;
        let rec = StepRecord {
            stage,
            epoch: self.progress.epoch,
            step: self.progress.global_step,
            lr,
            loss: report.total,
            perm: report.perm,
            dec: report.dec,
        };
        self.advance(phases);
        Ok(Some(rec))
    }

    /// Trains until every phase is done or `train.max_steps` is reached.
    /// `on_step` sees every record as it is produced.
    pub fn run<F: FnMut(&StepRecord)>(&mut self, phases: &[PhaseData], mut on_step: F) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        let max = self.cfg.train.max_steps as u64;
        while max == 0 || self.progress.global_step < max {
            match self.step(phases)? {
                Some(rec) => {
                    on_step(&rec);
                    out.push(rec);
                }
                None => break,
            }
        }
        Ok(out)
    }

    pub fn corrector(&self) -> Result<Corrector> {
        Corrector::new(
            self.params.clone(),
            self.vocab.clone(),
            self.cfg.search.clone(),
            self.cfg.train.sundae(),
        )
    }
}

/// Metadata stored alongside the weights.
#[derive(Debug, Clone)]
pub struct TrainMeta {
    pub config: RunConfig,
    pub config_hash: String,
    pub vocab: Vocab,
    pub progress: Progress,
}

impl TrainMeta {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "config_hash": self.config_hash,
            "vocab": self.vocab.tokens(),
            "progress": self.progress,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let m = &ckpt.meta;
        let config: RunConfig = serde_json::from_value(m["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let tokens = m["vocab"].as_array().ok_or_else(|| bad("missing vocabulary"))?;
        let mut text = String::new();
        for t in tokens {
            text.push_str(t.as_str().ok_or_else(|| bad("vocabulary entry is not a string"))?);
            text.push('\n');
        }
        let vocab = Vocab::parse(&text)?;
        let progress = serde_json::from_value(m["progress"].clone()).unwrap_or_default();
        let config_hash = m["config_hash"].as_str().unwrap_or_default().to_string();
        Ok(TrainMeta {
            config,
            config_hash,
            vocab,
            progress,
        })
    }
}

/// Builds a corrector from a checkpoint. Search and decoder settings come
/// from `cfg`, the weights and vocabulary from the checkpoint.
pub fn load_corrector(ckpt: Checkpoint, cfg: &RunConfig) -> Result<Corrector> {
    let meta = TrainMeta::from_checkpoint(&ckpt)?;
    Corrector::new(ckpt.params, meta.vocab, cfg.search.clone(), cfg.train.sundae())
}
