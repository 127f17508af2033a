//! Run configuration: one TOML file covering every knob, plus flag
//! overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::OracleConfig;
use crate::corpus::Schedule;
use crate::error::{Error, Result};
use crate::neural::{AdamWConfig, LossOptions, ModelConfig};
use crate::refine::{DecoderMode, SundaeConfig};
use crate::search::BeamConfig;
use crate::toy::ToySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_per: f64,
    /// Ignored in vanilla mode, where it is 1.
    pub lambda0: f64,
    /// Refinement steps at inference. Ignored in vanilla mode, where it is 1.
    pub steps: usize,
    pub mode: DecoderMode,
    pub temperature: f64,
    pub batch_size: usize,
    /// Leave out examples whose target the oracle cannot reconstruct.
    pub drop_lossy: bool,
    /// Stop after this many optimizer steps in total (0 = no limit).
    pub max_steps: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_per: 5.0,
            lambda0: 0.25,
            steps: 2,
            mode: DecoderMode::Sundae,
            temperature: 1.0,
            batch_size: 32,
            drop_lossy: true,
            max_steps: 0,
            schedule: Schedule::default(),
        }
    }
}

impl TrainConfig {
    /// Decoder settings after mode coupling: vanilla forces one step and
    /// `lambda0 = 1`.
    pub fn sundae(&self) -> SundaeConfig {
        match self.mode {
            DecoderMode::Vanilla => SundaeConfig::vanilla(),
            DecoderMode::Sundae => SundaeConfig {
                lambda0: self.lambda0,
                steps: self.steps,
                mode: DecoderMode::Sundae,
            },
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda_per: self.lambda_per,
            sundae: self.sundae(),
            temperature: self.temperature,
            train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub confidence_bias: f64,
    pub length_norm: bool,
    /// Log-domain normalization steps applied to the pointer scores before
    /// the search (0 = off).
    pub sinkhorn_steps: usize,
    /// Hypotheses decoded and reported per sentence.
    pub topk: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: 4,
            confidence_bias: 0.2,
            length_norm: true,
            sinkhorn_steps: 0,
            topk: 1,
        }
    }
}

impl SearchConfig {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            width: self.beam_width,
            confidence_bias: self.confidence_bias,
            length_norm: self.length_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Weight of the permutation score when rescoring candidates.
    pub lambda_resc: f64,
    /// Candidates considered by rescoring and the GLEU oracle.
    pub k: usize,
    pub scorer: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambda_resc: 1.0,
            k: 3,
            scorer: crate::eval::SCORER.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Holds `stage1.tsv` .. `stage3.tsv`, `dev.tsv` and `test.tsv`.
    pub data_dir: PathBuf,
    /// Vocabulary, example records, checkpoint and reports go here.
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            work_dir: "work".into(),
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.work_dir.join("model.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads (0 = all cores).
    pub jobs: usize,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub toy: ToySpec,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            jobs: 0,
            oracle: OracleConfig::default(),
            model: ModelConfig::default(),
            optim: AdamWConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
            toy: ToySpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that does not depend on the data. The model's
    /// vocabulary size is only known after the vocabulary is built.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.oracle.s == 0 || self.oracle.max_len == 0 {
            return bad("oracle s and max_len must be at least 1".into());
        }
        let mut model = self.model;
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.train.sundae().validate()?;
        in_unit("lambda0", self.train.lambda0)?;
        if !(self.train.lambda_per >= 0.0 && self.train.lambda_per.is_finite()) {
            return bad("lambda_per must be non-negative".into());
        }
        if !(self.train.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.train.schedule.validate()?;
        let o = &self.optim;
        in_unit("beta1", o.beta1)?;
        in_unit("beta2", o.beta2)?;
        if !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.search.beam_width == 0 {
            return bad("beam_width must be at least 1".into());
        }
        in_unit("confidence_bias", self.search.confidence_bias)?;
        if self.search.topk == 0 || self.search.topk > self.search.beam_width {
            return bad(format!(
                "topk must lie in [1, beam_width = {}]",
                self.search.beam_width
            ));
        }
        in_unit("lambda_resc", self.eval.lambda_resc)?;
        if self.eval.k == 0 {
            return bad("eval k must be at least 1".into());
        }
        if self.eval.scorer != crate::eval::SCORER {
            return bad(format!("unknown scorer {:?}", self.eval.scorer));
        }
        in_unit("toy clean_fraction", self.toy.clean_fraction)?;
        Ok(())
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    /// Thread pool honouring `jobs`.
    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[search]\nbeam = 3").is_err());
        let c = RunConfig::parse("[search]\nbeam_width = 3").unwrap();
        assert_eq!(c.search.beam_width, 3);
        assert_eq!(c.train.lambda0, 0.25);
    }

    #[test]
    fn vanilla_forces_single_step() {
        let c = RunConfig::parse("[train]\nmode = \"vanilla\"\nlambda0 = 0.3\nsteps = 4").unwrap();
        c.validate().unwrap();
        assert_eq!(c.train.sundae(), SundaeConfig::vanilla());
        assert_eq!(c.train.loss_options().sundae.lambda0, 1.0);
    }

    #[test]
    fn invalid_values_fail_validation() {
        for text in [
            "[search]\nconfidence_bias = 1.5",
            "[search]\nbeam_width = 0",
            "[search]\ntopk = 5",
            "[train]\nbatch_size = 0",
            "[eval]\nscorer = \"m2\"",
            "[model]\nd_model = 30\nheads = 4",
        ] {
            let c = RunConfig::parse(text).unwrap();
            assert!(c.validate().unwrap_err().is_usage(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.search.confidence_bias = 0.3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
