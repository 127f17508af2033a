//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 for runtime failures and 2 for usage or configuration errors.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::corpus::{build_examples, format_record, load_tsv, ParallelCorpus, Stage};
use crate::error::{Error, Result};
use crate::eval::{bench_forward_counts, corpus_f_beta, GleuStats, ScoreReport, Selection};
use crate::neural::{Checkpoint, ModelParams};
use crate::pipeline::{Correction, Corrector};
use crate::refine::DecoderMode;
use crate::toy;
use crate::train::{build_vocab, load_corrector, prepare_phases, StepRecord, Trainer};
use crate::types::Vocab;

#[derive(Debug, Parser)]
#[command(name = "permfill", version, about = "Non-autoregressive grammatical error correction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the configuration file.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restrict the command to one training stage (I, II or III).
    #[arg(long, global = true, value_parser = parse_stage)]
    pub stage: Option<Stage>,
    #[arg(long, global = true)]
    pub beam_width: Option<usize>,
    #[arg(long, global = true)]
    pub confidence_bias: Option<f64>,
    #[arg(long, global = true)]
    pub lambda0: Option<f64>,
    /// Decoder refinement steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<DecoderMode>,
    #[arg(long, global = true)]
    pub sinkhorn_steps: Option<usize>,
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub scorer: Option<String>,
    #[arg(long, global = true)]
    pub no_length_norm: bool,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the command's result as JSON to this file.
    #[arg(long, global = true)]
    pub export_json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the toy corpora into the data directory.
    GenToy,
    /// Build the vocabulary and oracle examples for every stage file.
    BuildData,
    /// Run the staged training schedule and save a checkpoint.
    Train {
        /// Continue from the checkpoint instead of starting afresh.
        #[arg(long)]
        resume: bool,
    },
    /// Correct one sentence per line.
    Correct {
        /// Input file; standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score corrections of a `source<TAB>reference` file.
    Evaluate {
        /// Defaults to `<data_dir>/test.tsv`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Score these hypotheses (one per line) instead of running the model.
        #[arg(long)]
        hyp: Option<PathBuf>,
        /// Rescore the top k candidates with this permutation weight.
        #[arg(long)]
        lambda_resc: Option<f64>,
        /// Pick the best of the top k candidates by sentence GLEU.
        #[arg(long)]
        gleu_oracle: bool,
    },
    /// Train one model per lambda0 and score every refinement step count.
    Ablate {
        /// Defaults to `<data_dir>/dev.tsv`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.25,0.75")]
        grid_lambda0: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        grid_steps: Vec<usize>,
    },
    /// Count model passes per sentence on length buckets.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70")]
        buckets: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        per_bucket: usize,
        /// Use freshly initialized weights instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<DecoderMode, String> {
    match s {
        "vanilla" => Ok(DecoderMode::Vanilla),
        "sundae" => Ok(DecoderMode::Sundae),
        _ => Err(format!("unknown mode {s:?}, expected vanilla or sundae")),
    }
}

impl Common {
    /// Configuration file (or defaults) with the flags applied, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::File { .. } => Error::Config(e.to_string()),
                e => e,
            })?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.beam_width {
            cfg.search.beam_width = v;
        }
        if let Some(v) = self.confidence_bias {
            cfg.search.confidence_bias = v;
        }
        if let Some(v) = self.lambda0 {
            cfg.train.lambda0 = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.mode {
            cfg.train.mode = v;
        }
        if let Some(v) = self.sinkhorn_steps {
            cfg.search.sinkhorn_steps = v;
        }
        if let Some(v) = self.topk {
            cfg.search.topk = v;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = &self.scorer {
            cfg.eval.scorer = v.clone();
        }
        if self.no_length_norm {
            cfg.search.length_norm = false;
        }
        if let Some(v) = &self.data_dir {
            cfg.paths.data_dir = v.clone();
        }
        if let Some(v) = &self.work_dir {
            cfg.paths.work_dir = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            cfg.paths.checkpoint = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut out = io::stdout();
    match execute(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

/// Runs a parsed command, writing its primary output to `out`.
pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let pool = cfg.thread_pool()?;
    pool.install(|| match &cli.command {
        Command::GenToy => gen_toy(&cfg, out),
        Command::BuildData => build_data(&cfg, cli.common.stage, out),
        Command::Train { resume } => train(&cfg, cli, *resume, out),
        Command::Correct { input } => correct(&cfg, input.as_deref(), out),
        Command::Evaluate {
            input,
            hyp,
            lambda_resc,
            gleu_oracle,
        } => evaluate(&cfg, cli, input.as_deref(), hyp.as_deref(), *lambda_resc, *gleu_oracle, out),
        Command::Ablate {
            input,
            grid_lambda0,
            grid_steps,
        } => ablate(&cfg, cli, input.as_deref(), grid_lambda0, grid_steps, out),
        Command::Bench {
            buckets,
            per_bucket,
            random_init,
        } => bench(&cfg, cli, buckets, *per_bucket, *random_init, out),
    })
}

fn write_line(out: &mut (dyn Write + Send), line: &str) -> Result<()> {
    writeln!(out, "{line}")?;
    Ok(())
}

fn export(cli: &Cli, value: &serde_json::Value) -> Result<()> {
    if let Some(p) = &cli.common.export_json {
        let text = serde_json::to_string_pretty(value).expect("json serializes");
        fs::write(p, text).map_err(|e| Error::file(p, e))?;
    }
    Ok(())
}

fn stage_file(data_dir: &Path, stage: Stage) -> PathBuf {
    let k = match stage {
        Stage::I => 1,
        Stage::II => 2,
        Stage::III => 3,
    };
    data_dir.join(format!("stage{k}.tsv"))
}

/// Stage corpora present in the data directory, optionally just one stage.
pub fn load_stage_corpora(cfg: &RunConfig, only: Option<Stage>) -> Result<Vec<ParallelCorpus>> {
    let mut out = Vec::new();
    for stage in Stage::ALL {
        if only.is_some_and(|o| o != stage) {
            continue;
        }
        let p = stage_file(&cfg.paths.data_dir, stage);
        if p.exists() {
            let (c, report) = load_tsv(&p, stage)?;
            if !report.malformed.is_empty() || report.too_long > 0 {
                eprintln!(
                    "{}: {} malformed and {} over-long lines skipped",
                    p.display(),
                    report.malformed.len(),
                    report.too_long
                );
            }
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no stage files (stage1.tsv .. stage3.tsv) in {}",
            cfg.paths.data_dir.display()
        )));
    }
    Ok(out)
}

fn load_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    Ok(load_tsv(path, Stage::III)?.0.pairs)
}

fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.work_dir.join("vocab.txt")
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

fn gen_toy(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<()> {
    let corpora = toy::generate(&cfg.toy)?;
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let files = [
        (stage_file(dir, Stage::I), &corpora.stage1),
        (stage_file(dir, Stage::II), &corpora.stage2),
        (stage_file(dir, Stage::III), &corpora.stage3),
        (dir.join("dev.tsv"), &corpora.dev),
        (dir.join("test.tsv"), &corpora.test),
    ];
    for (path, c) in files {
        c.save_tsv(&path)?;
        write_line(out, &format!("{}\t{}", path.display(), c.len()))?;
    }
    Ok(())
}

fn build_data(cfg: &RunConfig, only: Option<Stage>, out: &mut (dyn Write + Send)) -> Result<()> {
    let corpora = load_stage_corpora(cfg, only)?;
    let vocab = build_vocab(&corpora, cfg.oracle.s)?;
    let work = &cfg.paths.work_dir;
    create_dir(work)?;
    vocab.save(vocab_path(cfg))?;
    let hash = cfg.hash();
    for c in &corpora {
        let (examples, stats) = build_examples(&c.pairs, &vocab, &cfg.oracle, cfg.train.drop_lossy)?;
        let path = work.join(format!("examples-stage{}.tsv", c.stage));
        let mut text = String::new();
        for ex in &examples {
            text.push_str(&format_record(ex));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
        let rec = json!({
            "stage": c.stage.to_string(),
            "pairs": stats.pairs,
            "kept": stats.kept,
            "dropped": stats.dropped,
            "lossy": stats.lossy,
            "lossy_fraction": stats.lossy_fraction(),
            "vocab": vocab.len(),
            "config_hash": hash,
        });
        write_line(out, &rec.to_string())?;
    }
    Ok(())
}

fn training_vocab(cfg: &RunConfig, corpora: &[ParallelCorpus]) -> Result<Vocab> {
    let p = vocab_path(cfg);
    if p.exists() {
        Vocab::load(p)
    } else {
        build_vocab(corpora, cfg.oracle.s)
    }
}

/// Trains a model on the data directory's stage files and returns the
/// trainer together with the loss curve.
pub fn train_model(cfg: &RunConfig, only: Option<Stage>, resume: Option<Checkpoint>, log: bool) -> Result<(Trainer, Vec<StepRecord>)> {
    let corpora = load_stage_corpora(cfg, None)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            // the stored configuration wins, except for the step limit
            let mut t = Trainer::resume(ckpt)?;
            t.cfg.train.max_steps = cfg.train.max_steps;
            t
        }
        None => Trainer::new(cfg.clone(), training_vocab(cfg, &corpora)?)?,
    };
    let mut phases = prepare_phases(&corpora, &trainer.vocab, &trainer.cfg)?;
    if let Some(st) = only {
        phases.retain(|p| p.stage == st);
    }
    let mut window = (0.0, 0usize);
    let curve = trainer.run(&phases, |r| {
        window.0 += r.loss;
        window.1 += 1;
        if log && r.step % 100 == 0 {
            eprintln!("stage {} epoch {} step {} loss {:.4}", r.stage, r.epoch, r.step, window.0 / window.1 as f64);
            window = (0.0, 0);
        }
    })?;
    Ok((trainer, curve))
}

fn train(cfg: &RunConfig, cli: &Cli, resume: bool, out: &mut (dyn Write + Send)) -> Result<()> {
    let ckpt_path = cfg.paths.checkpoint();
    let ckpt = if resume {
        if cli.common.stage.is_some() {
            return Err(Error::Config("--stage cannot be combined with --resume".into()));
        }
        Some(Checkpoint::load(&ckpt_path)?)
    } else {
        None
    };
    let (trainer, curve) = train_model(cfg, cli.common.stage, ckpt, true)?;
    create_dir(&cfg.paths.work_dir)?;
    let curve_path = cfg.paths.work_dir.join("loss.tsv");
    let mut text = format!("{}\n", StepRecord::HEADER);
    for r in &curve {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    fs::write(&curve_path, text).map_err(|e| Error::file(&curve_path, e))?;
    let ckpt = trainer.checkpoint();
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ckpt.save(&ckpt_path)?;
    export(cli, &ckpt.to_json())?;
    for stage in Stage::ALL {
        let losses: Vec<f64> = curve.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect();
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            let rec = json!({
                "stage": stage.to_string(),
                "steps": losses.len(),
                "first_loss": first,
                "last_loss": last,
                "config_hash": trainer.cfg.hash(),
            });
            write_line(out, &rec.to_string())?;
        }
    }
    Ok(())
}

fn corrector(cfg: &RunConfig) -> Result<Corrector> {
    let path = cfg.paths.checkpoint();
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    load_corrector(Checkpoint::load(&path)?, cfg)
}

fn correct(cfg: &RunConfig, input: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<()> {
    let lines: Vec<String> = match input {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::file(p, e))?
            .lines()
            .map(String::from)
            .collect(),
        None => io::stdin().lock().lines().collect::<io::Result<_>>()?,
    };
    let c = corrector(cfg)?;
    let results = c.correct_all(&lines);
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        if cfg.search.topk == 1 {
            write_line(out, &r.best().text())?;
        } else {
            for (rank, h) in r.hypotheses.iter().enumerate() {
                write_line(out, &format!("{i}\t{}\t{:.6}\t{}", rank + 1, h.perm_score, h.text()))?;
            }
        }
    }
    Ok(())
}

/// Summary of hypotheses against references.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub sentences: usize,
    pub exact: usize,
    pub changed: usize,
    pub score: ScoreReport,
    pub gleu: f64,
}

impl EvalSummary {
    /// Each item is `(source, hypothesis, reference)`.
    pub fn new(items: &[(String, String, String)]) -> Self {
        let mut gleu = GleuStats::default();
        let mut exact = 0;
        let mut changed = 0;
        for (x, h, y) in items {
            let xs: Vec<&str> = x.split_whitespace().collect();
            let hs: Vec<&str> = h.split_whitespace().collect();
            let ys: Vec<&str> = y.split_whitespace().collect();
            exact += usize::from(hs == ys);
            changed += usize::from(hs != xs);
            gleu.add(&GleuStats::new(&hs, &xs, &ys));
        }
        EvalSummary {
            sentences: items.len(),
            exact,
            changed,
            score: corpus_f_beta(items),
            gleu: gleu.score(),
        }
    }

    pub fn exact_match(&self) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            self.exact as f64 / self.sentences as f64
        }
    }

    pub fn to_json(&self, hash: &str) -> serde_json::Value {
        json!({
            "scorer": crate::eval::SCORER,
            "sentences": self.sentences,
            "exact": self.exact,
            "exact_match": self.exact_match(),
            "changed": self.changed,
            "tp": self.score.tp,
            "fp": self.score.fp,
            "fn": self.score.fn_,
            "precision": self.score.precision,
            "recall": self.score.recall,
            "f0.5": self.score.f_beta,
            "gleu": self.gleu,
            "config_hash": hash,
        })
    }
}

/// Runs `c` over the sources of `pairs` and picks one hypothesis each.
pub fn hypotheses(c: &Corrector, pairs: &[(String, String)], k: usize, pick: &dyn Fn(&Correction, &str) -> String) -> Result<Vec<(String, String, String)>> {
    let mut c = c.clone();
    c.search.topk = k.min(c.search.beam_width).max(1);
    let sources: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    c.correct_all(&sources)
        .into_iter()
        .zip(pairs)
        .map(|(r, (x, y))| Ok((x.clone(), pick(&r?, y), y.clone())))
        .collect()
}

fn evaluate(
    cfg: &RunConfig,
    cli: &Cli,
    input: Option<&Path>,
    hyp: Option<&Path>,
    lambda_resc: Option<f64>,
    gleu_oracle: bool,
    out: &mut (dyn Write + Send),
) -> Result<()> {
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_dir.join("test.tsv"));
    let pairs = load_pairs(&input)?;
    let items: Vec<(String, String, String)> = match hyp {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            let lines: Vec<&str> = text.lines().collect();
            if lines.len() != pairs.len() {
                return Err(Error::Config(format!(
                    "{} hypotheses for {} sentences",
                    lines.len(),
                    pairs.len()
                )));
            }
            pairs
                .iter()
                .zip(lines)
                .map(|((x, y), h)| (x.clone(), h.to_string(), y.clone()))
                .collect()
        }
        None => {
            let c = corrector(cfg)?;
            let lambda = lambda_resc.unwrap_or(cfg.eval.lambda_resc);
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config("lambda_resc must lie in [0, 1]".into()));
            }
            let k = if gleu_oracle || lambda < 1.0 { cfg.eval.k } else { 1 };
            hypotheses(&c, &pairs, k, &|r, y| {
                if gleu_oracle {
                    let src = r.source.clone();
                    let refs = vec![y.split_whitespace().map(String::from).collect()];
                    r.select(k, &Selection::GleuOracle { src: &src, refs: &refs }).text()
                } else {
                    r.select(k, &Selection::Rescore { lambda }).text()
                }
            })?
        }
    };
    let rec = EvalSummary::new(&items).to_json(&cfg.hash());
    write_line(out, &rec.to_string())?;
    export(cli, &rec)
}

fn ablate(
    cfg: &RunConfig,
    cli: &Cli,
    input: Option<&Path>,
    grid_lambda0: &[f64],
    grid_steps: &[usize],
    out: &mut (dyn Write + Send),
) -> Result<()> {
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_dir.join("dev.tsv"));
    let pairs = load_pairs(&input)?;
    let mut rows = Vec::new();
    for &lambda0 in grid_lambda0 {
        let mut run_cfg = cfg.clone();
        run_cfg.train.mode = DecoderMode::Sundae;
        run_cfg.train.lambda0 = lambda0;
        run_cfg.validate()?;
        let (trainer, _) = train_model(&run_cfg, cli.common.stage, None, false)?;
        for &steps in grid_steps {
            let mut c = trainer.corrector()?;
            c.decoder.steps = steps;
            c.decoder.validate()?;
            let items = hypotheses(&c, &pairs, 1, &|r, _| r.best().text())?;
            let s = EvalSummary::new(&items);
            let mut row_cfg = run_cfg.clone();
            row_cfg.train.steps = steps;
            let rec = json!({
                "lambda0": lambda0,
                "steps": steps,
                "sinkhorn_steps": cfg.search.sinkhorn_steps,
                "f0.5": s.score.f_beta,
                "precision": s.score.precision,
                "recall": s.score.recall,
                "exact_match": s.exact_match(),
                "gleu": s.gleu,
                "scorer": crate::eval::SCORER,
                "config_hash": row_cfg.hash(),
            });
            write_line(out, &rec.to_string())?;
            rows.push(rec);
        }
    }
    export(cli, &serde_json::Value::Array(rows))
}

fn bench(cfg: &RunConfig, cli: &Cli, buckets: &[usize], per_bucket: usize, random_init: bool, out: &mut (dyn Write + Send)) -> Result<()> {
    let c = if random_init {
        let corpora = toy::generate(&cfg.toy)?;
        let vocab = build_vocab(&corpora.training(), cfg.oracle.s)?;
        let mut model = cfg.model;
        model.vocab_size = vocab.len();
        Corrector::new(ModelParams::new(model, cfg.seed)?, vocab, cfg.search.clone(), cfg.train.sundae())?
    } else {
        corrector(cfg)?
    };
    let sweep = toy::length_sweep(buckets, per_bucket, cfg.seed);
    let rows = bench_corrector(&c, &sweep)?;
    let hash = cfg.hash();
    let mut all = Vec::new();
    for b in rows {
        let mut rec = serde_json::to_value(&b).expect("json serializes");
        rec["config_hash"] = json!(hash);
        write_line(out, &rec.to_string())?;
        all.push(rec);
    }
    export(cli, &serde_json::Value::Array(all))
}

/// Per-bucket pass counts of `c` on `(bucket, source, reference)` rows. The
/// autoregressive comparator needs one pass per output token of the
/// reference.
pub fn bench_corrector(c: &Corrector, sweep: &[(usize, String, String)]) -> Result<Vec<crate::eval::BenchBucket>> {
    let mut c = c.clone();
    c.search.topk = 1;
    let sources: Vec<&str> = sweep.iter().map(|r| r.1.as_str()).collect();
    let mut rows = Vec::with_capacity(sweep.len());
    for (r, (b, _, y)) in c.correct_all(&sources).into_iter().zip(sweep) {
        rows.push((*b, r?.counts, y.split_whitespace().count()));
    }
    Ok(bench_forward_counts(&rows))
}
