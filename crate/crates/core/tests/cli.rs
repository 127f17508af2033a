use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use permfill::neural::Checkpoint;

const TINY: &str = r#"
seed = 5
[model]
d_model = 8
enc_layers = 1
dec_layers = 1
[train]
batch_size = 16
[train.schedule.stage1]
epochs = 1
lr = 3e-3
warmup_steps = 2
[train.schedule.stage2]
epochs = 1
lr = 3e-3
warmup_steps = 0
[train.schedule.stage3]
epochs = 2
lr = 3e-3
warmup_steps = 0
[toy]
synthetic = 160
domain = 40
stage2_synthetic = 40
dev = 12
test = 12
"#;

fn permfill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permfill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(permfill(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(permfill(dir.path(), &["correct", "--beam-width", "x"]).status.code(), Some(2));
    assert_eq!(permfill(dir.path(), &["correct", "--mode", "greedy"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "[search]\nwidth = 3\n").unwrap();
    assert_eq!(permfill(dir.path(), &["--config", "bad.toml", "gen-toy"]).status.code(), Some(2));
    assert_eq!(permfill(dir.path(), &["--confidence-bias", "1.5", "gen-toy"]).status.code(), Some(2));
    // empty data directory
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = permfill(dir.path(), &["build-data", "--data-dir", "empty"]);
    assert_eq!(o.status.code(), Some(2));
    // no checkpoint to correct with
    let o = permfill(dir.path(), &["correct", "--input", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("model.ckpt"), b"not a checkpoint").unwrap();
    fs::write(dir.path().join("in.txt"), "i be busy\n").unwrap();
    let o = permfill(dir.path(), &["correct", "--checkpoint", "model.ckpt", "--input", "in.txt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn build_data_writes_substitution_record() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("data")).unwrap();
    fs::write(dir.path().join("data/stage2.tsv"), "i be busy\ti am busy\n").unwrap();
    let out = stdout(&permfill(dir.path(), &["build-data"]));
    let recs = json_lines(&out);
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["kept"], 1);
    assert_eq!(recs[0]["lossy"], 0);
    let text = fs::read_to_string(dir.path().join("work/examples-stageII.tsv")).unwrap();
    let fields: Vec<&str> = text.trim_end().split('\t').collect();
    assert_eq!(fields[1], "0 1 5 3 4");
    let vocab = fs::read_to_string(dir.path().join("work/vocab.txt")).unwrap();
    let id = |w: &str| vocab.lines().position(|l| l == w).unwrap();
    let (i, am, busy) = (id("i"), id("am"), id("busy"));
    assert_eq!(fields[2], format!("2 {i} 4 4 4 {busy} 3"));
    assert_eq!(fields[3], format!("2 {i} {am} 0 0 {busy} 3"));
    assert_eq!(fields[4], "0");
}

#[test]
fn build_data_counts_lossy_pairs() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("data")).unwrap();
    // with one <ins> slot, every pair needing two insertion sites is lossy
    let pairs = [
        ("a b c", "a b c"),     // copy
        ("a b c", "x a y b c"), // two sites: lossy
        ("a b c", "a b x c"),   // one site
        ("a c", "x a y c z"),   // three sites: lossy
        ("a b", "b a"),         // reorder only
    ];
    let text: String = pairs.iter().map(|(x, y)| format!("{x}\t{y}\n")).collect();
    fs::write(dir.path().join("data/stage1.tsv"), text).unwrap();
    fs::write(dir.path().join("s1.toml"), "[oracle]\ns = 1\n").unwrap();
    let out = stdout(&permfill(dir.path(), &["--config", "s1.toml", "build-data"]));
    let r = &json_lines(&out)[0];
    assert_eq!(r["pairs"], 5);
    assert_eq!(r["lossy"], 2);
    assert_eq!(r["dropped"], 2);
    assert_eq!(r["kept"], 3);
    assert!((r["lossy_fraction"].as_f64().unwrap() - 0.4).abs() < 1e-12);
}

fn loss_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn toy_pipeline_end_to_end() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    let files = stdout(&permfill(d, &["--config", c, "gen-toy"]));
    assert_eq!(files.lines().count(), 5);
    stdout(&permfill(d, &["--config", c, "build-data"]));

    let out = stdout(&permfill(d, &["--config", c, "train", "--export-json", "dump.json"]));
    let stages = json_lines(&out);
    assert_eq!(stages.len(), 3);
    let first = stages[0]["first_loss"].as_f64().unwrap();
    let last = stages[2]["last_loss"].as_f64().unwrap();
    assert!(last < first, "stage III loss {last} not below stage I start {first}");
    assert!(d.join("work/model.ckpt").exists());
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("dump.json")).unwrap()).unwrap();
    assert!(dump["tensors"].is_object() || dump["tensors"].is_array());
    let hash = stages[0]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);

    // full confidence: nothing changes
    fs::write(d.join("in.txt"), "i be busy\nhe go to the school yesterday\n").unwrap();
    let out = stdout(&permfill(d, &["--config", c, "--confidence-bias", "1", "correct", "--input", "in.txt"]));
    assert_eq!(out, "i be busy\nhe go to the school yesterday\n");

    let out = stdout(&permfill(d, &["--config", c, "--topk", "3", "correct", "--input", "in.txt"]));
    for i in 0..2 {
        let rows: Vec<&str> = out.lines().filter(|l| l.starts_with(&format!("{i}\t"))).collect();
        assert_eq!(rows.len(), 3, "{out}");
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.split('\t').nth(1).unwrap(), (r + 1).to_string());
        }
    }

    // identity hypotheses: recall 0
    let test = fs::read_to_string(d.join("data/test.tsv")).unwrap();
    let ident: String = test.lines().map(|l| format!("{}\n", l.split('\t').next().unwrap())).collect();
    fs::write(d.join("ident.txt"), ident).unwrap();
    let r = &json_lines(&stdout(&permfill(d, &["--config", c, "evaluate", "--hyp", "ident.txt"])))[0];
    assert_eq!(r["recall"], 0.0);
    assert_eq!(r["tp"], 0);
    assert_eq!(r["scorer"], "simplified");
    assert_eq!(r["config_hash"], hash.as_str());

    for extra in [&[][..], &["--lambda-resc", "0.5"][..], &["--gleu-oracle"][..]] {
        let mut args = vec!["--config", c, "evaluate"];
        args.extend_from_slice(extra);
        let r = &json_lines(&stdout(&permfill(d, &args)))[0];
        assert_eq!(r["sentences"], 12);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (dir, _) = setup();
    let d = dir.path();
    let with_max = |n: usize| TINY.replace("[train]\n", &format!("[train]\nmax_steps = {n}\n"));
    fs::write(d.join("seven.toml"), with_max(7)).unwrap();
    fs::write(d.join("four.toml"), with_max(4)).unwrap();
    stdout(&permfill(d, &["--config", "seven.toml", "gen-toy"]));

    stdout(&permfill(d, &["--config", "seven.toml", "--work-dir", "whole", "train"]));
    stdout(&permfill(d, &["--config", "four.toml", "--work-dir", "split", "train"]));
    stdout(&permfill(d, &["--config", "seven.toml", "--work-dir", "split", "train", "--resume"]));
    let whole = loss_rows(&d.join("whole/loss.tsv"));
    let tail = loss_rows(&d.join("split/loss.tsv"));
    assert_eq!(whole.len(), 7);
    assert_eq!(tail, whole[4..].to_vec());
    // stored configs differ in work_dir only
    let a = Checkpoint::load(d.join("whole/model.ckpt")).unwrap();
    let b = Checkpoint::load(d.join("split/model.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn ablate_emits_grid() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let text = TINY.replace("[train]\n", "[train]\nmax_steps = 3\n");
    fs::write(&cfg, text).unwrap();
    let c = cfg.to_str().unwrap();
    stdout(&permfill(d, &["--config", c, "gen-toy"]));
    let out = stdout(&permfill(d, &["--config", c, "--sinkhorn-steps", "5", "ablate", "--export-json", "grid.json"]));
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 9);
    let grid: Vec<(f64, u64)> = rows
        .iter()
        .map(|r| (r["lambda0"].as_f64().unwrap(), r["steps"].as_u64().unwrap()))
        .collect();
    assert_eq!(grid[0], (0.01, 1));
    assert_eq!(grid[4], (0.25, 2));
    assert_eq!(grid[8], (0.75, 3));
    for r in &rows {
        assert_eq!(r["sinkhorn_steps"], 5);
        let f = r["f0.5"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
    let exported: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("grid.json")).unwrap()).unwrap();
    assert_eq!(exported.as_array().unwrap().len(), 9);
}

#[test]
fn bench_counts_by_bucket() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let out = stdout(&permfill(
        d,
        &["--config", cfg.to_str().unwrap(), "bench", "--random-init", "--buckets", "10,30,50", "--per-bucket", "3"],
    ));
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 3);
    let ar: Vec<f64> = rows.iter().map(|r| r["mean_autoregressive"].as_f64().unwrap()).collect();
    assert!(ar[0] < ar[1] && ar[1] < ar[2], "{ar:?}");
    for r in &rows {
        assert_eq!(r["max_encoder"], 1);
        assert!(r["max_decoder"].as_u64().unwrap() <= 2);
    }
}
