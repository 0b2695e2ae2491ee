//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Runs without the libtest harness so the lines are printed even on success.
//! `cargo test --test acceptance -- 4 8` runs only the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{brute_force_bpe, brute_nearest, enumerate_parameters, fd, marker, memo, nouns, random_word_counts};
use flue_core::bpe::{is_special, learn_bpe_from_counts, Tokenizer, MASK, NUM_SPECIALS};
use flue_core::checkpoint::{file_hash, Checkpoint};
use flue_core::config::PipelineConfig;
use flue_core::finetune::{finetune_encoded, GridSearchConfig, HeadConfig, ValPolicy};
use flue_core::harness::{RunReport, TASK_NAMES};
use flue_core::mlm::{dynamic_mask, pack_sequences, MaskingConfig, IGNORE};
use flue_core::model::{count_parameters, ModelConfig, Parameters};
use flue_core::nn::ParamSet;
use flue_core::optim::AdamConfig;
use flue_core::pretrain::{eval_loss, TrainConfig, Trainer};
use flue_core::wsd::{
    build_sense_vectors, ensemble_predict, nearest_sense, noun_ensemble_eval, target_vector, train_noun_classifier,
    word_features, NounClassifierConfig, SenseVector, TargetConfig,
};
use flue_core::{bpe, synth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64, detail: String) -> Outcome {
    check(elapsed.as_secs() < limit_s, format!("{detail}; {:.1}s (limit {limit_s}s)", elapsed.as_secs_f64()))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn bpe_oracle() -> Outcome {
    let t0 = Instant::now();
    for seed in 0..20 {
        let c = random_word_counts(1000 + seed, 200);
        let (table, _) = learn_bpe_from_counts(&c, 60).map_err(|e| e.to_string())?;
        let oracle = brute_force_bpe(&c, 60);
        if table.merges() != oracle.as_slice() {
            return Err(format!("corpus {seed}: merge tables differ"));
        }
    }
    within(t0.elapsed(), 30, "20 random corpora match the brute-force merger".into())
}

fn round_trip() -> Outcome {
    let c = random_word_counts(77, 200);
    let (table, vocab) = learn_bpe_from_counts(&c, 60).map_err(|e| e.to_string())?;
    let tok = Tokenizer::new(vocab, table).map_err(|e| e.to_string())?;
    let alphabet: Vec<char> = c.keys().flat_map(|w| w.chars()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let n = rng.gen_range(1..16);
        let sent: Vec<String> = (0..n)
            .map(|_| (0..rng.gen_range(1..14)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect())
            .collect();
        let back = tok.decode(&tok.encode_sequence(&sent).ids);
        if back != sent {
            return Err(format!("sentence {i}: {sent:?} decoded as {back:?}"));
        }
    }
    Ok("1000 fuzzed sentences decode to their input".into())
}

fn masking_stats() -> Outcome {
    let cfg = MaskingConfig::default();
    let vocab = 30_000u32;
    let mut data_rng = ChaCha8Rng::seed_from_u64(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut maskable, mut selected, mut masked, mut random, mut kept) = (0u64, 0u64, 0u64, 0u64, 0u64);
    while maskable < 120_000 {
        let len = data_rng.gen_range(10..120);
        let body: Vec<u32> = (0..len).map(|_| data_rng.gen_range(NUM_SPECIALS..vocab)).collect();
        let seq = pack_sequences([body], 128).map_err(|e| e.to_string())?.remove(0);
        let row = dynamic_mask(&seq, &cfg, &mut rng, vocab);
        for (i, &orig) in seq.iter().enumerate() {
            if is_special(orig) {
                if row.labels[i] != IGNORE || row.inputs[i] != orig {
                    return Err("special token was masked".into());
                }
                continue;
            }
            maskable += 1;
            if row.labels[i] == IGNORE {
                continue;
            }
            selected += 1;
            match row.inputs[i] {
                MASK => masked += 1,
                x if x == orig => kept += 1,
                _ => random += 1,
            }
        }
    }
    let sel = selected as f64 / maskable as f64;
    let s = selected as f64;
    let (m, r, k) = (masked as f64 / s, random as f64 / s, kept as f64 / s);
    check(
        (sel - 0.15).abs() <= 0.01 && (m - 0.8).abs() <= 0.02 && (r - 0.1).abs() <= 0.02 && (k - 0.1).abs() <= 0.02,
        format!("{maskable} positions: selected {sel:.4}, mask/random/keep {m:.3}/{r:.3}/{k:.3}"),
    )
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut tensors = 0;
    let mut worst = (0.0f64, String::new());
    for (suite, reports) in fd::all() {
        for r in reports {
            tensors += 1;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, format!("{suite}/{}", r.tensor));
            }
        }
    }
    let detail = format!("{tensors} tensors, worst rel err {:.2e} at {}", worst.0, worst.1);
    if worst.0 > 1e-4 {
        return Err(detail);
    }
    within(t0.elapsed(), 300, detail)
}

fn schedule() -> Outcome {
    let s = AdamConfig::default().schedule();
    let lr = |t: u64| s.lr_at_step(t).map_err(|e| e.to_string());
    if lr(0)? != 0.0 || lr(24_000)? != 6e-4 || lr(s.total_steps)? != 0.0 {
        return Err(format!("anchors {} {} {}", lr(0)?, lr(24_000)?, lr(s.total_steps)?));
    }
    let total = s.total_steps;
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let t = i * total / 99;
        let expected =
            if t <= 24_000 { 6e-4 * t as f64 / 24_000.0 } else { 6e-4 * (total - t) as f64 / (total - 24_000) as f64 };
        worst = worst.max((lr(t)? - expected).abs());
    }
    check(worst <= 1e-12, format!("anchors exact, 100-point deviation {worst:.1e}"))
}

/// Collects log lines emitted by the library.
struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        self.0.lock().unwrap().push(record.args().to_string());
    }
    fn flush(&self) {}
}

static LOG: Capture = Capture(Mutex::new(Vec::new()));

fn small_trainer(seqs: &[Vec<u32>], v: usize, accumulation: usize, micro: usize, total: u64, seed: u64) -> Trainer {
    let cfg = ModelConfig { hidden: 32, heads: 4, d_ff: 64, dropout: 0.0, ..ModelConfig::toy(v) };
    let params = Parameters::init(&cfg, seed).unwrap();
    let adam = AdamConfig { peak_lr: 1e-3, warmup_steps: 2, total_steps: total, accumulation, ..AdamConfig::default() };
    let masking = MaskingConfig { seed: seed + 1, ..MaskingConfig::toy() };
    let train = TrainConfig { micro_batch: micro, checkpoint_every: 0, clip_norm: Some(1.0) };
    Trainer::new(params, seqs.to_vec(), adam, masking, train, seed, "h".into()).unwrap()
}

fn accumulation() -> Outcome {
    let (tok, seqs) = memo::hundred_sentences(200);
    let v = tok.vocab.len();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut big = small_trainer(&seqs, v, 16, 16, 3, 0);
    LOG.0.lock().unwrap().clear();
    big.run(dir.path(), |_| {}).map_err(|e| e.to_string())?;
    let logged = LOG.0.lock().unwrap().iter().any(|l| l.starts_with("effective batch 256 "));
    if !logged {
        return Err(format!("no `effective batch 256` log line: {:?}", LOG.0.lock().unwrap()));
    }
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut acc = small_trainer(&seqs[..64], v, 4, 4, 2, seed);
        let mut one = small_trainer(&seqs[..64], v, 1, 16, 2, seed);
        for _ in 0..2 {
            acc.step().map_err(|e| e.to_string())?;
            one.step().map_err(|e| e.to_string())?;
        }
        for ((_, a), (_, b)) in acc.params.tensors().iter().zip(one.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("logged effective batch 256; 4x4 vs 1x16 max param diff {worst:.1e}"))
}

fn parameter_counts() -> Outcome {
    let base = count_parameters(&ModelConfig::base(50_005));
    let toy = ModelConfig::toy(300);
    let toy_n = Parameters::init(&toy, 0).map_err(|e| e.to_string())?.num_elements();
    check(
        (110_000_000..=150_000_000).contains(&base) && toy_n == enumerate_parameters(&toy),
        format!("base {base}; toy {toy_n} vs enumerated {}", enumerate_parameters(&toy)),
    )
}

fn memorization() -> Outcome {
    let t0 = Instant::now();
    let (tok, seqs) = memo::hundred_sentences(500);
    let v = tok.vocab.len();
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::toy(v) };
    let params = Parameters::init(&cfg, 1).map_err(|e| e.to_string())?;
    let masking = MaskingConfig { seed: 3, ..MaskingConfig::toy() };
    let initial = eval_loss(&params, &seqs, &masking, 50).map_err(|e| e.to_string())?;
    let adam = AdamConfig { peak_lr: 5e-3, warmup_steps: 30, total_steps: 300, accumulation: 1, ..AdamConfig::default() };
    let train = TrainConfig { micro_batch: 50, checkpoint_every: 0, clip_norm: Some(1.0) };
    let mut t = Trainer::new(params, seqs.clone(), adam, masking.clone(), train, 4, tok.vocab.hash()).map_err(|e| e.to_string())?;
    for _ in 0..300 {
        t.step().map_err(|e| e.to_string())?;
    }
    let fin = eval_loss(&t.params, &seqs, &masking, 50).map_err(|e| e.to_string())?;
    let ln_v = (v as f64).ln();
    let detail = format!("initial {initial:.3} (ln V {ln_v:.3}), final {fin:.3}, ratio {:.3}", fin / initial);
    if fin >= 0.2 * initial || (initial - ln_v).abs() > 0.05 * ln_v {
        return Err(detail);
    }
    within(t0.elapsed(), 600, detail)
}

fn marker_task() -> Outcome {
    let (tok, train, test) = marker::encoded(1, 400, 200);
    let encoder = Parameters::init(&ModelConfig::toy(tok.vocab.len()), 3).map_err(|e| e.to_string())?;
    let grid = GridSearchConfig { val_policy: ValPolicy::Split20, ..GridSearchConfig::default() };
    if grid.learning_rates.len() != 4 {
        return Err(format!("grid has {} rates", grid.learning_rates.len()));
    }
    let out = finetune_encoded(&encoder, &train, &[], &test, &HeadConfig::deep(2), &grid, 5).map_err(|e| e.to_string())?;
    check(out.test_accuracy == 1.0, format!("test accuracy {} (best lr {:e})", out.test_accuracy, out.best_lr))
}

fn wsd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..500 {
        let dim = rng.gen_range(2..32);
        let k = rng.gen_range(1..10);
        let cands: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let query: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let senses: Vec<SenseVector> = cands
            .iter()
            .enumerate()
            .map(|(i, v)| SenseVector { sense_id: format!("s{i}"), vector: v.clone(), support: 1 })
            .collect();
        if nearest_sense(&query, &senses).map_err(|e| e.to_string())? != brute_nearest(&query, &cands) {
            return Err(format!("nearest sense differs on case {case}"));
        }
    }

    let (inv, _) = synth::verb_wsd(3, 1, 0);
    let corpus: Vec<Vec<String>> =
        inv.lemmas.values().flatten().flat_map(|s| s.examples.iter().map(|e| e.tokens.clone())).collect();
    let (table, vocab) = bpe::learn_bpe(&corpus, 80).map_err(|e| e.to_string())?;
    let tok = Tokenizer::new(vocab, table).map_err(|e| e.to_string())?;
    let enc = Parameters::init(&ModelConfig::toy(tok.vocab.len()), 4).map_err(|e| e.to_string())?;
    let cfg = TargetConfig::default();
    for (lemma, senses) in &inv.lemmas {
        let vectors = build_sense_vectors(&enc, &tok, &inv, lemma, cfg).map_err(|e| e.to_string())?;
        for (i, s) in senses.iter().enumerate() {
            let ex = &s.examples[0];
            let q = target_vector(&enc, &tok, &ex.tokens, ex.target, cfg).map_err(|e| e.to_string())?;
            if nearest_sense(&q, &vectors).map_err(|e| e.to_string())? != i {
                return Err(format!("{lemma}: sense {} does not recover its own example", s.sense_id));
            }
        }
    }

    let s = nouns::setup(120, 40);
    let ncfg = NounClassifierConfig { epochs: 8, ..NounClassifierConfig::toy() };
    let (clf, enc) = train_noun_classifier(&s.encoder, &s.train, s.synsets.clone(), &ncfg, 1).map_err(|e| e.to_string())?;
    let (individual, _) = noun_ensemble_eval(&[(clf.clone(), enc.clone())], &s.test, ncfg.pooling).map_err(|e| e.to_string())?;
    if individual[0] != 1.0 {
        return Err(format!("noun classifier F1 {}", individual[0]));
    }
    for sent in &s.test {
        let f = word_features(&enc, sent, ncfg.pooling).map_err(|e| e.to_string())?;
        let three = ensemble_predict(&[&clf, &clf, &clf], &f).map_err(|e| e.to_string())?;
        if three != ensemble_predict(&[&clf], &f).map_err(|e| e.to_string())? {
            return Err("ensemble of copies differs from the single model".into());
        }
    }
    let copies = vec![(clf, enc); 3];
    let (_, ensemble) = noun_ensemble_eval(&copies, &s.test, ncfg.pooling).map_err(|e| e.to_string())?;
    check(
        ensemble == individual[0],
        format!("500 nearest-sense cases, one-example senses, noun F1 {}, ensemble {ensemble}", individual[0]),
    )
}

fn determinism() -> Outcome {
    let (tok, seqs) = memo::hundred_sentences(100);
    let v = tok.vocab.len();
    let dropout_trainer = |total| {
        let mut t = small_trainer(&seqs, v, 2, 16, total, 3);
        t.params.cfg.dropout = 0.1;
        t
    };
    let run = || {
        let mut t = dropout_trainer(12);
        let losses: Vec<u64> = (0..12).map(|_| t.step().unwrap().loss.to_bits()).collect();
        (t.params, t.state, losses)
    };
    let (a, b) = (run(), run());
    if a != b {
        return Err("two fixed-seed runs differ".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut first = dropout_trainer(12);
    for _ in 0..7 {
        first.step().map_err(|e| e.to_string())?;
    }
    let path = dir.path().join("mid.mlmf");
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(ckpt, seqs.clone(), first.adam.clone(), first.masking.clone(), first.train.clone())
        .map_err(|e| e.to_string())?;
    while resumed.state.step < 12 {
        resumed.step().map_err(|e| e.to_string())?;
    }
    check(resumed.params == a.0 && resumed.state == a.1, "repeat runs and resume-at-step-7 are bit-identical".into())
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flue")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("flue {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Manifest inputs must hash to the files on disk and the echoed config
/// must reparse to the manifest's config.
fn validate_manifest(manifest: &Path, config: &Path, command: &str) -> Result<(), String> {
    let m = json(manifest)?;
    if m["command"] != command || m["tool_version"] != flue_core::TOOL_VERSION {
        return Err(format!("{}: bad command or version", manifest.display()));
    }
    let inputs = m["inputs"].as_array().ok_or("manifest without inputs")?;
    if inputs.is_empty() {
        return Err(format!("{}: no inputs", manifest.display()));
    }
    for i in inputs {
        let p = Path::new(i["path"].as_str().ok_or("input without path")?);
        if file_hash(p).map_err(|e| e.to_string())? != i["sha256"] {
            return Err(format!("{}: stale hash for {}", manifest.display(), p.display()));
        }
    }
    let text = std::fs::read_to_string(config).map_err(|e| e.to_string())?;
    let echoed = PipelineConfig::parse(&text).map_err(|e| e.to_string())?;
    let recorded: PipelineConfig = serde_json::from_value(m["config"].clone()).map_err(|e| e.to_string())?;
    if echoed != recorded {
        return Err(format!("{} does not match {}", config.display(), manifest.display()));
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let root = workspace_root();
    let raw = root.join("data/synthetic/raw.txt");
    let tasks = root.join("data/synthetic/tasks");
    let config = root.join("configs/e2e.ini");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = s(&config);

    run_cli(&["--config", &cfg, "clean", "--input", &s(&raw), "--out", &s(&d("clean"))])?;
    run_cli(&["--config", &cfg, "learn-bpe", "--corpus", &s(&d("clean/corpus.txt")), "--out", &s(&d("bpe"))])?;
    run_cli(&[
        "--config", &cfg, "pretrain", "--data", &s(&d("clean/corpus.txt")), "--tokenizer", &s(&d("bpe")), "--out",
        &s(&d("pretrain")),
    ])?;
    let all = TASK_NAMES.join(",");
    run_cli(&[
        "--config", &cfg, "run", "--ckpt", &s(&d("pretrain/final.mlmf")), "--tasks", &all, "--data", &s(&tasks),
        "--seeds", "1", "--out", &s(&d("reports/run.jsonl")),
    ])?;

    let stats = json(&d("clean/stats.json"))?;
    for key in ["lines_in", "lines_kept", "tokens_kept", "drop_reasons"] {
        if stats.get(key).is_none() {
            return Err(format!("stats.json lacks {key}"));
        }
    }
    validate_manifest(&d("clean/manifest.json"), &d("clean/config.ini"), "clean")?;
    validate_manifest(&d("bpe/manifest.json"), &d("bpe/config.ini"), "learn-bpe")?;
    validate_manifest(&d("pretrain/manifest.json"), &d("pretrain/config.ini"), "pretrain")?;
    validate_manifest(&d("reports/run.jsonl.manifest.json"), &d("reports/run.jsonl.config.ini"), "run")?;

    let text = std::fs::read_to_string(d("reports/run.jsonl")).map_err(|e| e.to_string())?;
    let reports: Vec<RunReport> =
        text.lines().map(RunReport::from_json_line).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let names: BTreeSet<&str> = reports.iter().map(|r| r.task.as_str()).collect();
    let ckpt_hash = file_hash(&d("pretrain/final.mlmf")).map_err(|e| e.to_string())?;
    let sane = reports.iter().all(|r| (0.0..=1.0).contains(&r.value) && r.checkpoint_hash == ckpt_hash);
    if reports.len() != TASK_NAMES.len() || names.len() != TASK_NAMES.len() || !sane {
        return Err(format!("{} reports for {:?}", reports.len(), names));
    }
    let summary: Vec<String> = reports.iter().map(|r| format!("{} {:.2}", r.task, r.value)).collect();
    within(t0.elapsed(), 1200, format!("all stages exit 0, manifests valid; {}", summary.join(", ")))
}

fn main() {
    log::set_logger(&LOG).unwrap();
    log::set_max_level(log::LevelFilter::Info);
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("BPE matches brute-force oracle", bpe_oracle),
        ("encode/decode round-trip", round_trip),
        ("masking statistics", masking_stats),
        ("finite-difference gradients", gradients),
        ("learning-rate schedule", schedule),
        ("gradient accumulation", accumulation),
        ("parameter counts", parameter_counts),
        ("toy memorization", memorization),
        ("marker task under the grid", marker_task),
        ("word sense disambiguation", wsd),
        ("determinism and resume", determinism),
        ("end-to-end pipeline", end_to_end),
    ];
    // libtest-style flags (e.g. --nocapture) are ignored; bare numbers select criteria
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
