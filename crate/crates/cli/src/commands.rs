use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use flue_core::bpe::{self, Tokenizer};
use flue_core::checkpoint::{file_hash, Checkpoint};
use flue_core::config::PipelineConfig;
use flue_core::corpus::{filter_corpus_to_writer, read_clean_corpus, ShardInput};
use flue_core::harness::{self, RunOptions, RunReport, TaskKind};
use flue_core::mlm::{mask_rows, pack_sequences, MaskingConfig};
use flue_core::model::Parameters;
use flue_core::nn::ParamSet;
use flue_core::pretrain::Trainer;
use flue_core::{synth, Error};

use crate::manifest::{create_dir, write, Manifest};
use crate::{Failure, GlobalArgs};

type CmdResult = Result<(), Failure>;

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig, Failure> {
    let cfg = PipelineConfig::load(g.config.as_deref(), &g.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn workers(cfg: &PipelineConfig) -> usize {
    if cfg.workers > 0 {
        cfg.workers
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Error::io(path, e).into())
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>, Failure> {
    let sents = read_clean_corpus(open(path)?, &path.display().to_string())?;
    if sents.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    Ok(sents.into_iter().map(|s| s.tokens).collect())
}

fn copy(from: &Path, to: &Path) -> CmdResult {
    if from != to {
        fs::copy(from, to).map_err(|e| Error::io(from, e))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CleanArgs {
    /// Raw text shards, one sentence or paragraph per line.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory for `corpus.txt` and `stats.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn clean(g: &GlobalArgs, a: CleanArgs) -> CmdResult {
    let cfg = load_config(g)?;
    create_dir(&a.out)?;
    let corpus = a.out.join("corpus.txt");
    let shards: Vec<ShardInput> = a.input.iter().cloned().map(ShardInput::Path).collect();
    let file = File::create(&corpus).map_err(|e| Error::io(&corpus, e))?;
    let mut w = BufWriter::new(file);
    let stats = filter_corpus_to_writer(&shards, &cfg.cleaning, workers(&cfg), &mut w)?;
    w.flush().map_err(|e| Error::io(&corpus, e))?;
    let stats_path = a.out.join("stats.json");
    write(&stats_path, &(stats.to_json() + "\n"))?;
    for e in &stats.shard_errors {
        log::warn!("skipped shard {}: {}", e.shard, e.error);
    }
    log::info!("kept {} of {} lines, {} tokens", stats.lines_kept, stats.lines_in, stats.tokens_kept);

    let mut m = Manifest::new("clean", &cfg);
    for p in &a.input {
        // unreadable shards are already listed in stats.json
        if let Ok(h) = file_hash(p) {
            m.inputs.push(crate::manifest::InputRecord { path: p.display().to_string(), sha256: h });
        }
    }
    m.output(&corpus);
    m.output(&stats_path);
    m.summary = serde_json::to_value(&stats).unwrap_or_default();
    m.write_dir(&a.out)?;
    if stats.lines_kept == 0 {
        return Err(Error::EmptyCorpus.into());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct LearnBpeArgs {
    /// Cleaned corpus (`clean` output).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for `vocab.txt` and `merges.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of merges; overrides `bpe.merges`.
    #[arg(long)]
    pub merges: Option<usize>,
}

pub fn learn_bpe(g: &GlobalArgs, a: LearnBpeArgs) -> CmdResult {
    let mut cfg = load_config(g)?;
    if let Some(n) = a.merges {
        cfg.bpe_merges = n;
    }
    let sents = read_corpus(&a.corpus)?;
    let start = Instant::now();
    let (table, vocab) = bpe::learn_bpe(sents.iter(), cfg.bpe_merges)?;
    log::info!("{} merges, {} symbols in {:.1}s", table.merges().len(), vocab.len(), start.elapsed().as_secs_f64());
    create_dir(&a.out)?;
    let (vp, mp) = harness::tokenizer_paths(&a.out);
    write(&vp, &vocab.to_vocab_file())?;
    write(&mp, &table.to_merges_file())?;

    let mut m = Manifest::new("learn-bpe", &cfg);
    m.input(&a.corpus)?;
    m.output(&vp);
    m.output(&mp);
    m.summary = serde_json::json!({
        "merges": table.merges().len(),
        "vocab_size": vocab.len(),
        "vocab_hash": vocab.hash(),
    });
    m.write_dir(&a.out)
}

#[derive(Args, Debug)]
pub struct ApplyBpeArgs {
    /// Directory holding `vocab.txt` and `merges.txt`.
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Cleaned corpus to segment.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn apply_bpe(g: &GlobalArgs, a: ApplyBpeArgs) -> CmdResult {
    let cfg = load_config(g)?;
    let tok = harness::load_tokenizer(&a.tokenizer)?;
    let out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut out = BufWriter::new(out);
    let reader = BufReader::new(open(&a.input)?);
    let written: std::io::Result<()> = (|| {
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| std::io::Error::other(format!("{} line {}: {e}", a.input.display(), i + 1)))?;
            let segs: Vec<String> = line.split_whitespace().flat_map(|w| tok.table.apply(w)).collect();
            writeln!(out, "{}", segs.join(" "))?;
        }
        out.flush()
    })();
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        Err(e) => return Err(Failure::data(e.to_string())),
        Ok(()) => {}
    }
    drop(out);
    if let Some(p) = &a.output {
        let mut m = Manifest::new("apply-bpe", &cfg);
        m.input(&a.input)?;
        m.input(&harness::tokenizer_paths(&a.tokenizer).1)?;
        m.output(p);
        m.write_beside(p)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Cleaned corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `vocab.txt` and `merges.txt`.
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Output directory for checkpoints and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `global.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write the first masked micro-batch as JSON and exit.
    #[arg(long)]
    pub dump_batch: Option<PathBuf>,
}

fn encode_corpus(tok: &Tokenizer, sents: &[Vec<String>], max_len: usize) -> Result<Vec<Vec<u32>>, Failure> {
    let encoded = sents.iter().map(|s| tok.encode_sequence(s).ids);
    Ok(pack_sequences(encoded, max_len)?)
}

pub fn pretrain(g: &GlobalArgs, a: PretrainArgs) -> CmdResult {
    let mut cfg = load_config(g)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let masking = MaskingConfig { seed: cfg.seed, ..cfg.masking.clone() };
    let tok = harness::load_tokenizer(&a.tokenizer)?;
    let model = cfg.model_for_vocab(tok.vocab.len());
    if model.vocab_size != tok.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model.vocab_size {} but tokenizer has {} symbols",
            model.vocab_size,
            tok.vocab.len()
        ))
        .into());
    }
    let sents = read_corpus(&a.data)?;
    let max_len = cfg.masking.max_len.min(model.max_positions);
    let seqs = encode_corpus(&tok, &sents, max_len)?;
    log::info!("{} sequences, vocabulary {}", seqs.len(), tok.vocab.len());

    if let Some(p) = &a.dump_batch {
        let rows: Vec<usize> = (0..cfg.train.micro_batch.min(seqs.len())).collect();
        let batch = mask_rows(&seqs, &rows, &masking, 0, tok.vocab.len() as u32);
        let json = serde_json::to_string(&batch).map_err(Error::from)?;
        return write(p, &(json + "\n"));
    }

    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.header.vocab_hash != tok.vocab.hash() {
                return Err(Error::VocabMismatch(format!("{} was trained with another vocabulary", p.display())).into());
            }
            log::info!("resuming from step {}", ckpt.header.step);
            Trainer::resume(ckpt, seqs, cfg.adam.clone(), masking.clone(), cfg.train.clone())?
        }
        None => {
            let params = Parameters::init(&model, cfg.seed)?;
            Trainer::new(params, seqs, cfg.adam.clone(), masking, cfg.train.clone(), cfg.seed, tok.vocab.hash())?
        }
    };
    create_dir(&a.out)?;
    let (vp, mp) = harness::tokenizer_paths(&a.tokenizer);
    let (ovp, omp) = harness::tokenizer_paths(&a.out);
    copy(&vp, &ovp)?;
    copy(&mp, &omp)?;

    let start = Instant::now();
    let every = (cfg.adam.total_steps / 20).max(1);
    let records = trainer.run(&a.out, |r| {
        if r.step % every == 0 || r.step == 1 {
            log::info!("step {} lr {:.3e} loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;

    let mut m = Manifest::new("pretrain", &cfg);
    m.input(&a.data)?;
    m.input(&vp)?;
    m.input(&mp)?;
    if let Some(p) = &a.resume {
        m.input(p)?;
    }
    m.output(&a.out.join("loss.csv"));
    m.output(&a.out.join("final.mlmf"));
    m.summary = serde_json::json!({
        "model": model,
        "parameters": trainer.params.num_elements(),
        "effective_batch": trainer.effective_batch(),
        "steps": trainer.state.step,
        "first_loss": records.first().map(|r| r.loss),
        "last_loss": records.last().map(|r| r.loss),
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    m.write_dir(&a.out)
}

#[derive(Args, Debug)]
pub struct TaskArgs {
    /// Task name, e.g. `cls-books` or `wsd-verb`.
    #[arg(long)]
    pub task: String,
    /// Pretrained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Benchmark data root containing one directory per task.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Tokenizer directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Treat size and label-balance warnings as errors.
    #[arg(long)]
    pub strict: bool,
    /// Report file (one JSON line); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn tokenizer_dir(explicit: &Option<PathBuf>, ckpt: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn stdout(text: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> CmdResult {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write(p, text)
        }
        None => {
            stdout(text)
        }
    }
}

pub fn single_task(g: &GlobalArgs, a: TaskArgs, wsd: bool) -> CmdResult {
    let cfg = load_config(g)?;
    let desc = harness::descriptor(&a.task)?;
    let is_wsd = matches!(desc.kind, TaskKind::VerbWsd | TaskKind::NounWsd);
    if is_wsd != wsd {
        let other = if is_wsd { "wsd" } else { "finetune" };
        return Err(Failure::usage(format!("task {} belongs to `flue {other}`", a.task)));
    }
    let tok_dir = tokenizer_dir(&a.tokenizer, &a.ckpt);
    let tok = harness::load_tokenizer(&tok_dir)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let task = harness::load_task(&desc, &a.data, &cfg.cleaning, a.strict)?;
    for w in &task.warnings {
        log::warn!("{w}");
    }
    let start = Instant::now();
    let (value, details, config) = harness::run_task(&task, &ckpt, &tok, &cfg, a.seed)?;
    let report = RunReport {
        task: desc.name.to_string(),
        checkpoint_hash: file_hash(&a.ckpt)?,
        seed: a.seed,
        metric: desc.metric,
        value,
        wall_time_s: start.elapsed().as_secs_f64(),
        config,
        details,
    };
    emit(&a.out, &(report.to_json_line()? + "\n"))?;
    if let Some(p) = &a.out {
        let mut m = Manifest::new(if wsd { "wsd" } else { "finetune" }, &cfg);
        m.input(&a.ckpt)?;
        m.input(&harness::tokenizer_paths(&tok_dir).0)?;
        m.output(p);
        m.summary = serde_json::json!({ "task": desc.name, "value": value });
        m.write_beside(p)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated task names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    /// Benchmark data root containing one directory per task.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    /// Treat size and label-balance warnings as errors.
    #[arg(long)]
    pub strict: bool,
    /// Run task/seed pairs concurrently.
    #[arg(long)]
    pub parallel: bool,
    /// Tokenizer directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// JSONL report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(g: &GlobalArgs, a: RunArgs) -> CmdResult {
    let cfg = load_config(g)?;
    let tok_dir = tokenizer_dir(&a.tokenizer, &a.ckpt);
    let tok = harness::load_tokenizer(&tok_dir)?;
    let opts = RunOptions { strict: a.strict, parallel: a.parallel };
    let outcome = harness::run_benchmark(&a.ckpt, &tok, &a.tasks, &a.data, &a.seeds, &cfg, opts)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    emit(&a.out, &outcome.to_jsonl()?)?;
    if let Some(p) = &a.out {
        let mut m = Manifest::new("run", &cfg);
        m.input(&a.ckpt)?;
        let (vp, mp) = harness::tokenizer_paths(&tok_dir);
        m.input(&vp)?;
        m.input(&mp)?;
        m.output(p);
        m.summary = serde_json::json!({
            "reports": outcome.reports.len(),
            "failures": outcome.failures,
            "warnings": outcome.warnings,
        });
        m.write_beside(p)?;
    }
    for f in &outcome.failures {
        eprintln!("task {} seed {} failed: {}", f.task, f.seed, f.error);
    }
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        let numeric = outcome.failures.iter().any(|f| f.numeric);
        Err(Failure {
            code: if numeric { 3 } else { 2 },
            message: format!("{} of {} runs failed", outcome.failures.len(), a.tasks.len() * a.seeds.len()),
        })
    }
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let tensors: Vec<serde_json::Value> = ckpt
        .params
        .tensors()
        .into_iter()
        .map(|(name, t)| serde_json::json!({ "name": name, "shape": t.shape }))
        .collect();
    let info = serde_json::json!({
        "path": a.checkpoint.display().to_string(),
        "sha256": file_hash(&a.checkpoint)?,
        "header": ckpt.header,
        "parameters": ckpt.params.num_elements(),
        "tensors": tensors,
    });
    stdout(&(serde_json::to_string_pretty(&info).map_err(Error::from)? + "\n"))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; receives `raw.txt` and `tasks/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Approximate size of the raw corpus in bytes.
    #[arg(long, default_value_t = 1_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Training examples per classification task.
    #[arg(long, default_value_t = 200)]
    pub task_size: usize,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    create_dir(&a.out)?;
    write(&a.out.join("raw.txt"), &synth::raw_corpus(a.seed, a.bytes))?;
    synth::write_benchmark_data(&a.out.join("tasks"), a.seed, a.task_size)?;
    Ok(())
}
