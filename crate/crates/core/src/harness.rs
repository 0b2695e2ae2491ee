//! Benchmark driver: task descriptors, data loading with size validation,
//! metric dispatch and line-delimited JSON run reports.
//!
//! Data layout: `<data>/<task>/` holds `train.tsv`, `dev.tsv` (pair tasks)
//! and `test.tsv`; `wsd-verb` has `inventory.tsv` and `test.tsv`;
//! `wsd-noun` has `train.tsv` and `test.tsv`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::Tokenizer;
use crate::checkpoint::{file_hash, Checkpoint};
use crate::config::PipelineConfig;
use crate::corpus::{prepare_text, prepare_token, CleaningConfig};
use crate::finetune::{self, HeadConfig, HeadKind, TaskData, TaskExample, ValPolicy};
use crate::wsd::{self, SenseInventory, StaticEmbeddings, WsdInstance};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Single,
    Pair,
    VerbWsd,
    NounWsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSizes {
    pub train: usize,
    pub dev: Option<usize>,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskDescriptor {
    pub name: &'static str,
    pub kind: TaskKind,
    pub metric: Metric,
    pub num_classes: usize,
    pub head: HeadKind,
    pub val_policy: ValPolicy,
    pub sizes: ExpectedSizes,
}

pub const TASK_NAMES: [&str; 7] = ["cls-books", "cls-dvd", "cls-music", "pawsx", "xnli", "wsd-verb", "wsd-noun"];

fn sizes(t: (usize, usize, usize)) -> ExpectedSizes {
    ExpectedSizes { train: t.0, dev: (t.1 > 0).then_some(t.1), test: t.2 }
}

/// Look up a task; `cls` is shorthand for `cls-books`.
pub fn descriptor(name: &str) -> Result<TaskDescriptor> {
    let cls = |name, s| TaskDescriptor {
        name,
        kind: TaskKind::Single,
        metric: Metric::Accuracy,
        num_classes: 2,
        head: HeadKind::Deep,
        val_policy: ValPolicy::Split20,
        sizes: sizes(s),
    };
    let wsd = |name, kind, s: (usize, usize)| TaskDescriptor {
        name,
        kind,
        metric: Metric::F1,
        num_classes: 0,
        head: HeadKind::Shallow,
        val_policy: ValPolicy::DevSet,
        sizes: ExpectedSizes { train: s.0, dev: None, test: s.1 },
    };
    Ok(match name {
        "cls" | "cls-books" => cls("cls-books", finetune::CLS_SIZES),
        "cls-dvd" => cls("cls-dvd", finetune::CLS_DVD_SIZES),
        "cls-music" => cls("cls-music", finetune::CLS_MUSIC_SIZES),
        "pawsx" => TaskDescriptor {
            name: "pawsx",
            kind: TaskKind::Pair,
            metric: Metric::Accuracy,
            num_classes: 2,
            head: HeadKind::Deep,
            val_policy: ValPolicy::DevSet,
            sizes: sizes(finetune::PAWSX_SIZES),
        },
        "xnli" => TaskDescriptor {
            name: "xnli",
            kind: TaskKind::Pair,
            metric: Metric::Accuracy,
            num_classes: 3,
            head: HeadKind::Shallow,
            val_policy: ValPolicy::DevSet,
            sizes: sizes(finetune::XNLI_SIZES),
        },
        "wsd-verb" => wsd("wsd-verb", TaskKind::VerbWsd, wsd::VERB_SIZES),
        "wsd-noun" => wsd("wsd-noun", TaskKind::NounWsd, wsd::NOUN_SIZES),
        other => return Err(Error::InvalidConfig(format!("unknown task `{other}` (known: {})", TASK_NAMES.join(", ")))),
    })
}

#[derive(Debug, Clone)]
pub enum TaskSplits {
    Classification(TaskData),
    VerbWsd { inventory: SenseInventory, test: Vec<WsdInstance> },
    NounWsd { train: Vec<WsdInstance>, test: Vec<WsdInstance> },
}

#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub descriptor: TaskDescriptor,
    pub splits: TaskSplits,
    /// Size or balance deviations from the full-scale datasets.
    pub warnings: Vec<String>,
}

/// Parse a task TSV with a header line: `text<TAB>label` or
/// `text_a<TAB>text_b<TAB>label`.
pub fn parse_task_tsv(text: &str, source: &str, pair: bool, num_classes: usize, cleaning: &CleaningConfig) -> Result<Vec<TaskExample>> {
    let fields = if pair { 3 } else { 2 };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.split('\t').count() == fields => {}
        Some((_, h)) => {
            return Err(Error::data(source, 1, format!("header must have {fields} tab-separated columns, found `{h}`")))
        }
        None => return Err(Error::data(source, 1, "missing header line")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != fields {
            return Err(Error::data(source, n, format!("expected {fields} tab-separated fields, found {}", f.len())));
        }
        let label: usize = f[fields - 1]
            .trim()
            .parse()
            .map_err(|_| Error::data(source, n, format!("bad label `{}`", f[fields - 1])))?;
        if label >= num_classes {
            return Err(Error::data(source, n, format!("label {label} out of range for {num_classes} classes")));
        }
        let text_a = prepare_text(f[0], cleaning);
        if text_a.is_empty() {
            return Err(Error::data(source, n, "empty text"));
        }
        let text_b = pair.then(|| prepare_text(f[1], cleaning));
        out.push(TaskExample { text_a, text_b, label });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_split(path: &Path, desc: &TaskDescriptor, cleaning: &CleaningConfig) -> Result<Vec<TaskExample>> {
    parse_task_tsv(&read(path)?, &path.display().to_string(), desc.kind == TaskKind::Pair, desc.num_classes, cleaning)
}

fn prepare_instances(mut xs: Vec<WsdInstance>, cleaning: &CleaningConfig) -> Vec<WsdInstance> {
    for x in xs.iter_mut() {
        x.tokens = x.tokens.iter().map(|t| prepare_token(t, cleaning)).collect();
        x.lemma = prepare_token(&x.lemma, cleaning);
    }
    xs
}

fn check_size(warnings: &mut Vec<String>, task: &str, split: &str, got: usize, want: usize) {
    if got != want {
        warnings.push(format!("{task}: {split} has {got} rows, full-scale data has {want}"));
    }
}

fn check_balance(warnings: &mut Vec<String>, task: &str, split: &str, xs: &[TaskExample], classes: usize) {
    if xs.is_empty() {
        return;
    }
    for c in 0..classes {
        let share = xs.iter().filter(|x| x.label == c).count() as f64 / xs.len() as f64;
        if !(0.45..=0.55).contains(&share) {
            warnings.push(format!("{task}: {split} class {c} makes up {:.1}% of rows", share * 100.0));
        }
    }
}

/// Load one task from `data_dir/<task>/`. Deviations from the full-scale
/// sizes (and CLS class balance) are warnings, or errors when `strict`.
pub fn load_task(desc: &TaskDescriptor, data_dir: &Path, cleaning: &CleaningConfig, strict: bool) -> Result<LoadedTask> {
    let dir = data_dir.join(desc.name);
    let mut warnings = Vec::new();
    let splits = match desc.kind {
        TaskKind::Single | TaskKind::Pair => {
            let train = load_split(&dir.join("train.tsv"), desc, cleaning)?;
            let test = load_split(&dir.join("test.tsv"), desc, cleaning)?;
            let dev_path = dir.join("dev.tsv");
            let dev = if desc.val_policy == ValPolicy::DevSet || dev_path.exists() {
                load_split(&dev_path, desc, cleaning)?
            } else {
                Vec::new()
            };
            check_size(&mut warnings, desc.name, "train", train.len(), desc.sizes.train);
            check_size(&mut warnings, desc.name, "test", test.len(), desc.sizes.test);
            if let Some(d) = desc.sizes.dev {
                check_size(&mut warnings, desc.name, "dev", dev.len(), d);
            }
            if desc.name.starts_with("cls") {
                check_balance(&mut warnings, desc.name, "train", &train, 2);
                check_balance(&mut warnings, desc.name, "test", &test, 2);
            }
            TaskSplits::Classification(TaskData { train, dev, test, num_classes: desc.num_classes })
        }
        TaskKind::VerbWsd => {
            let mut inventory = SenseInventory::load(&dir.join("inventory.tsv"))?;
            for senses in inventory.lemmas.values_mut() {
                for s in senses.iter_mut() {
                    for ex in s.examples.iter_mut() {
                        ex.tokens = ex.tokens.iter().map(|t| prepare_token(t, cleaning)).collect();
                    }
                }
            }
            inventory.lemmas =
                std::mem::take(&mut inventory.lemmas).into_iter().map(|(l, s)| (prepare_token(&l, cleaning), s)).collect();
            let test = prepare_instances(wsd::load_instances(&dir.join("test.tsv"))?, cleaning);
            let examples: usize = inventory.lemmas.values().flatten().map(|s| s.examples.len()).sum();
            check_size(&mut warnings, desc.name, "inventory examples", examples, desc.sizes.train);
            check_size(&mut warnings, desc.name, "test", test.len(), desc.sizes.test);
            TaskSplits::VerbWsd { inventory, test }
        }
        TaskKind::NounWsd => {
            let train = prepare_instances(wsd::load_instances(&dir.join("train.tsv"))?, cleaning);
            let test = prepare_instances(wsd::load_instances(&dir.join("test.tsv"))?, cleaning);
            check_size(&mut warnings, desc.name, "train", train.len(), desc.sizes.train);
            check_size(&mut warnings, desc.name, "test", test.len(), desc.sizes.test);
            TaskSplits::NounWsd { train, test }
        }
    };
    if strict && !warnings.is_empty() {
        return Err(Error::data(dir.display(), 0, warnings.join("; ")));
    }
    Ok(LoadedTask { descriptor: *desc, splits, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
    pub wall_time_s: f64,
    pub config: serde_json::Value,
    pub details: serde_json::Value,
}

impl RunReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task: String,
    pub seed: u64,
    pub error: String,
    /// Numeric failure (diverging loss) rather than bad input.
    pub numeric: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub reports: Vec<RunReport>,
    pub failures: Vec<TaskFailure>,
    pub warnings: Vec<String>,
}

impl BenchmarkOutcome {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.reports {
            s.push_str(&r.to_json_line()?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub strict: bool,
    pub parallel: bool,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run one loaded task with one seed; returns metric value, details and
/// the config snapshot.
pub fn run_task(
    task: &LoadedTask,
    ckpt: &Checkpoint,
    tokenizer: &Tokenizer,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(f64, serde_json::Value, serde_json::Value)> {
    let desc = &task.descriptor;
    match &task.splits {
        TaskSplits::Classification(data) => {
            let head = HeadConfig { kind: desc.head, dropout: 0.1, num_classes: desc.num_classes };
            let grid = finetune::GridSearchConfig { val_policy: desc.val_policy, ..cfg.grid.clone() };
            let out = finetune::finetune_task(ckpt, tokenizer, data, &head, &grid, seed)?;
            let details = serde_json::json!({
                "best_lr": out.best_lr,
                "val_accuracy": out.val_accuracy,
                "runs": out.runs,
                "train": data.train.len(),
                "dev": data.dev.len(),
                "test": data.test.len(),
            });
            Ok((out.test_accuracy, details, serde_json::json!({ "grid": grid, "head": head })))
        }
        TaskSplits::VerbWsd { inventory, test } => {
            check_vocab(ckpt, tokenizer)?;
            let enc = &ckpt.params;
            let vectors = wsd::build_all_sense_vectors(enc, tokenizer, inventory, cfg.wsd.target)?;
            let preds = wsd::predict_verbs(enc, tokenizer, &vectors, test, cfg.wsd.target)?;
            let golds: Vec<String> = test.iter().map(|x| x.gold.clone()).collect();
            let f1 = wsd::f1_score(&preds, &golds)?;
            let words = inventory
                .lemmas
                .values()
                .flatten()
                .flat_map(|s| s.examples.iter().flat_map(|e| e.tokens.iter()))
                .chain(test.iter().flat_map(|x| x.tokens.iter()))
                .map(String::as_str)
                .collect::<std::collections::BTreeSet<&str>>();
            let emb = StaticEmbeddings::from_encoder(enc, tokenizer, words);
            let awe = wsd::predict_awe(&emb, inventory, test, cfg.wsd.awe_window)?;
            let details = serde_json::json!({
                "instances": test.len(),
                "answered": preds.iter().filter(|p| p.is_some()).count(),
                "awe_f1": wsd::f1_score(&awe, &golds)?,
            });
            Ok((f1, details, serde_json::json!({ "target": cfg.wsd.target, "awe_window": cfg.wsd.awe_window })))
        }
        TaskSplits::NounWsd { train, test } => {
            check_vocab(ckpt, tokenizer)?;
            let max_pos = ckpt.params.cfg.max_positions;
            let (train_s, synsets) = wsd::noun_sentences(tokenizer, train, None, max_pos)?;
            let (test_s, _) = wsd::noun_sentences(tokenizer, test, Some(&synsets), max_pos)?;
            let ncfg = &cfg.wsd.noun;
            let models = (0..cfg.wsd.noun_models)
                .map(|k| wsd::train_noun_classifier(&ckpt.params, &train_s, synsets.clone(), ncfg, mix(seed, k as u64)))
                .collect::<Result<Vec<_>>>()?;
            let (individual, ensemble) = wsd::noun_ensemble_eval(&models, &test_s, ncfg.pooling)?;
            let summary = wsd::summarize(&individual, ensemble);
            let details = serde_json::json!({
                "individual_f1": individual,
                "mean": summary.mean,
                "std": summary.std,
                "ensemble": summary.ensemble,
                "synsets": synsets.len(),
            });
            Ok((ensemble, details, serde_json::json!({ "noun": ncfg, "models": cfg.wsd.noun_models })))
        }
    }
}

fn check_vocab(ckpt: &Checkpoint, tokenizer: &Tokenizer) -> Result<()> {
    let h = tokenizer.vocab.hash();
    if h != ckpt.header.vocab_hash {
        return Err(Error::VocabMismatch(format!("checkpoint vocabulary {} but tokenizer {}", ckpt.header.vocab_hash, h)));
    }
    Ok(())
}

/// Run every `(task, seed)` pair; failures are recorded per pair and do
/// not stop the others. Errors only if the checkpoint cannot be read.
pub fn run_benchmark(
    ckpt_path: &Path,
    tokenizer: &Tokenizer,
    tasks: &[String],
    data_dir: &Path,
    seeds: &[u64],
    cfg: &PipelineConfig,
    opts: RunOptions,
) -> Result<BenchmarkOutcome> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let hash = file_hash(ckpt_path)?;
    let mut outcome = BenchmarkOutcome::default();
    let mut loaded: Vec<(String, std::result::Result<LoadedTask, String>)> = Vec::new();
    for t in tasks {
        let l = descriptor(t)
            .and_then(|d| load_task(&d, data_dir, &cfg.cleaning, opts.strict))
            .map_err(|e| e.to_string());
        if let Ok(l) = &l {
            outcome.warnings.extend(l.warnings.iter().cloned());
        }
        loaded.push((t.clone(), l));
    }
    let jobs: Vec<(usize, u64)> = (0..loaded.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let run = |&(i, seed): &(usize, u64)| -> std::result::Result<RunReport, TaskFailure> {
        let (name, task) = &loaded[i];
        let fail = |error: String, numeric: bool| TaskFailure { task: name.clone(), seed, error, numeric };
        let task = task.as_ref().map_err(|e| fail(e.clone(), false))?;
        let start = Instant::now();
        let (value, details, config) =
            run_task(task, &ckpt, tokenizer, cfg, seed).map_err(|e| fail(e.to_string(), e.is_numeric()))?;
        Ok(RunReport {
            task: task.descriptor.name.to_string(),
            checkpoint_hash: hash.clone(),
            seed,
            metric: task.descriptor.metric,
            value,
            wall_time_s: start.elapsed().as_secs_f64(),
            config,
            details,
        })
    };
    let results: Vec<std::result::Result<RunReport, TaskFailure>> =
        if opts.parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() };
    for r in results {
        match r {
            Ok(rep) => outcome.reports.push(rep),
            Err(f) => outcome.failures.push(f),
        }
    }
    Ok(outcome)
}

/// Locate `vocab.txt` and `merges.txt` in `dir`.
pub fn tokenizer_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("vocab.txt"), dir.join("merges.txt"))
}

pub fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let (v, m) = tokenizer_paths(dir);
    let vocab = crate::bpe::BpeVocab::from_vocab_file(&read(&v)?)?;
    let table = crate::bpe::MergeTable::from_merges_file(&read(&m)?)?;
    Tokenizer::new(vocab, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_dispatch() {
        for t in TASK_NAMES {
            let d = descriptor(t).unwrap();
            let want = if t.starts_with("wsd") { Metric::F1 } else { Metric::Accuracy };
            assert_eq!(d.metric, want);
        }
        assert_eq!(descriptor("cls").unwrap().name, "cls-books");
        assert_eq!(descriptor("xnli").unwrap().head, HeadKind::Shallow);
        assert_eq!(descriptor("pawsx").unwrap().head, HeadKind::Deep);
        assert!(descriptor("parsing").is_err());
    }

    #[test]
    fn tsv_parsing() {
        let cfg = CleaningConfig::default();
        let xs = parse_task_tsv("text\tlabel\nUn bon livre.\t1\nNul !\t0\nBof\t0\nSuper\t1\n", "t", false, 2, &cfg).unwrap();
        assert_eq!(xs.len(), 4);
        assert_eq!(xs[0].text_a, vec!["un", "bon", "livre", "."]);
        assert_eq!(xs[1].label, 0);
        let err = parse_task_tsv("a\tb\tlabel\nseul champ\n", "pair.tsv", true, 2, &cfg).unwrap_err();
        assert!(err.to_string().starts_with("pair.tsv:2:"), "{err}");
        assert!(parse_task_tsv("", "x", false, 2, &cfg).is_err());
        assert!(parse_task_tsv("text\tlabel\nabc\t7\n", "x", false, 2, &cfg).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = RunReport {
            task: "xnli".into(),
            checkpoint_hash: "ab".into(),
            seed: 3,
            metric: Metric::Accuracy,
            value: 0.1 + 0.2,
            wall_time_s: 1.0 / 3.0,
            config: serde_json::json!({ "lr": 5e-5 }),
            details: serde_json::json!({ "runs": [1, 2] }),
        };
        assert_eq!(RunReport::from_json_line(&r.to_json_line().unwrap()).unwrap(), r);
    }
}
