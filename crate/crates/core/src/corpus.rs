//! Streaming corpus cleaning: Unicode normalization, rule-based Moses-style
//! tokenization, lowercasing, and line filters (length, character ratios,
//! contact-detail patterns, rolling-window deduplication).

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnicodeForm {
    Nfc,
    Nfkc,
}

impl fmt::Display for UnicodeForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnicodeForm::Nfc => "NFC",
            UnicodeForm::Nfkc => "NFKC",
        })
    }
}

impl FromStr for UnicodeForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "NFC" => Ok(UnicodeForm::Nfc),
            "NFKC" => Ok(UnicodeForm::Nfkc),
            other => Err(format!("unknown unicode form `{other}` (expected NFC or NFKC)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DropPattern {
    Email,
    PhoneFax,
    Url,
}

impl DropPattern {
    pub const ALL: [DropPattern; 3] = [DropPattern::Email, DropPattern::PhoneFax, DropPattern::Url];

    pub fn name(self) -> &'static str {
        match self {
            DropPattern::Email => "email",
            DropPattern::PhoneFax => "phone_fax",
            DropPattern::Url => "url",
        }
    }

    fn regex(self) -> &'static Regex {
        static EMAIL: OnceLock<Regex> = OnceLock::new();
        static PHONE: OnceLock<Regex> = OnceLock::new();
        static URL: OnceLock<Regex> = OnceLock::new();
        match self {
            DropPattern::Email => EMAIL.get_or_init(|| {
                Regex::new(r"[\w.+-]+@[\w-]+(\.[\w-]+)+").unwrap()
            }),
            DropPattern::PhoneFax => PHONE.get_or_init(|| {
                Regex::new(concat!(
                    r"(?i)\b(t[ée]l([ée]phone)?|fax|t[ée]l[ée]copie|portable|mobile)\b\s*[:.]?\s*\+?\d",
                    r"|(\+\d{2,3}|\b0)\s*[1-9]([\s.-]*\d{2}){4}\b",
                ))
                .unwrap()
            }),
            DropPattern::Url => URL.get_or_init(|| {
                Regex::new(r"(?i)\b(https?://|ftp://|www\.)\S+|\b[a-z0-9-]+\.(com|fr|org|net|eu|be|ch|ca|info)(/\S*)?\b")
                    .unwrap()
            }),
        }
    }

    pub fn matches(self, text: &str) -> bool {
        self.regex().is_match(text)
    }
}

impl FromStr for DropPattern {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "email" => Ok(DropPattern::Email),
            "phone_fax" => Ok(DropPattern::PhoneFax),
            "url" => Ok(DropPattern::Url),
            other => Err(format!("unknown drop pattern `{other}`")),
        }
    }
}

/// Rules applied to every candidate line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_nonalpha_ratio: f64,
    pub max_digit_ratio: f64,
    pub drop_patterns: Vec<DropPattern>,
    /// Number of recent line hashes remembered for duplicate detection. Zero disables it.
    pub dedup_window: usize,
    pub lowercase: bool,
    pub unicode_form: UnicodeForm,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            min_tokens: 4,
            max_tokens: 1024,
            max_nonalpha_ratio: 0.5,
            max_digit_ratio: 0.3,
            drop_patterns: DropPattern::ALL.to_vec(),
            dedup_window: 1_000_000,
            lowercase: true,
            unicode_form: UnicodeForm::Nfc,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens > self.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "min_tokens ({}) exceeds max_tokens ({})",
                self.min_tokens, self.max_tokens
            )));
        }
        for (name, r) in [
            ("max_nonalpha_ratio", self.max_nonalpha_ratio),
            ("max_digit_ratio", self.max_digit_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// A kept training line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanSentence {
    pub tokens: Vec<String>,
    pub source_id: String,
    pub line_no: u64,
}

impl CleanSentence {
    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    InvalidUtf8,
    TooShort,
    TooLong,
    Pattern(DropPattern),
    NonAlpha,
    TooManyDigits,
    Duplicate,
}

impl DropReason {
    pub fn name(self) -> &'static str {
        match self {
            DropReason::InvalidUtf8 => "invalid_utf8",
            DropReason::TooShort => "too_short",
            DropReason::TooLong => "too_long",
            DropReason::Pattern(p) => p.name(),
            DropReason::NonAlpha => "non_alpha",
            DropReason::TooManyDigits => "too_many_digits",
            DropReason::Duplicate => "duplicate",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Keep(CleanSentence),
    Drop(DropReason),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardError {
    pub shard: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub lines_in: u64,
    pub lines_kept: u64,
    pub tokens_kept: u64,
    pub drop_reasons: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shard_errors: Vec<ShardError>,
}

impl CorpusStats {
    fn record_drop(&mut self, reason: DropReason) {
        *self.drop_reasons.entry(reason.name().to_string()).or_insert(0) += 1;
    }

    pub fn dropped(&self) -> u64 {
        self.drop_reasons.values().sum()
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        self.lines_in += other.lines_in;
        self.lines_kept += other.lines_kept;
        self.tokens_kept += other.tokens_kept;
        for (k, v) in &other.drop_reasons {
            *self.drop_reasons.entry(k.clone()).or_insert(0) += v;
        }
        self.shard_errors.extend(other.shard_errors.iter().cloned());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Canonical Unicode normal form of `bytes`, rejecting invalid UTF-8.
pub fn unicode_normalize(bytes: &[u8], form: UnicodeForm) -> Result<String> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::InvalidUtf8 { offset: e.valid_up_to() })?;
    Ok(normalize_str(text, form))
}

pub fn normalize_str(text: &str, form: UnicodeForm) -> String {
    match form {
        UnicodeForm::Nfc => text.nfc().collect(),
        UnicodeForm::Nfkc => text.nfkc().collect(),
    }
}

fn is_always_split(c: char) -> bool {
    matches!(c, '!' | '?' | ';' | ':' | '«' | '»' | '(' | ')' | '[' | ']' | '"' | '…')
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '’'
}

/// Rule-based French tokenization in the style of the Moses tokenizer.
///
/// Whitespace separates chunks; inside a chunk `! ? ; : « » ( ) [ ] "` and `…`
/// always stand alone, commas stand alone unless between two digits, a run
/// of two or more dots is a single ellipsis token, and a single dot is split
/// only when it ends the word. An apostrophe between two letters closes the
/// token (`l'avion` → `l'` `avion`). Hyphens never split.
pub fn moses_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        tokenize_chunk(chunk, &mut out);
    }
    out
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let n = chars.len();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
    };
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c == '.' {
            let mut j = i;
            while j < n && chars[j] == '.' {
                j += 1;
            }
            let run = j - i;
            let word_final = j == n || is_always_split(chars[j]) || chars[j] == ',';
            if run >= 2 || word_final {
                flush(&mut cur, out);
                out.push(".".repeat(run));
            } else {
                cur.push('.');
            }
            i = j;
            continue;
        }
        if is_always_split(c) {
            flush(&mut cur, out);
            out.push(c.to_string());
        } else if c == ',' {
            let between_digits = i > 0
                && i + 1 < n
                && chars[i - 1].is_numeric()
                && chars[i + 1].is_numeric();
            if between_digits {
                cur.push(c);
            } else {
                flush(&mut cur, out);
                out.push(",".to_string());
            }
        } else if is_apostrophe(c) {
            cur.push(c);
            let elision =
                i > 0 && i + 1 < n && chars[i - 1].is_alphabetic() && chars[i + 1].is_alphabetic();
            if elision {
                flush(&mut cur, out);
            }
        } else {
            cur.push(c);
        }
        i += 1;
    }
    flush(&mut cur, out);
}

fn tokenize_normalized(text: &str, cfg: &CleaningConfig) -> Vec<String> {
    let mut tokens = moses_tokenize(text);
    if cfg.lowercase {
        for t in tokens.iter_mut() {
            let lower = t.to_lowercase();
            if lower != *t {
                *t = normalize_str(&lower, cfg.unicode_form);
            }
        }
    }
    tokens
}

/// Normalize, tokenize and (optionally) lowercase text without filtering,
/// for downstream task data.
pub fn prepare_text(text: &str, cfg: &CleaningConfig) -> Vec<String> {
    tokenize_normalized(&normalize_str(text, cfg.unicode_form), cfg)
}

/// Normalize and lowercase a single pre-tokenized word.
pub fn prepare_token(token: &str, cfg: &CleaningConfig) -> String {
    let t = normalize_str(token, cfg.unicode_form);
    if cfg.lowercase {
        normalize_str(&t.to_lowercase(), cfg.unicode_form)
    } else {
        t
    }
}

/// Everything in the cleaning chain except the duplicate filter, which needs
/// stream state. Pure, so lines can be processed in parallel.
pub fn preclean(line: &[u8], cfg: &CleaningConfig) -> std::result::Result<Vec<String>, DropReason> {
    let text = unicode_normalize(line, cfg.unicode_form).map_err(|_| DropReason::InvalidUtf8)?;
    let tokens = tokenize_normalized(&text, cfg);
    if tokens.len() < cfg.min_tokens {
        return Err(DropReason::TooShort);
    }
    if tokens.len() > cfg.max_tokens {
        return Err(DropReason::TooLong);
    }
    for p in &cfg.drop_patterns {
        if p.matches(&text) {
            return Err(DropReason::Pattern(*p));
        }
    }
    let (mut total, mut nonalpha, mut digits) = (0usize, 0usize, 0usize);
    for c in tokens.iter().flat_map(|t| t.chars()) {
        total += 1;
        if !c.is_alphabetic() {
            nonalpha += 1;
        }
        if c.is_numeric() {
            digits += 1;
        }
    }
    let total = total.max(1) as f64;
    if nonalpha as f64 / total > cfg.max_nonalpha_ratio {
        return Err(DropReason::NonAlpha);
    }
    if digits as f64 / total > cfg.max_digit_ratio {
        return Err(DropReason::TooManyDigits);
    }
    Ok(tokens)
}

fn line_hash(tokens: &[String]) -> u64 {
    let mut h = DefaultHasher::new();
    for t in tokens {
        t.hash(&mut h);
    }
    h.finish()
}

/// Bounded memory of the most recent line hashes.
#[derive(Debug, Default)]
pub struct DedupWindow {
    capacity: usize,
    order: VecDeque<u64>,
    counts: HashMap<u64, u32>,
}

impl DedupWindow {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, order: VecDeque::new(), counts: HashMap::new() }
    }

    /// True if `tokens` was seen within the window; otherwise remembers it.
    pub fn check_and_insert(&mut self, tokens: &[String]) -> bool {
        if self.capacity == 0 {
            return false;
        }
        let h = line_hash(tokens);
        if self.counts.contains_key(&h) {
            return true;
        }
        self.order.push_back(h);
        *self.counts.entry(h).or_insert(0) += 1;
        if self.order.len() > self.capacity {
            let old = self.order.pop_front().unwrap();
            if let Some(c) = self.counts.get_mut(&old) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&old);
                }
            }
        }
        false
    }
}

/// Stateful single-line cleaner: `preclean` followed by the duplicate filter.
#[derive(Debug)]
pub struct Cleaner {
    cfg: CleaningConfig,
    dedup: DedupWindow,
}

impl Cleaner {
    pub fn new(cfg: CleaningConfig) -> Result<Self> {
        cfg.validate()?;
        let dedup = DedupWindow::new(cfg.dedup_window);
        Ok(Self { cfg, dedup })
    }

    pub fn config(&self) -> &CleaningConfig {
        &self.cfg
    }

    pub fn clean(&mut self, line: &str, source_id: &str, line_no: u64) -> Decision {
        let pre = preclean(line.as_bytes(), &self.cfg);
        self.finish(pre, source_id, line_no)
    }

    fn finish(
        &mut self,
        pre: std::result::Result<Vec<String>, DropReason>,
        source_id: &str,
        line_no: u64,
    ) -> Decision {
        match pre {
            Err(r) => Decision::Drop(r),
            Ok(tokens) => {
                if self.dedup.check_and_insert(&tokens) {
                    Decision::Drop(DropReason::Duplicate)
                } else {
                    Decision::Keep(CleanSentence { tokens, source_id: source_id.to_string(), line_no })
                }
            }
        }
    }
}

/// Clean a single line with a fresh duplicate window.
pub fn clean_sentence(line: &str, cfg: &CleaningConfig) -> Result<Decision> {
    let mut cleaner = Cleaner::new(cfg.clone())?;
    Ok(cleaner.clean(line, "", 0))
}

#[derive(Debug, Clone)]
pub enum ShardInput {
    Path(PathBuf),
    Memory { id: String, bytes: Vec<u8> },
}

impl ShardInput {
    pub fn id(&self) -> String {
        match self {
            ShardInput::Path(p) => p.display().to_string(),
            ShardInput::Memory { id, .. } => id.clone(),
        }
    }

    fn open(&self) -> std::io::Result<Box<dyn BufRead + '_>> {
        Ok(match self {
            ShardInput::Path(p) => Box::new(BufReader::new(File::open(p)?)),
            ShardInput::Memory { bytes, .. } => Box::new(BufReader::new(bytes.as_slice())),
        })
    }
}

const CHUNK_LINES: usize = 4096;

fn read_chunk(reader: &mut dyn BufRead, buf: &mut Vec<Vec<u8>>) -> std::io::Result<bool> {
    buf.clear();
    while buf.len() < CHUNK_LINES {
        let mut line = Vec::new();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(false);
        }
        if line.last() == Some(&b'\n') {
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
        }
        buf.push(line);
    }
    Ok(true)
}

/// Clean `shards` in order, calling `sink` for every kept sentence.
///
/// Lines are precleaned in parallel chunks on `workers` threads and then
/// merged in input order through one duplicate window, so the kept sequence
/// does not depend on the worker count. A shard that cannot be read is
/// recorded in `shard_errors` and skipped.
pub fn filter_corpus_with<F>(
    shards: &[ShardInput],
    cfg: &CleaningConfig,
    workers: usize,
    mut sink: F,
) -> Result<CorpusStats>
where
    F: FnMut(CleanSentence) -> Result<()>,
{
    let mut cleaner = Cleaner::new(cfg.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut stats = CorpusStats::default();
    let mut buf = Vec::with_capacity(CHUNK_LINES);
    for shard in shards {
        let id = shard.id();
        let mut shard_stats = CorpusStats::default();
        let mut kept = Vec::new();
        let mut line_no = 0u64;
        let outcome: std::io::Result<()> = (|| {
            let mut reader = shard.open()?;
            loop {
                let more = read_chunk(reader.as_mut(), &mut buf)?;
                let pre: Vec<_> =
                    pool.install(|| buf.par_iter().map(|l| preclean(l, &cleaner.cfg)).collect());
                for p in pre {
                    line_no += 1;
                    shard_stats.lines_in += 1;
                    match cleaner.finish(p, &id, line_no) {
                        Decision::Keep(s) => {
                            shard_stats.lines_kept += 1;
                            shard_stats.tokens_kept += s.tokens.len() as u64;
                            kept.push(s);
                        }
                        Decision::Drop(r) => shard_stats.record_drop(r),
                    }
                }
                for s in kept.drain(..) {
                    sink(s).map_err(|e| std::io::Error::other(e.to_string()))?;
                }
                if !more {
                    return Ok(());
                }
            }
        })();
        if let Err(e) = outcome {
            stats.shard_errors.push(ShardError { shard: id, error: e.to_string() });
        }
        stats.merge(&shard_stats);
    }
    Ok(stats)
}

pub fn filter_corpus(
    shards: &[ShardInput],
    cfg: &CleaningConfig,
    workers: usize,
) -> Result<(Vec<CleanSentence>, CorpusStats)> {
    let mut out = Vec::new();
    let stats = filter_corpus_with(shards, cfg, workers, |s| {
        out.push(s);
        Ok(())
    })?;
    Ok((out, stats))
}

/// Write kept sentences as space-separated tokens, one per line, LF endings.
pub fn filter_corpus_to_writer<W: Write>(
    shards: &[ShardInput],
    cfg: &CleaningConfig,
    workers: usize,
    out: &mut W,
) -> Result<CorpusStats> {
    filter_corpus_with(shards, cfg, workers, |s| {
        out.write_all(s.render().as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io("<output>", e))
    })
}

/// Read an already-cleaned corpus: one sentence per line, tokens separated by spaces.
pub fn read_clean_corpus<R: Read>(reader: R, source_id: &str) -> Result<Vec<CleanSentence>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_id, e))?;
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            continue;
        }
        out.push(CleanSentence { tokens, source_id: source_id.to_string(), line_no: i as u64 + 1 });
    }
    Ok(out)
}
