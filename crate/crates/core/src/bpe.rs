//! Byte pair encoding over Moses-tokenized words.
//!
//! Words are split into characters with an end-of-word marker glued to the
//! last one (`chat` → `c h a t</w>`). Learning repeatedly merges the most
//! frequent adjacent pair; equal counts go to the lexicographically smallest
//! `(left, right)` pair. Pair counts are weighted by word frequency and count
//! non-overlapping occurrences only, so `a a a` holds one `(a, a)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const EOW: &str = "</w>";

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const SPECIAL_SYMBOLS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

/// Initial segmentation of a word: one symbol per character, marker on the last.
pub fn initial_symbols(word: &str) -> Vec<String> {
    let mut out: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(EOW);
    }
    out
}

/// Ordered merge list; the rank of a merge is its index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    symbol_ids: HashMap<String, u32>,
    pair_rank: HashMap<(u32, u32), (u32, u32)>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        let mut table = MergeTable::default();
        for (l, r) in merges {
            table.push(l, r)?;
        }
        Ok(table)
    }

    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.symbol_ids.get(s) {
            return id;
        }
        let id = self.symbol_ids.len() as u32;
        self.symbol_ids.insert(s.to_string(), id);
        id
    }

    fn push(&mut self, left: String, right: String) -> Result<()> {
        let l = self.intern(&left);
        let r = self.intern(&right);
        if self.pair_rank.contains_key(&(l, r)) {
            return Err(Error::Contract(format!("duplicate merge `{left} {right}`")));
        }
        let merged = self.intern(&format!("{left}{right}"));
        self.pair_rank.insert((l, r), (self.merges.len() as u32, merged));
        self.merges.push((left, right));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        let l = self.symbol_ids.get(left)?;
        let r = self.symbol_ids.get(right)?;
        self.pair_rank.get(&(*l, *r)).map(|&(rank, _)| rank as usize)
    }

    /// Segment one surface token, applying the lowest-ranked available merge
    /// until none applies.
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<(Option<u32>, String)> = initial_symbols(word)
            .into_iter()
            .map(|s| (self.symbol_ids.get(&s).copied(), s))
            .collect();
        loop {
            let mut best: Option<(u32, (u32, u32), u32)> = None;
            for w in syms.windows(2) {
                if let (Some(l), Some(r)) = (w[0].0, w[1].0) {
                    if let Some(&(rank, merged)) = self.pair_rank.get(&(l, r)) {
                        if best.is_none_or(|b| rank < b.0) {
                            best = Some((rank, (l, r), merged));
                        }
                    }
                }
            }
            let Some((_, (l, r), merged)) = best else { break };
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i].0 == Some(l) && syms[i + 1].0 == Some(r) {
                    let s = format!("{}{}", syms[i].1, syms[i + 1].1);
                    out.push((Some(merged), s));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms.into_iter().map(|(_, s)| s).collect()
    }

    /// One merge per line, `left right`, in rank order.
    pub fn to_merges_file(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_merges_file(text: &str) -> Result<Self> {
        let mut table = MergeTable::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    table.push(l.to_string(), r.to_string()).map_err(|e| Error::data("merges", i + 1, e.to_string()))?
                }
                _ => return Err(Error::data("merges", i + 1, "expected `left right`")),
            }
        }
        Ok(table)
    }
}

/// Symbol ↔ id mapping. Ids `0..5` are the fixed specials; the remaining ids
/// follow vocab-file order (descending count, then symbol).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    symbols: Vec<String>,
    counts: Vec<u64>,
    id_of: HashMap<String, u32>,
}

impl BpeVocab {
    /// Build from `(symbol, count)` entries in any order.
    pub fn from_counts(entries: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut entries: Vec<(String, u64)> = entries.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_ordered(entries)
    }

    fn from_ordered(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; symbols.len()];
        for (s, c) in entries {
            symbols.push(s);
            counts.push(c);
        }
        let mut id_of = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if id_of.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        Ok(Self { symbols, counts, id_of })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.id_of.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Non-special symbols in id order.
    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.symbols[NUM_SPECIALS as usize..].iter().map(String::as_str)
    }

    /// `symbol count` per line, specials excluded.
    pub fn to_vocab_file(&self) -> String {
        let mut s = String::new();
        for i in NUM_SPECIALS as usize..self.symbols.len() {
            let _ = writeln!(s, "{} {}", self.symbols[i], self.counts[i]);
        }
        s
    }

    pub fn from_vocab_file(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (sym, count) = line
                .rsplit_once(' ')
                .ok_or_else(|| Error::data("vocab", i + 1, "expected `symbol count`"))?;
            let count = count
                .parse::<u64>()
                .map_err(|_| Error::data("vocab", i + 1, format!("bad count `{count}`")))?;
            entries.push((sym.to_string(), count));
        }
        Self::from_ordered(entries)
    }

    /// Hex SHA-256 over the id-ordered symbol list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Ids usable as random MLM replacements.
    pub fn non_special_range(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS..self.symbols.len() as u32
    }
}

/// Internal learner state: interned symbols, unique words with frequencies,
/// pair counts and a pair → words index.
struct Learner {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    pair_counts: HashMap<(u32, u32), u64>,
    where_: HashMap<(u32, u32), HashSet<usize>>,
}

/// Non-overlapping occurrence counts of each adjacent pair in one word.
fn word_pairs(syms: &[u32]) -> Vec<((u32, u32), u64)> {
    let mut out: Vec<((u32, u32), u64)> = Vec::new();
    let mut last_counted: Option<usize> = None;
    for i in 0..syms.len().saturating_sub(1) {
        let pair = (syms[i], syms[i + 1]);
        if pair.0 == pair.1 && i > 0 && last_counted == Some(i - 1) && syms[i - 1] == pair.0 {
            continue;
        }
        last_counted = Some(i);
        match out.iter_mut().find(|(p, _)| *p == pair) {
            Some((_, c)) => *c += 1,
            None => out.push((pair, 1)),
        }
    }
    out
}

fn merge_word(syms: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

impl Learner {
    fn new(word_counts: &BTreeMap<String, u64>) -> Self {
        let mut l = Learner {
            symbols: Vec::new(),
            ids: HashMap::new(),
            words: Vec::new(),
            pair_counts: HashMap::new(),
            where_: HashMap::new(),
        };
        for (w, &f) in word_counts {
            let syms: Vec<u32> = initial_symbols(w).iter().map(|s| l.intern(s)).collect();
            l.words.push((syms, f));
        }
        for idx in 0..l.words.len() {
            l.add_word_pairs(idx);
        }
        l
    }

    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }

    fn add_word_pairs(&mut self, idx: usize) {
        let (syms, f) = &self.words[idx];
        for (p, c) in word_pairs(syms) {
            *self.pair_counts.entry(p).or_insert(0) += c * f;
            self.where_.entry(p).or_default().insert(idx);
        }
    }

    fn remove_word_pairs(&mut self, idx: usize) {
        let (syms, f) = &self.words[idx];
        for (p, c) in word_pairs(syms) {
            let e = self.pair_counts.get_mut(&p).expect("pair count present");
            *e -= c * f;
            if *e == 0 {
                self.pair_counts.remove(&p);
            }
        }
    }

    fn best_pair(&self) -> Option<((u32, u32), u64)> {
        let mut best: Option<((u32, u32), u64)> = None;
        for (&p, &c) in &self.pair_counts {
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    c > bc
                        || (c == bc
                            && (&self.symbols[p.0 as usize], &self.symbols[p.1 as usize])
                                < (&self.symbols[bp.0 as usize], &self.symbols[bp.1 as usize]))
                }
            };
            if better {
                best = Some((p, c));
            }
        }
        best
    }

    fn merge(&mut self, pair: (u32, u32)) -> u32 {
        let merged_str = format!("{}{}", self.symbols[pair.0 as usize], self.symbols[pair.1 as usize]);
        let merged = self.intern(&merged_str);
        let mut affected: Vec<usize> = self.where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for idx in affected {
            let contains = self.words[idx].0.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1);
            if !contains {
                continue;
            }
            self.remove_word_pairs(idx);
            let new = merge_word(&self.words[idx].0, pair, merged);
            self.words[idx].0 = new;
            self.add_word_pairs(idx);
        }
        merged
    }
}

/// Aggregate word frequencies from tokenized sentences.
pub fn count_words<'a, I, S>(sentences: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    let mut counts = BTreeMap::new();
    for s in sentences {
        for w in s.as_ref() {
            *counts.entry(w.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Learn up to `num_merges` merges from tokenized sentences.
pub fn learn_bpe<'a, I, S>(sentences: I, num_merges: usize) -> Result<(MergeTable, BpeVocab)>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    learn_bpe_from_counts(&count_words(sentences), num_merges)
}

pub fn learn_bpe_from_counts(word_counts: &BTreeMap<String, u64>, num_merges: usize) -> Result<(MergeTable, BpeVocab)> {
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut learner = Learner::new(word_counts);
    let mut chars: HashSet<char> = HashSet::new();
    for w in word_counts.keys() {
        chars.extend(w.chars());
    }
    let mut merges = Vec::new();
    let mut merged_syms = Vec::new();
    while merges.len() < num_merges {
        let Some((pair, count)) = learner.best_pair() else { break };
        if count < 2 {
            break;
        }
        let merged = learner.merge(pair);
        merges.push((learner.symbols[pair.0 as usize].clone(), learner.symbols[pair.1 as usize].clone()));
        merged_syms.push(learner.symbols[merged as usize].clone());
    }
    let table = MergeTable::new(merges)?;

    let mut counts: HashMap<String, u64> = HashMap::new();
    for c in chars {
        counts.insert(c.to_string(), 0);
        counts.insert(format!("{c}{EOW}"), 0);
    }
    for s in merged_syms {
        counts.insert(s, 0);
    }
    for (syms, f) in &learner.words {
        for &s in syms {
            *counts.get_mut(&learner.symbols[s as usize]).expect("symbol in vocab") += f;
        }
    }
    let vocab = BpeVocab::from_counts(counts)?;
    Ok((table, vocab))
}

/// Token ids of one sentence plus the id span of each source word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub word_boundaries: Vec<(usize, usize)>,
}

/// A merge table and its vocabulary, used together for encoding.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: BpeVocab,
    pub table: MergeTable,
}

impl Tokenizer {
    pub fn new(vocab: BpeVocab, table: MergeTable) -> Result<Self> {
        for (l, r) in table.merges() {
            let merged = format!("{l}{r}");
            if vocab.id(&merged).is_none() {
                return Err(Error::VocabMismatch(format!("merged symbol `{merged}` missing from vocabulary")));
            }
        }
        Ok(Self { vocab, table })
    }

    pub fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        for s in self.table.apply(word) {
            out.push(self.vocab.id(&s).unwrap_or(UNK));
        }
    }

    pub fn encode_sequence<S: AsRef<str>>(&self, tokens: &[S]) -> EncodedSequence {
        let mut enc = EncodedSequence::default();
        for t in tokens {
            let start = enc.ids.len();
            self.encode_word(t.as_ref(), &mut enc.ids);
            enc.word_boundaries.push((start, enc.ids.len()));
        }
        enc
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        decode(ids, &self.vocab)
    }
}

/// Rebuild surface tokens: symbols concatenate until one carries the
/// end-of-word marker. Specials other than UNK are skipped.
pub fn decode(ids: &[u32], vocab: &BpeVocab) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for &id in ids {
        if id == UNK {
            cur.push_str(SPECIAL_SYMBOLS[UNK as usize]);
            continue;
        }
        if is_special(id) {
            continue;
        }
        let Some(sym) = vocab.symbol(id) else {
            cur.push_str(SPECIAL_SYMBOLS[UNK as usize]);
            continue;
        };
        if let Some(stem) = sym.strip_suffix(EOW) {
            cur.push_str(stem);
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push_str(sym);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
