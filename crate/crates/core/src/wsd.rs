//! Word sense disambiguation.
//!
//! Verbs: each sense is represented by the mean contextual vector of its
//! inventory examples and an instance takes the sense with the highest
//! cosine similarity. An averaged-word-embedding context vector gives the
//! non-contextual baseline. Nouns: a small stack of encoder blocks over the
//! frozen (or jointly trained) encoder states predicts a synset for every
//! word through a softmax; several seeds are averaged into an ensemble.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{Tokenizer, BOS, EOS};
use crate::mlm::MaskedBatch;
use crate::model::{self, ActivationCache, Mode, Parameters};
use crate::nn::{self, LayerParams, NormPlacement, ParamSet, StackCache, StackSpec, Tensor};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::{Error, Result};

/// Full-scale sizes (train, test) used to validate real data.
pub const VERB_SIZES: (usize, usize) = (55_206, 3_199);
pub const NOUN_SIZES: (usize, usize) = (818_262, 1_445);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseExample {
    pub tokens: Vec<String>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sense {
    pub sense_id: String,
    pub gloss: String,
    pub examples: Vec<SenseExample>,
}

/// Lemma → senses in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseInventory {
    pub lemmas: BTreeMap<String, Vec<Sense>>,
}

impl SenseInventory {
    pub fn senses(&self, lemma: &str) -> Option<&[Sense]> {
        self.lemmas.get(lemma).map(|v| v.as_slice())
    }

    /// Add one example line; a line with no example tokens only declares the
    /// sense.
    pub fn add(&mut self, lemma: &str, sense_id: &str, gloss: &str, example: Option<SenseExample>) {
        let senses = self.lemmas.entry(lemma.to_string()).or_default();
        let idx = match senses.iter().position(|s| s.sense_id == sense_id) {
            Some(i) => i,
            None => {
                senses.push(Sense { sense_id: sense_id.to_string(), gloss: gloss.to_string(), examples: Vec::new() });
                senses.len() - 1
            }
        };
        if let Some(ex) = example {
            senses[idx].examples.push(ex);
        }
    }

    /// Parse `lemma<TAB>sense_id<TAB>gloss<TAB>example-tokens<TAB>target_index`.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut inv = Self::default();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::data(source, n, format!("expected 5 tab-separated fields, found {}", f.len())));
            }
            if n == 1 && f[4] == "target_index" {
                continue;
            }
            let tokens: Vec<String> = f[3].split_whitespace().map(str::to_string).collect();
            let example = if tokens.is_empty() {
                None
            } else {
                let target: usize =
                    f[4].parse().map_err(|_| Error::data(source, n, format!("bad target index `{}`", f[4])))?;
                if target >= tokens.len() {
                    return Err(Error::data(source, n, format!("target index {target} out of range")));
                }
                Some(SenseExample { tokens, target })
            };
            if f[0].is_empty() || f[1].is_empty() {
                return Err(Error::data(source, n, "empty lemma or sense id"));
            }
            inv.add(f[0], f[1], f[2], example);
        }
        Ok(inv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (lemma, senses) in &self.lemmas {
            for s in senses {
                if s.examples.is_empty() {
                    out.push_str(&format!("{lemma}\t{}\t{}\t\t0\n", s.sense_id, s.gloss));
                }
                for ex in &s.examples {
                    out.push_str(&format!("{lemma}\t{}\t{}\t{}\t{}\n", s.sense_id, s.gloss, ex.tokens.join(" "), ex.target));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsdInstance {
    pub tokens: Vec<String>,
    pub target: usize,
    pub lemma: String,
    pub gold: String,
}

/// Parse `sentence-tokens<TAB>target_index<TAB>lemma<TAB>sense_id`.
pub fn parse_instances(text: &str, source: &str) -> Result<Vec<WsdInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::data(source, n, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        if n == 1 && f[1] == "target_index" {
            continue;
        }
        let tokens: Vec<String> = f[0].split_whitespace().map(str::to_string).collect();
        let target: usize = f[1].parse().map_err(|_| Error::data(source, n, format!("bad target index `{}`", f[1])))?;
        if target >= tokens.len() {
            return Err(Error::data(source, n, format!("target index {target} out of range for {} tokens", tokens.len())));
        }
        out.push(WsdInstance { tokens, target, lemma: f[2].to_string(), gold: f[3].to_string() });
    }
    Ok(out)
}

pub fn load_instances(path: &Path) -> Result<Vec<WsdInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_instances(&text, &path.display().to_string())
}

pub fn instances_to_tsv(instances: &[WsdInstance]) -> String {
    instances.iter().map(|x| format!("{}\t{}\t{}\t{}\n", x.tokens.join(" "), x.target, x.lemma, x.gold)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubwordPooling {
    #[default]
    Mean,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLayer {
    /// States after the final norm.
    #[default]
    Final,
    /// Output of the second-to-last block.
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TargetConfig {
    pub pooling: SubwordPooling,
    pub layer: EncoderLayer,
}

/// `BOS ids EOS` for a token list, with each word's id span shifted past BOS.
pub fn encode_with_spans(tokenizer: &Tokenizer, tokens: &[String], max_positions: usize) -> Result<(Vec<u32>, Vec<(usize, usize)>)> {
    let enc = tokenizer.encode_sequence(tokens);
    if enc.ids.len() + 2 > max_positions {
        return Err(Error::Contract(format!("sentence of {} sub-words exceeds {max_positions} positions", enc.ids.len())));
    }
    let mut ids = Vec::with_capacity(enc.ids.len() + 2);
    ids.push(BOS);
    ids.extend(enc.ids);
    ids.push(EOS);
    Ok((ids, enc.word_boundaries.into_iter().map(|(s, e)| (s + 1, e + 1)).collect()))
}

/// Pool rows `span` of `states` (`[T × H]`).
pub fn pool_span(states: &[f64], h: usize, span: (usize, usize), pooling: SubwordPooling) -> Result<Vec<f64>> {
    let (s, e) = span;
    if e <= s {
        return Err(Error::Contract("target maps to zero sub-words".into()));
    }
    let end = match pooling {
        SubwordPooling::Mean => e,
        SubwordPooling::First => s + 1,
    };
    let mut v = vec![0.0; h];
    for r in s..end {
        nn::add_assign(&mut v, &states[r * h..(r + 1) * h]);
    }
    let inv = 1.0 / (end - s) as f64;
    v.iter_mut().for_each(|x| *x *= inv);
    Ok(v)
}

pub fn sentence_states(encoder: &Parameters, ids: &[u32], layer: EncoderLayer) -> Result<Vec<f64>> {
    match layer {
        EncoderLayer::Final => model::encode_tokens(encoder, ids),
        EncoderLayer::Penultimate => {
            let mut outs = model::encode_layers(encoder, ids)?;
            let l = outs.len() - 1;
            Ok(outs.swap_remove(l.saturating_sub(1)))
        }
    }
}

/// Contextual vector of `tokens[target]`.
pub fn target_vector(encoder: &Parameters, tokenizer: &Tokenizer, tokens: &[String], target: usize, cfg: TargetConfig) -> Result<Vec<f64>> {
    if target >= tokens.len() {
        return Err(Error::Contract(format!("target {target} out of range for {} tokens", tokens.len())));
    }
    let (ids, spans) = encode_with_spans(tokenizer, tokens, encoder.cfg.max_positions)?;
    let states = sentence_states(encoder, &ids, cfg.layer)?;
    pool_span(&states, encoder.cfg.hidden, spans[target], cfg.pooling)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseVector {
    pub sense_id: String,
    pub vector: Vec<f64>,
    pub support: usize,
}

pub fn mean_vector(vectors: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = vectors.first()?;
    let mut m = vec![0.0; first.len()];
    for v in vectors {
        nn::add_assign(&mut m, v);
    }
    let inv = 1.0 / vectors.len() as f64;
    m.iter_mut().for_each(|x| *x *= inv);
    Some(m)
}

/// One vector per sense of `lemma`, averaging its examples. Senses without
/// examples are skipped.
pub fn build_sense_vectors(
    encoder: &Parameters,
    tokenizer: &Tokenizer,
    inventory: &SenseInventory,
    lemma: &str,
    cfg: TargetConfig,
) -> Result<Vec<SenseVector>> {
    let senses = inventory.senses(lemma).ok_or_else(|| Error::Contract(format!("lemma `{lemma}` not in inventory")))?;
    let mut out = Vec::with_capacity(senses.len());
    for s in senses {
        if s.examples.is_empty() {
            log::warn!("sense {} of `{lemma}` has no examples; skipped", s.sense_id);
            continue;
        }
        let vecs = s
            .examples
            .iter()
            .map(|ex| target_vector(encoder, tokenizer, &ex.tokens, ex.target, cfg))
            .collect::<Result<Vec<_>>>()?;
        out.push(SenseVector { sense_id: s.sense_id.clone(), vector: mean_vector(&vecs).expect("non-empty"), support: vecs.len() });
    }
    Ok(out)
}

/// Sense vectors for every lemma, computed in parallel.
pub fn build_all_sense_vectors(
    encoder: &Parameters,
    tokenizer: &Tokenizer,
    inventory: &SenseInventory,
    cfg: TargetConfig,
) -> Result<BTreeMap<String, Vec<SenseVector>>> {
    let lemmas: Vec<&String> = inventory.lemmas.keys().collect();
    let built: Vec<Result<(String, Vec<SenseVector>)>> = lemmas
        .par_iter()
        .map(|l| Ok(((*l).clone(), build_sense_vectors(encoder, tokenizer, inventory, l, cfg)?)))
        .collect();
    built.into_iter().collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = nn::dot(a, a).sqrt();
    let nb = nn::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero-norm vector".into()));
    }
    Ok(nn::dot(a, b) / (na * nb))
}

/// Index of the most cosine-similar candidate; the first wins on ties.
pub fn nearest_sense(query: &[f64], senses: &[SenseVector]) -> Result<usize> {
    if senses.is_empty() {
        return Err(Error::Contract("no candidate senses".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in senses.iter().enumerate() {
        if s.vector.len() != query.len() {
            return Err(Error::Shape(format!("sense vector of dimension {} vs query {}", s.vector.len(), query.len())));
        }
        let c = cosine(query, &s.vector)?;
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(best.0)
}

/// Predict a sense per instance from precomputed sense vectors; `None`
/// when the lemma is unknown.
pub fn predict_verbs(
    encoder: &Parameters,
    tokenizer: &Tokenizer,
    sense_vectors: &BTreeMap<String, Vec<SenseVector>>,
    instances: &[WsdInstance],
    cfg: TargetConfig,
) -> Result<Vec<Option<String>>> {
    instances
        .par_iter()
        .map(|x| {
            let Some(senses) = sense_vectors.get(&x.lemma).filter(|s| !s.is_empty()) else {
                return Ok(None);
            };
            let v = target_vector(encoder, tokenizer, &x.tokens, x.target, cfg)?;
            Ok(Some(senses[nearest_sense(&v, senses)?].sense_id.clone()))
        })
        .collect()
}

/// Word → vector table for the averaged-word-embedding baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticEmbeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl StaticEmbeddings {
    /// `word v1 v2 …` per line.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut emb = Self::default();
        for (i, line) in text.lines().enumerate() {
            let mut f = line.split_whitespace();
            let Some(word) = f.next() else { continue };
            let v: Vec<f64> = f
                .map(|x| x.parse::<f64>().map_err(|_| Error::data(source, i + 1, format!("bad value `{x}`"))))
                .collect::<Result<_>>()?;
            if emb.dim == 0 {
                emb.dim = v.len();
            } else if v.len() != emb.dim {
                return Err(Error::data(source, i + 1, format!("dimension {} differs from {}", v.len(), emb.dim)));
            }
            emb.vectors.insert(word.to_string(), v);
        }
        Ok(emb)
    }

    /// Input embeddings of an encoder, one vector per word (mean over its
    /// sub-words) for every word in `words`.
    pub fn from_encoder<'a>(encoder: &Parameters, tokenizer: &Tokenizer, words: impl IntoIterator<Item = &'a str>) -> Self {
        let h = encoder.cfg.hidden;
        let mut emb = Self { dim: h, vectors: HashMap::new() };
        for w in words {
            let mut ids = Vec::new();
            tokenizer.encode_word(w, &mut ids);
            let rows: Vec<Vec<f64>> =
                ids.iter().map(|&id| encoder.token_embed.data[id as usize * h..(id as usize + 1) * h].to_vec()).collect();
            if let Some(m) = mean_vector(&rows) {
                emb.vectors.insert(w.to_string(), m);
            }
        }
        emb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AweVector {
    pub vector: Vec<f64>,
    /// False when no in-window word had an embedding.
    pub usable: bool,
}

/// Mean embedding of up to `window` words each side of the target.
pub fn awe_vector(emb: &StaticEmbeddings, tokens: &[String], target: usize, window: usize) -> Result<AweVector> {
    if window == 0 {
        return Err(Error::InvalidConfig("window must be at least 1".into()));
    }
    if target >= tokens.len() {
        return Err(Error::Contract(format!("target {target} out of range for {} tokens", tokens.len())));
    }
    let lo = target.saturating_sub(window);
    let hi = (target + window).min(tokens.len() - 1);
    let found: Vec<Vec<f64>> =
        (lo..=hi).filter(|&i| i != target).filter_map(|i| emb.vectors.get(&tokens[i]).cloned()).collect();
    Ok(match mean_vector(&found) {
        Some(vector) => AweVector { vector, usable: true },
        None => AweVector { vector: vec![0.0; emb.dim], usable: false },
    })
}

/// AWE baseline: sense vectors and instance vectors both from context
/// windows; unusable contexts abstain.
pub fn predict_awe(emb: &StaticEmbeddings, inventory: &SenseInventory, instances: &[WsdInstance], window: usize) -> Result<Vec<Option<String>>> {
    let mut sense_vectors: BTreeMap<&str, Vec<SenseVector>> = BTreeMap::new();
    for (lemma, senses) in &inventory.lemmas {
        let mut list = Vec::new();
        for s in senses {
            let mut vecs = Vec::new();
            for ex in &s.examples {
                let a = awe_vector(emb, &ex.tokens, ex.target, window)?;
                if a.usable {
                    vecs.push(a.vector);
                }
            }
            if let Some(m) = mean_vector(&vecs).filter(|m| m.iter().any(|&x| x != 0.0)) {
                list.push(SenseVector { sense_id: s.sense_id.clone(), vector: m, support: vecs.len() });
            }
        }
        sense_vectors.insert(lemma, list);
    }
    instances
        .iter()
        .map(|x| {
            let Some(senses) = sense_vectors.get(x.lemma.as_str()).filter(|s| !s.is_empty()) else {
                return Ok(None);
            };
            let a = awe_vector(emb, &x.tokens, x.target, window)?;
            if !a.usable || a.vector.iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            Ok(Some(senses[nearest_sense(&a.vector, senses)?].sense_id.clone()))
        })
        .collect()
}

/// Micro F1 where `None` is an abstention: precision over answered
/// instances, recall over all instances.
pub fn f1_score<T: PartialEq>(preds: &[Option<T>], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    let answered = preds.iter().filter(|p| p.is_some()).count();
    let correct = preds.iter().zip(golds).filter(|(p, g)| p.as_ref() == Some(*g)).count();
    if correct == 0 {
        return Ok(0.0);
    }
    let p = correct as f64 / answered as f64;
    let r = correct as f64 / golds.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounClassifierConfig {
    pub layers: usize,
    pub heads: usize,
    /// 0 means four times the encoder width.
    pub d_ff: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train the underlying encoder together with the classifier.
    pub finetune_encoder: bool,
    pub pooling: SubwordPooling,
}

impl Default for NounClassifierConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 12,
            d_ff: 3072,
            dropout: 0.1,
            lr: 1e-4,
            epochs: 20,
            batch_size: 16,
            finetune_encoder: false,
            pooling: SubwordPooling::Mean,
        }
    }
}

impl NounClassifierConfig {
    pub fn toy() -> Self {
        Self { layers: 2, heads: 4, d_ff: 0, lr: 1e-3, ..Self::default() }
    }
}

/// Settings for both WSD tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsdConfig {
    pub target: TargetConfig,
    pub awe_window: usize,
    pub noun: NounClassifierConfig,
    /// Noun classifiers trained with different seeds and ensembled.
    pub noun_models: usize,
}

impl Default for WsdConfig {
    fn default() -> Self {
        Self { target: TargetConfig::default(), awe_window: 5, noun: NounClassifierConfig::default(), noun_models: 4 }
    }
}

/// One sentence for the noun classifier: encoder input ids, the id span of
/// every word and the synset index of annotated words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounSentence {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
    pub labels: Vec<Option<usize>>,
}

/// Word-level encoder features `[words × H]`.
pub fn word_features(encoder: &Parameters, s: &NounSentence, pooling: SubwordPooling) -> Result<Vec<f64>> {
    let states = model::encode_tokens(encoder, &s.ids)?;
    let h = encoder.cfg.hidden;
    let mut out = Vec::with_capacity(s.spans.len() * h);
    for &span in &s.spans {
        out.extend(pool_span(&states, h, span, pooling)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NounClassifier {
    pub layers: Vec<LayerParams>,
    pub heads: usize,
    pub dropout: f64,
    pub final_g: Tensor,
    pub final_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub synsets: Vec<String>,
}

impl ParamSet for NounClassifier {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in nn::LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_ln_g".into(), &self.final_g));
        out.push(("final_ln_b".into(), &self.final_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in nn::LAYER_TENSOR_NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_ln_g".into(), &mut self.final_g));
        out.push(("final_ln_b".into(), &mut self.final_b));
        out.push(("out_w".into(), &mut self.out_w));
        out.push(("out_b".into(), &mut self.out_b));
        out
    }
}

/// Forward state of one padded batch of word sequences.
#[derive(Debug, Clone)]
pub struct NounCache {
    pub batch: usize,
    pub seq_len: usize,
    pub stack: StackCache,
    pub hidden: Vec<f64>,
}

impl NounClassifier {
    pub fn init(hidden: usize, cfg: &NounClassifierConfig, synsets: Vec<String>, seed: u64) -> Result<Self> {
        if synsets.is_empty() {
            return Err(Error::InvalidConfig("empty synset vocabulary".into()));
        }
        if cfg.heads == 0 || hidden % cfg.heads != 0 {
            return Err(Error::InvalidConfig(format!("hidden ({hidden}) must be divisible by heads ({})", cfg.heads)));
        }
        let d_ff = if cfg.d_ff == 0 { 4 * hidden } else { cfg.d_ff };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(hidden, d_ff, model::INIT_STD, &mut rng)).collect();
        let out_w = Tensor::normal(&[hidden, synsets.len()], model::INIT_STD, &mut rng);
        let mut c = Self {
            layers,
            heads: cfg.heads,
            dropout: cfg.dropout,
            final_g: Tensor::filled(&[hidden], 1.0),
            final_b: Tensor::zeros(&[hidden]),
            out_b: Tensor::zeros(&[synsets.len()]),
            out_w,
            synsets,
        };
        c.round_to_storage();
        Ok(c)
    }

    pub fn hidden(&self) -> usize {
        self.final_g.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Logits `[batch·seq_len × S]` for padded word features.
    pub fn forward(&self, feats: &[&[f64]], seed: Option<u64>) -> Result<(Vec<f64>, NounCache)> {
        let h = self.hidden();
        let batch = feats.len();
        let seq_len = feats.iter().map(|f| f.len() / h).max().unwrap_or(0);
        let mut x = vec![0.0; batch * seq_len * h];
        let mut mask = vec![false; batch * seq_len];
        for (b, f) in feats.iter().enumerate() {
            if f.len() % h != 0 {
                return Err(Error::Shape(format!("feature length {} not a multiple of {h}", f.len())));
            }
            let n = f.len() / h;
            x[b * seq_len * h..b * seq_len * h + f.len()].copy_from_slice(f);
            mask[b * seq_len..b * seq_len + n].iter_mut().for_each(|m| *m = true);
        }
        let spec = StackSpec {
            batch,
            seq_len,
            heads: self.heads,
            placement: NormPlacement::PreNorm,
            dropout: if seed.is_some() { self.dropout } else { 0.0 },
        };
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let (hidden, stack) = nn::stack_forward(&self.layers, &self.final_g, &self.final_b, x, spec, &mask, rng.as_mut());
        let logits = nn::linear(&hidden, &self.out_w, &self.out_b, batch * seq_len);
        Ok((logits, NounCache { batch, seq_len, stack, hidden }))
    }

    /// Accumulates into `g` and returns the gradient w.r.t. the input
    /// features `[batch·seq_len × H]`.
    pub fn backward(&self, cache: &NounCache, d_logits: &[f64], g: &mut NounClassifier) -> Result<Vec<f64>> {
        let rows = cache.batch * cache.seq_len;
        let d_hidden = nn::linear_backward(&cache.hidden, &self.out_w, d_logits, rows, &mut g.out_w, &mut g.out_b);
        nn::stack_backward(&self.layers, &self.final_g, &cache.stack, &d_hidden, &mut g.layers, &mut g.final_g, &mut g.final_b)
    }

    /// Per-word softmax distributions for one sentence, `[words × S]`.
    pub fn probabilities(&self, feats: &[f64]) -> Result<Vec<f64>> {
        let (mut logits, _) = self.forward(&[feats], None)?;
        for row in logits.chunks_mut(self.synsets.len()) {
            nn::softmax_in_place(row);
        }
        Ok(logits)
    }
}

/// Mean cross-entropy over labeled rows; `labels` is aligned with the
/// padded rows of the batch.
pub fn token_cross_entropy(logits: &[f64], labels: &[Option<usize>], classes: usize) -> Result<(f64, Vec<f64>, usize)> {
    if logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!("{} logits for {} rows × {classes}", logits.len(), labels.len())));
    }
    let n = labels.iter().filter(|l| l.is_some()).count();
    let mut d = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, d, 0));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for (r, l) in labels.iter().enumerate() {
        let Some(y) = *l else { continue };
        if y >= classes {
            return Err(Error::Contract(format!("synset index {y} out of range")));
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let drow = &mut d[r * classes..(r + 1) * classes];
        for (dv, x) in drow.iter_mut().zip(row) {
            *dv = (x - lse).exp() * inv;
        }
        drow[y] -= inv;
    }
    Ok((loss * inv, d, n))
}

fn padded_labels(sents: &[&NounSentence], seq_len: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; sents.len() * seq_len];
    for (b, s) in sents.iter().enumerate() {
        out[b * seq_len..b * seq_len + s.labels.len()].copy_from_slice(&s.labels);
    }
    out
}

/// Spread word-level gradients back over the sub-word positions they pooled.
fn scatter_to_subwords(d_words: &[f64], spans: &[(usize, usize)], seq: usize, h: usize, pooling: SubwordPooling) -> Vec<f64> {
    let mut d = vec![0.0; seq * h];
    for (w, &(s, e)) in spans.iter().enumerate() {
        let end = if pooling == SubwordPooling::First { s + 1 } else { e };
        let inv = 1.0 / (end - s) as f64;
        for r in s..end {
            for j in 0..h {
                d[r * h + j] += d_words[w * h + j] * inv;
            }
        }
    }
    d
}

fn shuffle_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Train one noun classifier. The encoder is returned updated only when
/// `cfg.finetune_encoder` is set.
pub fn train_noun_classifier(
    encoder: &Parameters,
    sentences: &[NounSentence],
    synsets: Vec<String>,
    cfg: &NounClassifierConfig,
    seed: u64,
) -> Result<(NounClassifier, Parameters)> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let h = encoder.cfg.hidden;
    let mut clf = NounClassifier::init(h, cfg, synsets, seed)?;
    let mut enc = encoder.clone();
    let adam = AdamConfig { warmup_steps: 0, total_steps: 1, accumulation: 1, weight_decay: 0.0, ..AdamConfig::default() };
    let mut clf_state = AdamState::new(&clf);
    let mut enc_state = AdamState::new(&enc);
    let mut frozen: Vec<Vec<f64>> = if cfg.finetune_encoder {
        Vec::new()
    } else {
        sentences.par_iter().map(|s| word_features(&enc, s, cfg.pooling)).collect::<Result<_>>()?
    };
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            step += 1;
            let sents: Vec<&NounSentence> = chunk.iter().map(|&i| &sentences[i]).collect();
            let drop_seed = shuffle_seed(seed ^ 0x57, step);
            let mut enc_caches: Vec<(ActivationCache, usize)> = Vec::new();
            let feats: Vec<Vec<f64>> = if cfg.finetune_encoder {
                let ids: Vec<&[u32]> = sents.iter().map(|s| s.ids.as_slice()).collect();
                let batch = MaskedBatch::unlabeled(&ids);
                let cache = model::forward_hidden(&enc, &batch, Mode::Train { seed: drop_seed ^ 1 })?;
                let t = batch.seq_len;
                let f = sents
                    .iter()
                    .enumerate()
                    .map(|(b, s)| {
                        let states = &cache.hidden[b * t * h..(b + 1) * t * h];
                        let mut out = Vec::with_capacity(s.spans.len() * h);
                        for &span in &s.spans {
                            out.extend(pool_span(states, h, span, cfg.pooling)?);
                        }
                        Ok(out)
                    })
                    .collect::<Result<_>>()?;
                enc_caches.push((cache, t));
                f
            } else {
                chunk.iter().map(|&i| std::mem::take(&mut frozen[i])).collect()
            };
            let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
            let (logits, cache) = clf.forward(&refs, Some(drop_seed))?;
            let labels = padded_labels(&sents, cache.seq_len);
            let (loss, d_logits, n) = token_cross_entropy(&logits, &labels, clf.synsets.len())?;
            if !cfg.finetune_encoder {
                for (&i, f) in chunk.iter().zip(feats) {
                    frozen[i] = f;
                }
            }
            if n == 0 {
                continue;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut g = clf.zeros_like();
            let d_feats = clf.backward(&cache, &d_logits, &mut g)?;
            if let Some((enc_cache, t)) = enc_caches.pop() {
                let mut d_hidden = Vec::with_capacity(sents.len() * t * h);
                for (b, s) in sents.iter().enumerate() {
                    let dw = &d_feats[b * cache.seq_len * h..(b + 1) * cache.seq_len * h];
                    d_hidden.extend(scatter_to_subwords(dw, &s.spans, t, h, cfg.pooling));
                }
                let mut ge = enc.zeros_like();
                model::backward_hidden(&enc, &enc_cache, &d_hidden, &mut ge)?;
                let ge: Vec<Tensor> = ge.tensors().into_iter().map(|(_, t)| t.clone()).collect();
                adam_step(&mut enc, &ge, &mut enc_state, &adam, cfg.lr)?;
            }
            let g: Vec<Tensor> = g.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            adam_step(&mut clf, &g, &mut clf_state, &adam, cfg.lr)?;
        }
    }
    Ok((clf, enc))
}

/// Argmax of the mean softmax of `models` for each word of `feats`
/// (`[words × H]`).
pub fn ensemble_predict(models: &[&NounClassifier], feats: &[f64]) -> Result<Vec<usize>> {
    let first = models.first().ok_or_else(|| Error::Contract("empty ensemble".into()))?;
    let s = first.synsets.len();
    let mut mean: Option<Vec<f64>> = None;
    for m in models {
        if m.synsets != first.synsets {
            return Err(Error::VocabMismatch("ensemble members use different synset vocabularies".into()));
        }
        let p = m.probabilities(feats)?;
        match &mut mean {
            None => mean = Some(p),
            Some(acc) => nn::add_assign(acc, &p),
        }
    }
    let mut mean = mean.expect("non-empty");
    let inv = 1.0 / models.len() as f64;
    mean.iter_mut().for_each(|x| *x *= inv);
    Ok(mean.chunks(s).map(crate::finetune::argmax).collect())
}

/// Token-level F1 over annotated words of `sentences` for an ensemble.
/// `features[i]` must be the word features of `sentences[i]` under the
/// encoder each model was trained with.
pub fn noun_f1(models: &[&NounClassifier], sentences: &[NounSentence], features: &[Vec<f64>]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for (s, f) in sentences.iter().zip(features) {
        let p = ensemble_predict(models, f)?;
        for (w, l) in s.labels.iter().enumerate() {
            if let Some(y) = l {
                preds.push(Some(p[w]));
                golds.push(*y);
            }
        }
    }
    f1_score(&preds, &golds)
}

/// Individual and ensemble token F1 for models that may each carry their
/// own encoder (when the encoder was trained jointly).
pub fn noun_ensemble_eval(models: &[(NounClassifier, Parameters)], sentences: &[NounSentence], pooling: SubwordPooling) -> Result<(Vec<f64>, f64)> {
    let first = models.first().ok_or_else(|| Error::Contract("empty ensemble".into()))?;
    let s = first.0.synsets.len();
    let mut golds = Vec::new();
    for sent in sentences {
        golds.extend(sent.labels.iter().flatten().copied());
    }
    let mut mean_probs: Vec<Vec<f64>> = Vec::new();
    let mut individual = Vec::with_capacity(models.len());
    for (clf, enc) in models {
        if clf.synsets != first.0.synsets {
            return Err(Error::VocabMismatch("ensemble members use different synset vocabularies".into()));
        }
        let mut preds = Vec::new();
        for (i, sent) in sentences.iter().enumerate() {
            let probs = clf.probabilities(&word_features(enc, sent, pooling)?)?;
            for (w, l) in sent.labels.iter().enumerate() {
                if l.is_some() {
                    preds.push(Some(crate::finetune::argmax(&probs[w * s..(w + 1) * s])));
                }
            }
            if mean_probs.len() <= i {
                mean_probs.push(probs);
            } else {
                nn::add_assign(&mut mean_probs[i], &probs);
            }
        }
        individual.push(f1_score(&preds, &golds)?);
    }
    let mut preds = Vec::new();
    for (sent, probs) in sentences.iter().zip(&mean_probs) {
        for (w, l) in sent.labels.iter().enumerate() {
            if l.is_some() {
                preds.push(Some(crate::finetune::argmax(&probs[w * s..(w + 1) * s])));
            }
        }
    }
    Ok((individual, f1_score(&preds, &golds)?))
}

/// Mean and sample standard deviation of individual scores plus the
/// ensemble score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub mean: f64,
    pub std: f64,
    pub ensemble: f64,
}

pub fn summarize(individual: &[f64], ensemble: f64) -> EnsembleSummary {
    let n = individual.len() as f64;
    let mean = individual.iter().sum::<f64>() / n.max(1.0);
    let var = if individual.len() > 1 {
        individual.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    EnsembleSummary { mean, std: var.sqrt(), ensemble }
}

/// Group instances sharing a sentence into classifier inputs. Returns the
/// sentences and the synset vocabulary (sorted); instances whose synset
/// is missing from `synsets`, when given, stay unlabeled.
pub fn noun_sentences(
    tokenizer: &Tokenizer,
    instances: &[WsdInstance],
    synsets: Option<&[String]>,
    max_positions: usize,
) -> Result<(Vec<NounSentence>, Vec<String>)> {
    let vocab: Vec<String> = match synsets {
        Some(s) => s.to_vec(),
        None => {
            let mut v: Vec<String> = instances.iter().map(|x| x.gold.clone()).collect();
            v.sort();
            v.dedup();
            v
        }
    };
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut groups: BTreeMap<Vec<String>, Vec<&WsdInstance>> = BTreeMap::new();
    let mut first_seen: Vec<Vec<String>> = Vec::new();
    for x in instances {
        let e = groups.entry(x.tokens.clone()).or_default();
        if e.is_empty() {
            first_seen.push(x.tokens.clone());
        }
        e.push(x);
    }
    let mut out = Vec::with_capacity(first_seen.len());
    for tokens in first_seen {
        let (ids, spans) = encode_with_spans(tokenizer, &tokens, max_positions)?;
        let mut labels = vec![None; tokens.len()];
        for x in &groups[&tokens] {
            labels[x.target] = index.get(x.gold.as_str()).copied();
        }
        out.push(NounSentence { ids, spans, labels });
    }
    Ok((out, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(id: &str, v: Vec<f64>) -> SenseVector {
        SenseVector { sense_id: id.into(), vector: v, support: 1 }
    }

    #[test]
    fn nearest_basic() {
        let senses = vec![sv("a", vec![1.0, 0.0]), sv("b", vec![0.0, 1.0]), sv("c", vec![1.0, 1.0])];
        assert_eq!(nearest_sense(&[0.0, 1.0], &senses).unwrap(), 1);
        assert_eq!(nearest_sense(&[0.0, 10.0], &senses).unwrap(), 1);
        let tied = vec![sv("a", vec![1.0, 0.0]), sv("b", vec![2.0, 0.0])];
        assert_eq!(nearest_sense(&[3.0, 0.0], &tied).unwrap(), 0);
        assert!(nearest_sense(&[0.0, 0.0], &senses).is_err());
        assert!(nearest_sense(&[1.0, 0.0], &[]).is_err());
    }

    #[test]
    fn awe_windows() {
        let mut emb = StaticEmbeddings { dim: 2, vectors: HashMap::new() };
        for (w, v) in [("a", [1.0, 0.0]), ("b", [0.0, 2.0]), ("c", [3.0, 3.0])] {
            emb.vectors.insert(w.into(), v.to_vec());
        }
        let toks: Vec<String> = ["a", "x", "b", "c"].iter().map(|s| s.to_string()).collect();
        let a = awe_vector(&emb, &toks, 1, 5).unwrap();
        // (a + b + c) / 3, by hand
        for (x, want) in a.vector.iter().zip([4.0 / 3.0, 5.0 / 3.0]) {
            assert!((x - want).abs() < 1e-15);
        }
        let a = awe_vector(&emb, &toks, 0, 1).unwrap();
        assert!(!a.usable);
        assert_eq!(a.vector, vec![0.0, 0.0]);
        let a = awe_vector(&emb, &toks, 0, 2).unwrap();
        assert_eq!(a.vector, vec![0.0, 2.0]);
        assert!(awe_vector(&emb, &toks, 0, 0).is_err());
    }

    #[test]
    fn f1_examples() {
        let g = ["a", "b", "c", "d"];
        assert_eq!(f1_score(&[Some("a"), Some("b"), Some("c"), Some("d")], &g).unwrap(), 1.0);
        assert_eq!(f1_score(&[Some("a"), Some("b"), Some("c"), Some("x")], &g).unwrap(), 0.75);
        // 2 correct of 3 answered, 4 total: P = 2/3, R = 1/2
        let f = f1_score(&[Some("a"), Some("b"), Some("x"), None], &g).unwrap();
        assert!((f - 4.0 / 7.0).abs() < 1e-15);
        assert!(f1_score(&[Some("a")], &g).is_err());
    }

    #[test]
    fn ensemble_hand_trace() {
        // two members disagreeing: means [0.45, 0.55] → class 1
        let p1 = [0.7, 0.3];
        let p2 = [0.2, 0.8];
        let mean: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(crate::finetune::argmax(&mean), 1);
    }

    #[test]
    fn summary_stats() {
        let s = summarize(&[0.5, 0.7], 0.8);
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert!((s.std - (0.02f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn inventory_round_trip() {
        let text = "aller\ts1\tse déplacer\til va à paris\t1\naller\ts1\tse déplacer\tnous allons loin\t1\naller\ts2\tfonctionner\tça va bien\t1\n";
        let inv = SenseInventory::parse(text, "inv").unwrap();
        let senses = inv.senses("aller").unwrap();
        assert_eq!(senses.len(), 2);
        assert_eq!(senses[0].examples.len(), 2);
        assert_eq!(SenseInventory::parse(&inv.to_tsv(), "x").unwrap(), inv);
        let err = SenseInventory::parse("a\tb\tc\n", "inv.tsv").unwrap_err();
        assert!(err.to_string().contains("inv.tsv:1"));
    }

    #[test]
    fn instance_parsing() {
        let xs = parse_instances("il va à paris\t1\taller\ts1\n", "d").unwrap();
        assert_eq!(xs[0].target, 1);
        assert_eq!(instances_to_tsv(&xs), "il va à paris\t1\taller\ts1\n");
        assert!(parse_instances("il va\t5\taller\ts1\n", "d").is_err());
    }
}
