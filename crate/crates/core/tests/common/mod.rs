//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the code under test except to
//! read plain data back out.

#![allow(dead_code)]

use std::collections::BTreeMap;

use flue_core::model::ModelConfig;
use flue_core::nn::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of non-overlapping left-to-right occurrences of `(a, b)` in `syms`.
fn occurrences(syms: &[String], a: &str, b: &str) -> u64 {
    let mut n = 0;
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            n += 1;
            i += 2;
        } else {
            i += 1;
        }
    }
    n
}

/// Brute-force BPE: recount every pair from scratch at each step.
pub fn brute_force_bpe(words: &BTreeMap<String, u64>, num_merges: usize) -> Vec<(String, String)> {
    let mut segs: Vec<(Vec<String>, u64)> = words
        .iter()
        .map(|(w, &f)| {
            let chars: Vec<char> = w.chars().collect();
            let syms = chars
                .iter()
                .enumerate()
                .map(|(i, c)| if i + 1 == chars.len() { format!("{c}</w>") } else { c.to_string() })
                .collect();
            (syms, f)
        })
        .collect();
    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut candidates: Vec<(String, String)> = Vec::new();
        for (syms, _) in &segs {
            for w in syms.windows(2) {
                candidates.push((w[0].clone(), w[1].clone()));
            }
        }
        candidates.sort();
        candidates.dedup();
        let mut best: Option<((String, String), u64)> = None;
        for (a, b) in candidates {
            let count: u64 = segs.iter().map(|(s, f)| occurrences(s, &a, &b) * f).sum();
            // candidates are sorted, so strict > keeps the smallest pair on ties
            if best.as_ref().map_or(true, |(_, c)| count > *c) {
                best = Some(((a, b), count));
            }
        }
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        for (syms, _) in segs.iter_mut() {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = out;
        }
        merges.push((a, b));
    }
    merges
}

pub const ALPHABET: &[char] = &['a', 'b', 'c', 'd', 'e', 'é', 'l', 'o', 'r', 's', 't', 'u', 'x'];

/// Random word-frequency table with at most `max_words` distinct words
/// over a small alphabet, so that ties and repeated letters are common.
pub fn random_word_counts(seed: u64, max_words: usize) -> BTreeMap<String, u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = &ALPHABET[..rng.gen_range(3..=ALPHABET.len())];
    let n = rng.gen_range(1..=max_words);
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = rng.gen_range(1..=8);
        let w: String = (0..len).map(|_| alpha[rng.gen_range(0..alpha.len())]).collect();
        *out.entry(w).or_insert(0) += rng.gen_range(1..=6);
    }
    out
}

/// Parameter count from the architecture description alone: embeddings,
/// per-layer attention, feed-forward and norms, final norm and MLM head.
pub fn enumerate_parameters(cfg: &ModelConfig) -> usize {
    let (v, h, f, p) = (cfg.vocab_size, cfg.hidden, cfg.d_ff, cfg.max_positions);
    let mut shapes: Vec<Vec<usize>> = vec![vec![v, h], vec![p, h]];
    for _ in 0..cfg.layers {
        for _ in 0..4 {
            shapes.push(vec![h, h]); // q, k, v, output projections
            shapes.push(vec![h]);
        }
        shapes.extend([vec![h], vec![h], vec![h], vec![h]]); // two norms
        shapes.extend([vec![h, f], vec![f], vec![f, h], vec![h]]);
    }
    shapes.extend([vec![h], vec![h], vec![v]]);
    if !cfg.tie_mlm_head {
        shapes.push(vec![h, v]);
    }
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Result of a finite-difference check of one tensor.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub tensor: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor on the denominator: entries whose true
/// gradient is below `floor` are compared in absolute terms against it.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference check of `analytic` against `loss` for every tensor of
/// `params`. Per tensor, the `top` entries with the largest analytic
/// gradient plus `random` uniformly chosen entries are perturbed.
pub fn finite_difference<P: ParamSet + Clone>(
    params: &P,
    analytic: &[Tensor],
    loss: impl Fn(&P) -> f64,
    top: usize,
    random: usize,
    seed: u64,
) -> Vec<FdReport> {
    const EPS: f64 = 1e-5;
    const FLOOR: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), analytic.len(), "gradient list does not match parameter list");
    let mut reports = Vec::new();
    let mut work = params.clone();
    for (ti, name) in names.iter().enumerate() {
        let g = &analytic[ti];
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g.data[b].abs().total_cmp(&g.data[a].abs()));
        let mut picks: Vec<usize> = idx.into_iter().take(top).collect();
        for _ in 0..random {
            picks.push(rng.gen_range(0..g.len()));
        }
        picks.sort_unstable();
        picks.dedup();
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = work.tensors()[ti].1.data[i];
            work.tensors_mut()[ti].1.data[i] = orig + EPS;
            let up = loss(&work);
            work.tensors_mut()[ti].1.data[i] = orig - EPS;
            let down = loss(&work);
            work.tensors_mut()[ti].1.data[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(g.data[i], numeric, FLOOR));
        }
        reports.push(FdReport { tensor: name.clone(), checked: picks.len(), max_rel_err: worst });
    }
    reports
}

pub fn grads_of<P: ParamSet>(g: &P) -> Vec<Tensor> {
    g.tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Exhaustive nearest neighbour by cosine: the first maximum wins.
pub fn brute_nearest(query: &[f64], candidates: &[Vec<f64>]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let sim = query.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (qn * norm(c));
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    best
}

/// Add N(0, `std`²) noise to every entry so biases and norm parameters
/// are away from their initial values.
pub fn jitter<P: ParamSet>(p: &mut P, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += std * (rng.gen::<f64>() * 2.0 - 1.0) * 1.732_050_807_568_877_2;
        }
    }
}

/// Encoder and head viewed as one parameter set.
#[derive(Debug, Clone)]
pub struct Joint(pub flue_core::finetune::Classifier);

impl ParamSet for Joint {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.0.encoder.tensors();
        v.extend(self.0.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let Joint(c) = self;
        let mut v = c.encoder.tensors_mut();
        v.extend(c.head.tensors_mut());
        v
    }
}

pub mod fd {
    use super::*;
    use flue_core::finetune::{Classifier, Encoded, HeadConfig, HeadParams};
    use flue_core::mlm::{MaskedBatch, MaskedRow, IGNORE};
    use flue_core::model::{self, Mode, Parameters};
    use flue_core::nn::NormPlacement;
    use flue_core::wsd::{token_cross_entropy, NounClassifier, NounClassifierConfig};

    pub const VOCAB: usize = 40;

    /// The toy encoder (2 layers, width 64) with a short position table.
    pub fn toy_config(placement: NormPlacement, tied: bool) -> ModelConfig {
        ModelConfig {
            max_positions: 16,
            tie_mlm_head: tied,
            norm_placement: placement,
            ..ModelConfig::toy(VOCAB)
        }
    }

    fn toy_params(placement: NormPlacement, tied: bool, seed: u64) -> Parameters {
        let mut p = Parameters::init(&toy_config(placement, tied), seed).unwrap();
        jitter(&mut p, 0.05, seed ^ 0xA5);
        p
    }

    /// Two rows of different length; every other real position labeled.
    fn mlm_batch() -> MaskedBatch {
        let rows = [vec![2u32, 7, 9, 4, 11, 30, 3], vec![2u32, 5, 4, 17, 3]];
        let masked: Vec<MaskedRow> = rows
            .iter()
            .map(|r| MaskedRow {
                inputs: r.clone(),
                labels: r.iter().enumerate().map(|(i, &t)| if i % 2 == 1 { ((t as usize * 3) % VOCAB) as i64 } else { IGNORE }).collect(),
            })
            .collect();
        MaskedBatch::from_rows(&masked)
    }

    pub fn mlm(placement: NormPlacement, tied: bool, mode: Mode) -> Vec<FdReport> {
        let params = toy_params(placement, tied, 11);
        let batch = mlm_batch();
        let loss = |p: &Parameters| {
            let (logits, _) = model::forward(p, &batch, mode).unwrap();
            model::mlm_loss(&logits, &batch.labels, VOCAB).unwrap().0
        };
        let (logits, cache) = model::forward(&params, &batch, mode).unwrap();
        let (_, d) = model::mlm_loss(&logits, &batch.labels, VOCAB).unwrap();
        let g = model::backward(&params, &cache, &d).unwrap();
        finite_difference(&params, &grads_of(&g), loss, 4, 4, 1)
    }

    pub fn classifier(head: HeadConfig, dropout_seed: Option<u64>) -> Vec<FdReport> {
        let encoder = toy_params(NormPlacement::PreNorm, true, 12);
        let mut head = HeadParams::init(&head, 64, 3).unwrap();
        jitter(&mut head, 0.05, 4);
        let joint = Joint(Classifier { encoder, head });
        let examples = vec![
            Encoded { ids: vec![2, 8, 9, 10, 3], label: 0 },
            Encoded { ids: vec![2, 12, 3], label: 2 },
            Encoded { ids: vec![2, 20, 21, 22, 23, 3], label: 1 },
        ];
        let loss = |j: &Joint| j.0.loss_and_grads(&examples, dropout_seed).unwrap().0;
        let (_, ge, gh) = joint.0.loss_and_grads(&examples, dropout_seed).unwrap();
        let mut grads = grads_of(&ge);
        grads.extend(grads_of(&gh));
        finite_difference(&joint, &grads, loss, 4, 4, 2)
    }

    pub fn noun_stack(dropout_seed: Option<u64>) -> Vec<FdReport> {
        let cfg = NounClassifierConfig { d_ff: 128, ..NounClassifierConfig::toy() };
        let synsets: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let mut clf = NounClassifier::init(32, &cfg, synsets, 5).unwrap();
        jitter(&mut clf, 0.05, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats: Vec<Vec<f64>> = [4usize, 2].iter().map(|&n| (0..n * 32).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let labels = vec![Some(1), None, Some(4), Some(0), Some(2), Some(3), None, None];
        let loss = |c: &NounClassifier| {
            let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
            let (logits, _) = c.forward(&refs, dropout_seed).unwrap();
            token_cross_entropy(&logits, &labels, 5).unwrap().0
        };
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let (logits, cache) = clf.forward(&refs, dropout_seed).unwrap();
        let (_, d, _) = token_cross_entropy(&logits, &labels, 5).unwrap();
        let mut g = clf.zeros_like();
        clf.backward(&cache, &d, &mut g).unwrap();
        finite_difference(&clf, &grads_of(&g), loss, 4, 4, 3)
    }

    /// Every suite, labeled.
    pub fn all() -> Vec<(String, Vec<FdReport>)> {
        vec![
            ("mlm pre-norm tied".into(), mlm(NormPlacement::PreNorm, true, Mode::Eval)),
            ("mlm post-norm untied".into(), mlm(NormPlacement::PostNorm, false, Mode::Eval)),
            ("mlm dropout".into(), mlm(NormPlacement::PreNorm, true, Mode::Train { seed: 9 })),
            ("deep head".into(), classifier(HeadConfig { dropout: 0.0, ..HeadConfig::deep(3) }, None)),
            ("deep head dropout".into(), classifier(HeadConfig::deep(3), Some(13))),
            ("shallow head".into(), classifier(HeadConfig { dropout: 0.0, ..HeadConfig::shallow(3) }, None)),
            ("noun classifier".into(), noun_stack(None)),
            ("noun classifier dropout".into(), noun_stack(Some(21))),
        ]
    }
}

pub mod memo {
    use flue_core::bpe::{learn_bpe, Tokenizer};
    use flue_core::corpus::{prepare_text, CleaningConfig};
    use flue_core::mlm::pack_sequences;
    use flue_core::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 100 fixed synthetic sentences, a tokenizer learned on them and the
    /// packed id sequences.
    pub fn hundred_sentences(merges: usize) -> (Tokenizer, Vec<Vec<u32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2020);
        let cfg = CleaningConfig::default();
        let sents: Vec<Vec<String>> = (0..100).map(|_| prepare_text(&synth::sentence(&mut rng), &cfg)).collect();
        let (table, vocab) = learn_bpe(&sents, merges).unwrap();
        let tok = Tokenizer::new(vocab, table).unwrap();
        let seqs = pack_sequences(sents.iter().map(|s| tok.encode_sequence(s).ids), 128).unwrap();
        (tok, seqs)
    }
}

pub mod marker {
    use flue_core::bpe::{learn_bpe, Tokenizer};
    use flue_core::finetune::{encode_examples, Encoded};
    use flue_core::synth;

    /// Marker-presence task encoded with a tokenizer learned on its own
    /// training text: (tokenizer, train, test).
    pub fn encoded(seed: u64, n_train: usize, n_test: usize) -> (Tokenizer, Vec<Encoded>, Vec<Encoded>) {
        let data = synth::marker_task(seed, n_train, n_test, "zorglub");
        let corpus: Vec<Vec<String>> = data.train.iter().map(|e| e.text_a.clone()).collect();
        let (table, vocab) = learn_bpe(&corpus, 300).unwrap();
        let tok = Tokenizer::new(vocab, table).unwrap();
        let train = encode_examples(&data.train, &tok, 128, 2).unwrap();
        let test = encode_examples(&data.test, &tok, 128, 2).unwrap();
        (tok, train, test)
    }
}

pub mod nouns {
    use flue_core::bpe::{learn_bpe, Tokenizer};
    use flue_core::model::{ModelConfig, Parameters};
    use flue_core::synth;
    use flue_core::wsd::{noun_sentences, NounSentence};

    pub struct NounSetup {
        pub tokenizer: Tokenizer,
        pub encoder: Parameters,
        pub train: Vec<NounSentence>,
        pub test: Vec<NounSentence>,
        pub synsets: Vec<String>,
    }

    /// Synthetic noun task over a random toy encoder; test sentences are
    /// drawn with a different seed.
    pub fn setup(n_train: usize, n_test: usize) -> NounSetup {
        let train_inst = synth::noun_wsd(1, n_train);
        let test_inst = synth::noun_wsd(2, n_test);
        let corpus: Vec<Vec<String>> = train_inst.iter().map(|x| x.tokens.clone()).collect();
        let (table, vocab) = learn_bpe(&corpus, 100).unwrap();
        let tokenizer = Tokenizer::new(vocab, table).unwrap();
        let encoder = Parameters::init(&ModelConfig::toy(tokenizer.vocab.len()), 8).unwrap();
        let (train, synsets) = noun_sentences(&tokenizer, &train_inst, None, 128).unwrap();
        let (test, _) = noun_sentences(&tokenizer, &test_inst, Some(&synsets), 128).unwrap();
        NounSetup { tokenizer, encoder, train, test, synsets }
    }
}
