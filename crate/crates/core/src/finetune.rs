//! Sentence and sentence-pair classification: input layout, the two head
//! shapes, full-network fine-tuning with a learning-rate grid, accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{Tokenizer, BOS, EOS};
use crate::checkpoint::Checkpoint;
use crate::mlm::MaskedBatch;
use crate::model::{self, Mode, Parameters};
use crate::nn::{self, add_col_sums, add_matmul_at, matmul_bt, ParamSet, Tensor};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::{Error, Result};

/// Full-scale split sizes (train, dev, test) used to validate real data.
pub const CLS_SIZES: (usize, usize, usize) = (2_000, 0, 2_000);
pub const CLS_DVD_SIZES: (usize, usize, usize) = (1_999, 0, 2_000);
pub const CLS_MUSIC_SIZES: (usize, usize, usize) = (1_998, 0, 2_000);
pub const PAWSX_SIZES: (usize, usize, usize) = (49_401, 1_992, 1_985);
pub const XNLI_SIZES: (usize, usize, usize) = (392_702, 2_490, 5_010);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub text_a: Vec<String>,
    pub text_b: Option<Vec<String>>,
    pub label: usize,
}

/// Train/dev/test splits of one task. `dev` is empty when the task has no
/// official development set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// dropout, linear H→H, tanh, dropout, linear H→C
    Deep,
    /// dropout, linear H→C
    Shallow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub dropout: f64,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn deep(num_classes: usize) -> Self {
        Self { kind: HeadKind::Deep, dropout: 0.1, num_classes }
    }

    pub fn shallow(num_classes: usize) -> Self {
        Self { kind: HeadKind::Shallow, dropout: 0.1, num_classes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValPolicy {
    /// Hold out a random 20% of the training set.
    Split20,
    /// Use the task's development set.
    DevSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_policy: ValPolicy,
    pub max_len: usize,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-5, 5e-5, 1e-6, 5e-6],
            epochs: 30,
            batch_size: 8,
            val_policy: ValPolicy::Split20,
            max_len: 128,
        }
    }
}

impl GridSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() {
            return Err(Error::InvalidConfig("learning_rates must not be empty".into()));
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !(lr.is_finite() && **lr >= 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {lr}")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.max_len < 4 {
            return Err(Error::InvalidConfig(format!("max_len must be at least 4, got {}", self.max_len)));
        }
        Ok(())
    }
}

/// Lay out `BOS a EOS` or `BOS a EOS b EOS`, trimming the longer segment
/// (ties trim `a`) one id at a time until the whole fits in `max_len`.
pub fn build_input_ids(a: &[u32], b: Option<&[u32]>, max_len: usize) -> Vec<u32> {
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len.saturating_sub(specials);
    let (mut na, mut nb) = (a.len(), b.map_or(0, |b| b.len()));
    while na + nb > budget {
        if na >= nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(na + nb + specials);
    ids.push(BOS);
    ids.extend_from_slice(&a[..na]);
    ids.push(EOS);
    if let Some(b) = b {
        ids.extend_from_slice(&b[..nb]);
        ids.push(EOS);
    }
    ids
}

pub fn build_input(example: &TaskExample, tokenizer: &Tokenizer, max_len: usize) -> Vec<u32> {
    let a = tokenizer.encode_sequence(&example.text_a).ids;
    let b = example.text_b.as_ref().map(|b| tokenizer.encode_sequence(b).ids);
    build_input_ids(&a, b.as_deref(), max_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub kind: HeadKind,
    pub dropout: f64,
    /// Deep head only: `[H × H]` and `[H]`.
    pub dense_w: Option<Tensor>,
    pub dense_b: Option<Tensor>,
    /// `[H × C]` and `[C]`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl HeadParams {
    pub fn init(cfg: &HeadConfig, hidden: usize, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("a classifier needs at least 2 classes, got {}", cfg.num_classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let deep = cfg.kind == HeadKind::Deep;
        let dense_w = deep.then(|| Tensor::normal(&[hidden, hidden], model::INIT_STD, &mut rng));
        let mut p = Self {
            kind: cfg.kind,
            dropout: cfg.dropout,
            dense_w,
            dense_b: deep.then(|| Tensor::zeros(&[hidden])),
            out_w: Tensor::normal(&[hidden, cfg.num_classes], model::INIT_STD, &mut rng),
            out_b: Tensor::zeros(&[cfg.num_classes]),
        };
        p.round_to_storage();
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.out_w.shape[0]
    }

    pub fn num_classes(&self) -> usize {
        self.out_w.shape[1]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }
}

impl ParamSet for HeadParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let (Some(w), Some(b)) = (&self.dense_w, &self.dense_b) {
            out.push(("head.dense_w".to_string(), w));
            out.push(("head.dense_b".to_string(), b));
        }
        out.push(("head.out_w".to_string(), &self.out_w));
        out.push(("head.out_b".to_string(), &self.out_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let (Some(w), Some(b)) = (&mut self.dense_w, &mut self.dense_b) {
            out.push(("head.dense_w".to_string(), w));
            out.push(("head.dense_b".to_string(), b));
        }
        out.push(("head.out_w".to_string(), &mut self.out_w));
        out.push(("head.out_b".to_string(), &mut self.out_b));
        out
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub rows: usize,
    pub drop_in: Option<Vec<f64>>,
    pub x: Vec<f64>,
    /// Deep head: tanh output before and after the second dropout.
    pub act: Vec<f64>,
    pub drop_mid: Option<Vec<f64>>,
    pub z: Vec<f64>,
}

/// Class logits `[rows × C]` from pooled states `[rows × H]`. Dropout is
/// active when `rng` is given.
pub fn head_forward(p: &HeadParams, pooled: &[f64], rows: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, HeadCache)> {
    let h = p.hidden();
    if pooled.len() != rows * h {
        return Err(Error::Shape(format!("pooled has {} values, expected {rows}×{h}", pooled.len())));
    }
    let rate = if rng.is_some() { p.dropout } else { 0.0 };
    let drop_in = nn::dropout_mask(pooled.len(), rate, rng.as_deref_mut());
    let mut x = pooled.to_vec();
    nn::apply_mask(&mut x, &drop_in);
    let (act, drop_mid, z) = match (&p.dense_w, &p.dense_b) {
        (Some(w), Some(b)) => {
            let act: Vec<f64> = nn::linear(&x, w, b, rows).into_iter().map(f64::tanh).collect();
            let drop_mid = nn::dropout_mask(act.len(), rate, rng.as_deref_mut());
            let mut z = act.clone();
            nn::apply_mask(&mut z, &drop_mid);
            (act, drop_mid, z)
        }
        _ => (Vec::new(), None, x.clone()),
    };
    let logits = nn::linear(&z, &p.out_w, &p.out_b, rows);
    Ok((logits, HeadCache { rows, drop_in, x, act, drop_mid, z }))
}

/// Accumulate head gradients into `g`; returns the gradient w.r.t. the
/// pooled input.
pub fn head_backward(p: &HeadParams, c: &HeadCache, d_logits: &[f64], g: &mut HeadParams) -> Result<Vec<f64>> {
    let (h, k) = (p.hidden(), p.num_classes());
    if d_logits.len() != c.rows * k {
        return Err(Error::Shape(format!("d_logits has {} values, expected {}×{k}", d_logits.len(), c.rows)));
    }
    add_matmul_at(&mut g.out_w.data, &c.z, d_logits, c.rows, h, k);
    add_col_sums(&mut g.out_b.data, d_logits);
    let mut d = matmul_bt(d_logits, &p.out_w.data, c.rows, k, h);
    if let (Some(w), Some(gw), Some(gb)) = (&p.dense_w, g.dense_w.as_mut(), g.dense_b.as_mut()) {
        nn::apply_mask(&mut d, &c.drop_mid);
        for (dv, a) in d.iter_mut().zip(&c.act) {
            *dv *= 1.0 - a * a;
        }
        add_matmul_at(&mut gw.data, &c.x, &d, c.rows, h, h);
        add_col_sums(&mut gb.data, &d);
        d = matmul_bt(&d, &w.data, c.rows, h, h);
    }
    nn::apply_mask(&mut d, &c.drop_in);
    Ok(d)
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::Shape(format!("{} logits for {} labels × {classes}", logits.len(), labels.len())));
    }
    let n = labels.len() as f64;
    let mut d = logits.to_vec();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} out of range for {classes} classes")));
        }
        let row = &mut d[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    Ok((loss / n, d))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// An encoded example: input ids and class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub label: usize,
}

/// Encoder plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Parameters,
    pub head: HeadParams,
}

/// BOS-position states of each row.
fn pool_bos(hidden: &[f64], batch: usize, seq_len: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * h);
    for r in 0..batch {
        out.extend_from_slice(&hidden[r * seq_len * h..r * seq_len * h + h]);
    }
    out
}

impl Classifier {
    pub fn logits(&self, ids: &[&[u32]]) -> Result<Vec<f64>> {
        let batch = MaskedBatch::unlabeled(ids);
        let cache = model::forward_hidden(&self.encoder, &batch, Mode::Eval)?;
        let pooled = pool_bos(&cache.hidden, batch.batch, batch.seq_len, self.encoder.cfg.hidden);
        Ok(head_forward(&self.head, &pooled, batch.batch, None)?.0)
    }

    pub fn predict(&self, examples: &[Encoded], batch_size: usize) -> Result<Vec<usize>> {
        let k = self.head.num_classes();
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let ids: Vec<&[u32]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
            let logits = self.logits(&ids)?;
            out.extend(logits.chunks(k).map(argmax));
        }
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[Encoded], batch_size: usize) -> Result<f64> {
        let preds = self.predict(examples, batch_size)?;
        let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
        accuracy(&preds, &golds)
    }

    /// Accuracy and mean cross-entropy.
    pub fn evaluate_with_loss(&self, examples: &[Encoded], batch_size: usize) -> Result<(f64, f64)> {
        let k = self.head.num_classes();
        let mut preds = Vec::with_capacity(examples.len());
        let mut loss = 0.0;
        for chunk in examples.chunks(batch_size.max(1)) {
            let ids: Vec<&[u32]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let logits = self.logits(&ids)?;
            loss += softmax_cross_entropy(&logits, &labels, k)?.0 * chunk.len() as f64;
            preds.extend(logits.chunks(k).map(argmax));
        }
        let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
        Ok((accuracy(&preds, &golds)?, loss / examples.len().max(1) as f64))
    }

    /// Loss and gradients of a batch. With `seed`, dropout is active in both
    /// encoder and head.
    pub fn loss_and_grads(&self, examples: &[Encoded], seed: Option<u64>) -> Result<(f64, Parameters, HeadParams)> {
        let ids: Vec<&[u32]> = examples.iter().map(|e| e.ids.as_slice()).collect();
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let batch = MaskedBatch::unlabeled(&ids);
        let h = self.encoder.cfg.hidden;
        let mode = seed.map_or(Mode::Eval, |seed| Mode::Train { seed });
        let cache = model::forward_hidden(&self.encoder, &batch, mode)?;
        let pooled = pool_bos(&cache.hidden, batch.batch, batch.seq_len, h);
        let mut head_rng = seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ 0x4845_4144));
        let (logits, hc) = head_forward(&self.head, &pooled, batch.batch, head_rng.as_mut())?;
        let (loss, d_logits) = softmax_cross_entropy(&logits, &labels, self.head.num_classes())?;
        let mut g_head = self.head.zeros_like();
        let d_pooled = head_backward(&self.head, &hc, &d_logits, &mut g_head)?;
        let mut d_hidden = vec![0.0; cache.hidden.len()];
        for r in 0..batch.batch {
            let o = r * batch.seq_len * h;
            d_hidden[o..o + h].copy_from_slice(&d_pooled[r * h..(r + 1) * h]);
        }
        let mut g_enc = self.encoder.zeros_like();
        model::backward_hidden(&self.encoder, &cache, &d_hidden, &mut g_enc)?;
        Ok((loss, g_enc, g_head))
    }
}

/// Outcome of one learning rate of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub lr: f64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

impl GridRun {
    /// Higher accuracy wins; equal accuracy falls back to lower loss.
    fn beats(&self, other: &GridRun) -> bool {
        self.val_accuracy > other.val_accuracy || (self.val_accuracy == other.val_accuracy && self.val_loss < other.val_loss)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub runs: Vec<GridRun>,
    pub best_lr: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub model: Classifier,
}

/// Split off a seeded random 20% of `train` for validation.
pub fn split20<T: Clone>(train: &[T], seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((train.len() as f64) * 0.2).round() as usize;
    let n_val = n_val.min(train.len().saturating_sub(1));
    let val = idx[..n_val].iter().map(|&i| train[i].clone()).collect();
    let rest = idx[n_val..].iter().map(|&i| train[i].clone()).collect();
    (rest, val)
}

fn seed_mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train one classifier at a constant `lr`, keeping the epoch with the best
/// validation accuracy; ties go to the lower validation loss, then to the
/// earlier epoch.
pub fn train_classifier(
    start: &Classifier,
    train: &[Encoded],
    val: &[Encoded],
    grid: &GridSearchConfig,
    lr: f64,
    seed: u64,
) -> Result<(Classifier, GridRun)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let adam = AdamConfig { warmup_steps: 0, total_steps: 1, accumulation: 1, ..AdamConfig::default() };
    let mut model = start.clone();
    let mut enc_state = AdamState::new(&model.encoder);
    let mut head_state = AdamState::new(&model.head);
    let mut best = (model.clone(), GridRun { lr, best_epoch: 0, val_accuracy: f64::NEG_INFINITY, val_loss: f64::INFINITY });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=grid.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(seed, epoch as u64)));
        for chunk in order.chunks(grid.batch_size) {
            step += 1;
            let batch: Vec<Encoded> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, g_enc, g_head) = model.loss_and_grads(&batch, Some(seed_mix(seed ^ 0xF1, step)))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let g_enc: Vec<Tensor> = g_enc.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let g_head: Vec<Tensor> = g_head.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            adam_step(&mut model.encoder, &g_enc, &mut enc_state, &adam, lr)?;
            adam_step(&mut model.head, &g_head, &mut head_state, &adam, lr)?;
        }
        let (val_accuracy, val_loss) = model.evaluate_with_loss(val, 64)?;
        let run = GridRun { lr, best_epoch: epoch, val_accuracy, val_loss };
        if run.beats(&best.1) {
            best = (model.clone(), run);
        }
    }
    Ok(best)
}

/// Grid search over `grid.learning_rates` starting from `encoder`; the run
/// with the highest validation accuracy (then lowest validation loss, then
/// first in grid order) is scored on `test`.
pub fn finetune_encoded(
    encoder: &Parameters,
    train: &[Encoded],
    dev: &[Encoded],
    test: &[Encoded],
    head: &HeadConfig,
    grid: &GridSearchConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    grid.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (train, val) = match grid.val_policy {
        ValPolicy::Split20 => split20(train, seed),
        ValPolicy::DevSet => (train.to_vec(), dev.to_vec()),
    };
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let start = Classifier { head: HeadParams::init(head, encoder.cfg.hidden, seed_mix(seed, 0x48))?, encoder: encoder.clone() };
    let results: Vec<Result<(Classifier, GridRun)>> = grid
        .learning_rates
        .par_iter()
        .map(|&lr| train_classifier(&start, &train, &val, grid, lr, seed))
        .collect();
    let mut runs = Vec::new();
    let mut best: Option<(Classifier, GridRun)> = None;
    for r in results {
        let (m, run) = r?;
        runs.push(run.clone());
        if best.as_ref().map_or(true, |(_, b)| run.beats(b)) {
            best = Some((m, run));
        }
    }
    let (model, run) = best.expect("grid is non-empty");
    let test_accuracy = model.evaluate(test, 64)?;
    Ok(FinetuneOutcome { runs, best_lr: run.lr, val_accuracy: run.val_accuracy, test_accuracy, model })
}

pub fn encode_examples(examples: &[TaskExample], tokenizer: &Tokenizer, max_len: usize, num_classes: usize) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .map(|e| {
            if e.label >= num_classes {
                return Err(Error::Contract(format!("label {} out of range for {num_classes} classes", e.label)));
            }
            Ok(Encoded { ids: build_input(e, tokenizer, max_len), label: e.label })
        })
        .collect()
}

/// Fine-tune the encoder stored in `ckpt` on `data`.
pub fn finetune_task(
    ckpt: &Checkpoint,
    tokenizer: &Tokenizer,
    data: &TaskData,
    head: &HeadConfig,
    grid: &GridSearchConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let hash = tokenizer.vocab.hash();
    if hash != ckpt.header.vocab_hash {
        return Err(Error::VocabMismatch(format!("checkpoint vocabulary {} but tokenizer {}", ckpt.header.vocab_hash, hash)));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_len = grid.max_len.min(ckpt.params.cfg.max_positions);
    let enc = |xs: &[TaskExample]| encode_examples(xs, tokenizer, max_len, data.num_classes);
    finetune_encoded(&ckpt.params, &enc(&data.train)?, &enc(&data.dev)?, &enc(&data.test)?, head, grid, seed)
}
